fn main() {
    std::process::exit(tdm::cli::run(std::env::args_os()));
}
