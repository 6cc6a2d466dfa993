//! Task prompts: canonical per-task strings and their deterministic
//! embedding vectors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_PROMPT_DIM: usize = 64;
pub const DEFAULT_PROMPT_SEED: u64 = 0;

/// Rows in the hashed token table.
const TABLE_ROWS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Dehaze,
    Derain,
    Denoise,
    Mp4,
    Sr4,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Dehaze, Task::Derain, Task::Denoise, Task::Mp4, Task::Sr4];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Dehaze => "dehaze",
            Task::Derain => "derain",
            Task::Denoise => "denoise",
            Task::Mp4 => "mp4",
            Task::Sr4 => "sr4",
        }
    }

    pub fn canonical_text(&self) -> &'static str {
        match self {
            Task::Dehaze => "remove the haze",
            Task::Derain => "remove the rain",
            Task::Denoise => "remove the noise",
            Task::Mp4 => "remove the compression artifacts",
            Task::Sr4 => "increase the resolution",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown task {s:?}")))
    }
}

/// The five `(task, canonical text)` pairs.
pub fn task_catalog() -> Vec<(Task, &'static str)> {
    Task::ALL.iter().map(|t| (*t, t.canonical_text())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    /// `None` for text outside the catalog and for the neutral prompt.
    pub task: Option<Task>,
    pub text: String,
    pub embedding: Array1<f64>,
}

impl TaskPrompt {
    pub fn for_task(task: Task, dim: usize, seed: u64) -> Self {
        embed_task(task.canonical_text(), dim, seed).expect("catalog text is nonempty")
    }

    /// All-zero embedding standing in for "no task guidance". Unlike every
    /// other prompt it does not have unit norm.
    pub fn neutral(dim: usize) -> Self {
        Self {
            task: None,
            text: String::new(),
            embedding: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn table_row(token: &str, dim: usize, seed: u64) -> Array1<f64> {
    let row = fnv1a(token.as_bytes()) % TABLE_ROWS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ row.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng))
}

/// Whitespace-tokenize, look each token up in a seeded hashed table,
/// mean-pool, and L2-normalize.
pub fn embed_task(text: &str, dim: usize, seed: u64) -> Result<TaskPrompt> {
    if dim == 0 {
        return Err(invalid("prompt dimension must be >= 1"));
    }
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return Err(invalid("prompt text is empty"));
    }
    let mut pooled = Array1::<f64>::zeros(dim);
    for tok in &tokens {
        pooled += &table_row(tok, dim, seed);
    }
    pooled /= tokens.len() as f64;
    let norm = pooled.dot(&pooled).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite("prompt embedding"));
    }
    pooled /= norm;
    let canonical = tokens.join(" ");
    Ok(TaskPrompt {
        task: Task::ALL.into_iter().find(|t| t.canonical_text() == canonical),
        text: text.to_string(),
        embedding: pooled,
    })
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_contents() {
        let cat = task_catalog();
        assert_eq!(cat.len(), 5);
        assert!(cat.contains(&(Task::Denoise, "remove the noise")));
        assert!(cat.contains(&(Task::Derain, "remove the rain")));
        assert!(cat.contains(&(Task::Dehaze, "remove the haze")));
        let mut texts: Vec<_> = cat.iter().map(|c| c.1).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 5);
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let a = embed_task("remove the noise", 64, 7).unwrap();
        let b = embed_task("remove the noise", 64, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.task, Some(Task::Denoise));
        assert!((a.embedding.dot(&a.embedding) - 1.0).abs() < 1e-12);
        let c = embed_task("remove the noise", 64, 8).unwrap();
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn tasks_are_distinct() {
        for (i, a) in Task::ALL.iter().enumerate() {
            for b in &Task::ALL[i + 1..] {
                let ea = TaskPrompt::for_task(*a, 64, 0).embedding;
                let eb = TaskPrompt::for_task(*b, 64, 0).embedding;
                assert!(cosine(&ea, &eb) < 0.99, "{a} vs {b}");
            }
        }
        let rain = embed_task("remove the rain", 64, 0).unwrap();
        let noise = embed_task("remove the noise", 64, 0).unwrap();
        assert!(cosine(&rain.embedding, &noise.embedding) < 0.99);
    }

    #[test]
    fn rejects_empty_text() {
        assert!(embed_task("", 64, 0).is_err());
        assert!(embed_task("   ", 64, 0).is_err());
        assert!(embed_task("x", 0, 0).is_err());
    }

    #[test]
    fn off_catalog_text_has_no_task() {
        let p = embed_task("make it pretty", 16, 0).unwrap();
        assert_eq!(p.task, None);
        assert_eq!(TaskPrompt::neutral(16).embedding.sum(), 0.0);
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!("deblur".parse::<Task>().is_err());
    }
}
