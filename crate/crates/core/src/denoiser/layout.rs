//! Parameter declaration for the toy U-net and its control branch.
//!
//! Declaration order is significant: it fixes both the RNG draw order at
//! initialization and the blob order in checkpoints.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest value any single dimension may take.
pub const MAX_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserDims {
    /// Channels of the latent grid (codec channels times patch squared).
    pub latent_channels: usize,
    /// Feature width at full latent resolution.
    pub width0: usize,
    /// Feature width at half resolution.
    pub width1: usize,
    /// Query/key/value width of every attention layer.
    pub attn_dim: usize,
    pub prompt_dim: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for DenoiserDims {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            width0: 32,
            width1: 64,
            attn_dim: 32,
            prompt_dim: crate::prompts::DEFAULT_PROMPT_DIM,
            time_dim: 32,
            ffn_mult: 2,
        }
    }
}

impl DenoiserDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latent_channels", self.latent_channels),
            ("width0", self.width0),
            ("width1", self.width1),
            ("attn_dim", self.attn_dim),
            ("prompt_dim", self.prompt_dim),
            ("time_dim", self.time_dim),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in fields {
            if v == 0 || v > MAX_DIM {
                return Err(invalid(format!("{name} must be in [1, {MAX_DIM}], got {v}")));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(invalid("time_dim must be even"));
        }
        if self.width0 * self.ffn_mult > MAX_DIM || self.width1 * self.ffn_mult > MAX_DIM {
            return Err(invalid("feed-forward width exceeds limit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
}

/// Largest group count up to 8 that divides `channels`.
/// Init gain of the spatial attention query/key projections. Larger than
/// unit so that attention in the frozen random base is peaked rather than a
/// near-uniform average over all tokens.
const ATTN_QK_GAIN: f64 = 3.0;

pub(crate) fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).expect("1 divides")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub temb: Linear,
    pub conv2: Conv,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Transformer {
    pub norm1: Norm,
    pub norm2: Norm,
    pub norm3: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Encoder {
    pub time: Linear,
    pub conv_in: Conv,
    pub res0: ResBlock,
    pub attn0: Transformer,
    pub down: Conv,
    pub res1: ResBlock,
    pub attn1: Transformer,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BaseLayout {
    pub enc: Encoder,
    pub up: Conv,
    pub res2: ResBlock,
    pub norm_out: Norm,
    pub conv_out: Conv,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ControlLayout {
    pub enc: Encoder,
    pub hint: Conv,
    pub zero0: Conv,
    pub zero1: Conv,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `N(0, gain^2 / fan_in)`.
    Scaled(f64),
    Zero,
    One,
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub(crate) values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total scalar count, computed from shapes alone.
    pub fn element_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn allocate_zeros(&mut self) {
        self.values = self.shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect();
    }

    fn initialize(&mut self, rng: &mut ChaCha8Rng) {
        self.values = self
            .shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| match *init {
                Init::Zero => ArrayD::zeros(IxDyn(shape)),
                Init::One => ArrayD::ones(IxDyn(shape)),
                Init::Scaled(gain) => {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1] * shape[2] * shape[3]
                    } else {
                        shape[0]
                    };
                    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid std");
                    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
                }
            })
            .collect();
    }
}

#[derive(Default)]
struct Builder {
    store: Option<ParamStore>,
    prefix: Vec<String>,
}

impl Builder {
    fn new() -> Self {
        Self {
            store: Some(ParamStore {
                names: Vec::new(),
                shapes: Vec::new(),
                inits: Vec::new(),
                values: Vec::new(),
            }),
            prefix: Vec::new(),
        }
    }

    fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> usize {
        let store = self.store.as_mut().expect("builder in use");
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        store.names.push(full);
        store.shapes.push(shape);
        store.inits.push(init);
        store.names.len() - 1
    }

    fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, stride: usize, init: Init) -> Conv {
        self.scope(name, |b| Conv {
            w: b.param("w", vec![co, ci, k, k], init),
            b: b.param("b", vec![co], Init::Zero),
            stride,
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool, gain: f64) -> Linear {
        self.scope(name, |b| Linear {
            w: b.param("w", vec![din, dout], Init::Scaled(gain)),
            b: bias.then(|| b.param("b", vec![dout], Init::Zero)),
        })
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        self.scope(name, |b| Norm {
            gamma: b.param("g", vec![ch], Init::One),
            beta: b.param("b", vec![ch], Init::Zero),
            groups: norm_groups(ch),
        })
    }

    fn resblock(&mut self, name: &str, ch: usize, time_dim: usize) -> ResBlock {
        self.scope(name, |b| ResBlock {
            norm1: b.norm("norm1", ch),
            conv1: b.conv("conv1", ch, ch, 3, 1, Init::Scaled(1.0)),
            temb: b.linear("temb", time_dim, ch, true, 1.0),
            norm2: b.norm("norm2", ch),
            conv2: b.conv("conv2", ch, ch, 3, 1, Init::Scaled(0.5)),
        })
    }

    fn transformer(&mut self, name: &str, ch: usize, dims: &DenoiserDims) -> Transformer {
        let d = dims.attn_dim;
        let ff = ch * dims.ffn_mult;
        self.scope(name, |b| Transformer {
            norm1: b.norm("norm1", ch),
            norm2: b.norm("norm2", ch),
            norm3: b.norm("norm3", ch),
            q: b.linear("q", ch, d, false, ATTN_QK_GAIN),
            k: b.linear("k", ch, d, false, ATTN_QK_GAIN),
            v: b.linear("v", ch, d, false, 1.0),
            o: b.linear("o", d, ch, true, 0.5),
            cross_q: b.linear("cross_q", ch, d, false, 1.0),
            cross_k: b.linear("cross_k", dims.prompt_dim, d, false, 1.0),
            cross_v: b.linear("cross_v", dims.prompt_dim, d, false, 1.0),
            cross_o: b.linear("cross_o", d, ch, true, 0.5),
            ff1: b.linear("ff1", ch, ff, true, 1.0),
            ff2: b.linear("ff2", ff, ch, true, 0.5),
        })
    }

    fn encoder(&mut self, dims: &DenoiserDims) -> Encoder {
        self.scope("enc", |b| Encoder {
            time: b.linear("time", dims.time_dim, dims.time_dim, true, 1.0),
            conv_in: b.conv("conv_in", dims.width0, dims.latent_channels, 3, 1, Init::Scaled(1.0)),
            res0: b.resblock("res0", dims.width0, dims.time_dim),
            attn0: b.transformer("attn0", dims.width0, dims),
            down: b.conv("down", dims.width1, dims.width0, 3, 2, Init::Scaled(1.0)),
            res1: b.resblock("res1", dims.width1, dims.time_dim),
            attn1: b.transformer("attn1", dims.width1, dims),
        })
    }

    fn finish(mut self) -> ParamStore {
        self.store.take().expect("builder in use")
    }
}

/// Declares the frozen base network. Values are left unallocated.
pub(crate) fn declare_base(dims: &DenoiserDims) -> (ParamStore, BaseLayout) {
    let mut b = Builder::new();
    let enc = b.encoder(dims);
    let layout = BaseLayout {
        enc,
        up: b.conv("dec.up", dims.width0, dims.width1, 3, 1, Init::Scaled(1.0)),
        res2: b.resblock("dec.res2", dims.width0, dims.time_dim),
        norm_out: b.norm("dec.norm_out", dims.width0),
        conv_out: b.conv("dec.conv_out", dims.latent_channels, dims.width0, 3, 1, Init::Scaled(1.0)),
    };
    (b.finish(), layout)
}

/// Declares the trainable control branch. Values are left unallocated.
pub(crate) fn declare_control(dims: &DenoiserDims) -> (ParamStore, ControlLayout) {
    let mut b = Builder::new();
    let enc = b.encoder(dims);
    let layout = ControlLayout {
        enc,
        hint: b.conv("hint", dims.width0, dims.latent_channels, 3, 1, Init::Scaled(1.0)),
        zero0: b.conv("zero0", dims.width0, dims.width0, 1, 1, Init::Zero),
        zero1: b.conv("zero1", dims.width1, dims.width1, 1, 1, Init::Zero),
    };
    (b.finish(), layout)
}

/// Seeded base and control stores; the control encoder starts as a copy of
/// the base encoder and its output projections start at zero.
pub(crate) fn initialize(base: &mut ParamStore, control: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base.initialize(&mut rng);
    control.initialize(&mut rng);
    copy_encoder(base, control);
}

/// Copies every base parameter the control store shares by name and zeroes
/// the control output projections.
pub(crate) fn copy_encoder(base: &ParamStore, control: &mut ParamStore) {
    for (i, name) in control.names.iter().enumerate() {
        if let Some(v) = base.get(name) {
            control.values[i] = v.clone();
        } else if name.starts_with("zero") {
            control.values[i].fill(0.0);
        }
    }
}

pub(crate) fn zeros(store: &mut ParamStore) {
    store.allocate_zeros();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_encoder_mirrors_base_names() {
        let dims = DenoiserDims::default();
        let (base, _) = declare_base(&dims);
        let (control, _) = declare_control(&dims);
        let enc: Vec<_> = base.names().iter().filter(|n| n.starts_with("enc.")).collect();
        let cenc: Vec<_> = control.names().iter().filter(|n| n.starts_with("enc.")).collect();
        assert_eq!(enc, cenc);
        assert!(control.names().iter().any(|n| n == "zero0.w"));
        assert!(base.names().iter().any(|n| n == "dec.conv_out.w"));
    }

    #[test]
    fn dims_validation() {
        assert!(DenoiserDims::default().validate().is_ok());
        let bad = DenoiserDims { width0: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let odd = DenoiserDims { time_dim: 31, ..Default::default() };
        assert!(odd.validate().is_err());
        let huge = DenoiserDims { attn_dim: MAX_DIM + 1, ..Default::default() };
        assert!(huge.validate().is_err());
    }
}
