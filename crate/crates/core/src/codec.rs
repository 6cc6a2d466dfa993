//! Exactly invertible latent codec: space-to-depth by `p`, then a fixed
//! orthonormal channel mix.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_PATCH: usize = 2;
const MIXING_SEED: u64 = 0x7d11_c0de;

/// Latent tensor of shape `(C * p^2, H / p, W / p)` plus the image shape it
/// came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Array3<f64>,
    pub patch: usize,
    pub source_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Codec {
    channels: usize,
    patch: usize,
    mixing: Array2<f64>,
}

impl Codec {
    pub fn new(channels: usize, patch: usize) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return Err(invalid("codec needs channels >= 1 and patch >= 1"));
        }
        let n = channels * patch * patch;
        Ok(Self {
            channels,
            patch,
            mixing: orthonormal(n, MIXING_SEED),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_channels(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = image_shape;
        if c != self.channels {
            return Err(invalid(format!("codec expects {} channels, got {c}", self.channels)));
        }
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(invalid(format!(
                "image {h}x{w} is not divisible by patch {}",
                self.patch
            )));
        }
        Ok((self.latent_channels(), h / self.patch, w / self.patch))
    }

    pub fn encode(&self, image: &Array3<f64>) -> Result<LatentGrid> {
        let (lc, lh, lw) = self.latent_shape(image.dim())?;
        let p = self.patch;
        let mut packed = Array2::<f64>::zeros((lc, lh * lw));
        for ((c, y, x), &v) in image.indexed_iter() {
            packed[[(c * p + y % p) * p + x % p, (y / p) * lw + x / p]] = v;
        }
        let mixed = self.mixing.dot(&packed);
        Ok(LatentGrid {
            data: mixed.into_shape_with_order((lc, lh, lw)).expect("contiguous"),
            patch: p,
            source_shape: image.dim(),
        })
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Array3<f64>> {
        if z.patch != self.patch {
            return Err(invalid(format!("latent patch {} != codec patch {}", z.patch, self.patch)));
        }
        let expected = self.latent_shape(z.source_shape)?;
        if z.data.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.2],
                actual: z.data.shape().to_vec(),
            });
        }
        let (lc, lh, lw) = expected;
        let p = self.patch;
        let flat = z.data.to_shape((lc, lh * lw)).expect("latent reshape");
        let unmixed = self.mixing.t().dot(&flat);
        Ok(Array3::from_shape_fn(z.source_shape, |(c, y, x)| {
            unmixed[[(c * p + y % p) * p + x % p, (y / p) * lw + x / p]]
        }))
    }

    /// Wraps raw latent data with the metadata this codec expects for images
    /// of `image_shape`.
    pub fn wrap(&self, data: Array3<f64>, image_shape: (usize, usize, usize)) -> Result<LatentGrid> {
        let z = LatentGrid { data, patch: self.patch, source_shape: image_shape };
        let expected = self.latent_shape(image_shape)?;
        if z.data.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.2],
                actual: z.data.shape().to_vec(),
            });
        }
        Ok(z)
    }
}

/// Seeded random orthonormal matrix via modified Gram-Schmidt.
fn orthonormal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}
