//! Noise schedules and the deterministic DDIM latent updates.
//!
//! Timesteps are 1-based: `t` ranges over `[1, T]` and the virtual level
//! `t = 0` denotes the clean latent with `alpha_bar = 1`.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Error, Result};

/// How betas are interpolated between `beta_start` and `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    /// Interpolate `sqrt(beta)` linearly, then square.
    ScaledLinear,
}

pub const MAX_TOTAL_STEPS: usize = 100_000;

/// Parameters from which a [`Schedule`] is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            kind: BetaKind::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.total_steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Beta and cumulative alpha ladders for `T` training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// `alpha_bar` at the virtual clean level `t = 0`.
    pub const ALPHA_BAR_ZERO: f64 = 1.0;

    pub fn new(total_steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        if !(1..=MAX_TOTAL_STEPS).contains(&total_steps) {
            return Err(invalid(format!("total_steps must be in [1, {MAX_TOTAL_STEPS}]")));
        }
        for (name, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("beta out of range: {name} = {b} not in (0, 1)")));
            }
        }
        if beta_start > beta_end {
            return Err(invalid("beta_start must not exceed beta_end"));
        }

        let lerp = |a: f64, b: f64, i: usize| {
            if total_steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (total_steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| match kind {
                BetaKind::Linear => lerp(beta_start, beta_end, i),
                BetaKind::ScaledLinear if beta_start == beta_end => beta_start,
                BetaKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta out of range: {b}")));
        }

        let mut alpha_bars = Vec::with_capacity(total_steps);
        let mut running = 1.0;
        for b in &betas {
            running *= 1.0 - b;
            alpha_bars.push(running);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, index `t - 1` holds `alpha_bar_t`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t` for `t` in `[0, T]`; `t = 0` yields [`Self::ALPHA_BAR_ZERO`].
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(Self::ALPHA_BAR_ZERO),
            t if t <= self.total_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::TimestepOutOfRange { t, lo: 0, hi: self.total_steps() }),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::TimestepOutOfRange { t, lo: 1, hi: self.total_steps() });
        }
        Ok(())
    }
}

/// Closed-form `q(z_t | z_0)`: `sqrt(ab_t) z0 + sqrt(1 - ab_t) noise`.
pub fn forward_diffuse<D: Dimension>(
    z0: &Array<f64, D>,
    t: usize,
    noise: &Array<f64, D>,
    sched: &Schedule,
) -> Result<Array<f64, D>> {
    check_shape(z0.shape(), noise.shape())?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z0).and(noise).map_collect(|&z, &n| a * z + b * n))
}

/// Deterministic DDIM transfer of a latent from noise level `ab_from` to
/// `ab_to` given an epsilon estimate. Both the backward step and the
/// inversion step are this map with the levels ordered differently.
pub fn ddim_transfer<D: Dimension>(
    z: &Array<f64, D>,
    eps: &Array<f64, D>,
    ab_from: f64,
    ab_to: f64,
) -> Result<Array<f64, D>> {
    check_shape(z.shape(), eps.shape())?;
    for ab in [ab_from, ab_to] {
        if !(ab > 0.0 && ab <= 1.0) {
            return Err(invalid(format!("alpha_bar {ab} outside (0, 1]")));
        }
    }
    if ab_from == ab_to {
        return Ok(z.clone());
    }
    let (sf, nf) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (st, nt) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    Ok(Zip::from(z).and(eps).map_collect(|&z, &e| {
        let pred_z0 = (z - nf * e) / sf;
        st * pred_z0 + nt * e
    }))
}

/// One DDIM sampling step from `t` down to `t_prev` (`t_prev = 0` lands on
/// the clean level).
pub fn ddim_backward_step<D: Dimension>(
    z_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
) -> Result<Array<f64, D>> {
    if t_prev >= t {
        return Err(invalid(format!("backward step requires t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_step(t)?;
    ddim_transfer(z_t, eps, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?)
}

/// One DDIM inversion step from `t` (possibly 0) up to `t_next`.
pub fn ddim_inversion_step<D: Dimension>(
    z_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: usize,
    t_next: usize,
    sched: &Schedule,
) -> Result<Array<f64, D>> {
    if t_next <= t {
        return Err(invalid(format!("inversion step requires t_next > t, got {t_next} <= {t}")));
    }
    sched.check_step(t_next)?;
    ddim_transfer(z_t, eps, sched.alpha_bar(t)?, sched.alpha_bar(t_next)?)
}

/// An ascending subset of training timesteps visited by few-step samplers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepLadder {
    steps: Vec<usize>,
}

impl TimestepLadder {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    pub fn top(&self) -> usize {
        *self.steps.last().expect("ladder is never empty")
    }

    /// `(from, to)` pairs climbing from the clean level to the top.
    pub fn ascending_pairs(&self) -> Vec<(usize, usize)> {
        std::iter::once(0)
            .chain(self.steps.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    /// `(from, to)` pairs descending from the top to the clean level.
    pub fn descending_pairs(&self) -> Vec<(usize, usize)> {
        self.ascending_pairs().into_iter().rev().map(|(lo, hi)| (hi, lo)).collect()
    }
}

/// Trailing uniform stride: `{T - k * floor(T / n) : k = n-1 ..= 0}`.
pub fn select_timesteps(sched: &Schedule, n_steps: usize) -> Result<TimestepLadder> {
    let total = sched.total_steps();
    if n_steps == 0 || n_steps > total {
        return Err(invalid(format!("n_steps must be in [1, {total}], got {n_steps}")));
    }
    let stride = total / n_steps;
    let steps = (0..n_steps).rev().map(|k| total - k * stride).collect();
    Ok(TimestepLadder { steps })
}
