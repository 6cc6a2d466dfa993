//! Control-branch fine-tuning and AdamW.
//!
//! The loss is the clean-latent error `mean((z0 - z0_hat)^2)` with
//! `z0_hat = sqrt(ab) z_t - sqrt(1 - ab) v_theta`, which equals the velocity
//! error weighted by `1 - ab`.

use ndarray::{Array3, ArrayD};
use rayon::prelude::*;

use super::{DenoiserModel, ParamStore, Trainable};
use crate::attention::AttentionMode;
use crate::autograd::Tape;
use crate::codec::Codec;
use crate::error::{check_shape, Error, Result};
use crate::prompts::TaskPrompt;
use crate::scheduler::forward_diffuse;

/// One paired single-image training example at a fixed timestep and noise.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub clean: &'a Array3<f64>,
    pub degraded: &'a Array3<f64>,
    pub prompt: &'a TaskPrompt,
    pub t: usize,
    /// Latent-shaped Gaussian noise.
    pub noise: &'a Array3<f64>,
}

struct Diffused {
    zt: Array3<f64>,
    target: ArrayD<f64>,
    weight: f64,
}

/// AdamW with PyTorch default hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<_> = params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * wd * *p;
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

impl DenoiserModel {
    /// Noised latent, velocity target `sqrt(ab) noise - sqrt(1 - ab) z0` and
    /// the loss weight `1 - ab`.
    fn diffuse(&self, codec: &Codec, clean: &Array3<f64>, t: usize, noise: &Array3<f64>) -> Result<Diffused> {
        let z0 = codec.encode(clean)?.data;
        check_shape(z0.shape(), noise.shape())?;
        let sched = self.noise_schedule();
        let zt = forward_diffuse(&z0, t, noise, sched)?;
        let ab = sched.alpha_bar(t)?;
        let target = noise * ab.sqrt() - z0 * (1.0 - ab).sqrt();
        Ok(Diffused {
            zt,
            target: target.insert_axis(ndarray::Axis(0)).into_dyn(),
            weight: 1.0 - ab,
        })
    }

    fn training_inputs(
        &self,
        codec: &Codec,
        ex: &TrainExample<'_>,
    ) -> Result<(Diffused, Array3<f64>)> {
        check_shape(ex.clean.shape(), ex.degraded.shape())?;
        let d = self.diffuse(codec, ex.clean, ex.t, ex.noise)?;
        let cond = codec.encode(ex.degraded)?.data;
        Ok((d, cond))
    }

    pub fn training_loss(&self, codec: &Codec, ex: &TrainExample<'_>) -> Result<f64> {
        let (d, cond) = self.training_inputs(codec, ex)?;
        let mut tape = Tape::new();
        let fwd = self.forward(
            &mut tape,
            std::slice::from_ref(&d.zt),
            ex.t,
            Some(std::slice::from_ref(&cond)),
            ex.prompt,
            AttentionMode::SELF,
            Trainable::Nothing,
        )?;
        let loss = tape.mse(fwd.v, d.target);
        Ok(d.weight * tape.value(loss)[[]])
    }

    /// Loss and its gradient with respect to every control parameter, in
    /// declaration order. Base parameters are constants on the tape.
    pub fn loss_and_control_grad(
        &self,
        codec: &Codec,
        ex: &TrainExample<'_>,
    ) -> Result<(f64, Vec<ArrayD<f64>>)> {
        let (d, cond) = self.training_inputs(codec, ex)?;
        let mut tape = Tape::new();
        let fwd = self.forward(
            &mut tape,
            std::slice::from_ref(&d.zt),
            ex.t,
            Some(std::slice::from_ref(&cond)),
            ex.prompt,
            AttentionMode::SELF,
            Trainable::Control,
        )?;
        let loss_var = tape.mse(fwd.v, d.target);
        let loss = d.weight * tape.value(loss_var)[[]];
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss_var);
        let params = fwd.control_params.expect("control branch recorded");
        let out = params
            .0
            .iter()
            .zip(self.control.values())
            .map(|(v, p)| grads.get(*v).map_or_else(|| ArrayD::zeros(p.raw_dim()), |g| g * d.weight))
            .collect();
        Ok((loss, out))
    }
}

/// One gradient step on the control branch. Returns the pre-step loss; the
/// model is left untouched when the loss is not finite.
pub fn train_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    codec: &Codec,
    ex: &TrainExample<'_>,
    lr: f64,
) -> Result<f64> {
    train_batch_step(model, opt, codec, std::slice::from_ref(ex), lr)
}

/// One gradient step on the mean loss of a minibatch of single-image
/// examples. Per-example gradients are computed in parallel and summed in
/// batch order. Returns the mean pre-step loss.
pub fn train_batch_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    codec: &Codec,
    batch: &[TrainExample<'_>],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(crate::error::invalid("empty training batch"));
    }
    let frozen: &DenoiserModel = model;
    let per_example: Vec<(f64, Vec<ArrayD<f64>>)> = batch
        .par_iter()
        .map(|ex| frozen.loss_and_control_grad(codec, ex))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<ArrayD<f64>> = model.control().values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
    for (l, g) in &per_example {
        loss += l * scale;
        for (acc, g) in grads.iter_mut().zip(g) {
            acc.scaled_add(scale, g);
        }
    }
    opt.update(model.control_mut(), &grads, lr);
    Ok(loss)
}
