//! Adam with a separate latent learning rate, unit-sphere latent projection,
//! and the keyframe-to-full latent table expansion.

use crate::error::{Error, Result};
use crate::field::grad::GradientSet;
use crate::field::{FieldModel, FieldParams, LatentTable};

/// Optimizer hyperparameters; moments live in `OptimizerState`.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub latent_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 5e-4,
            latent_lr_mult: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators shaped like the model they update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m_params: FieldParams,
    pub v_params: FieldParams,
    pub m_latents: Option<LatentTable>,
    pub v_latents: Option<LatentTable>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &FieldModel) -> Self {
        let zeros = || model.params.zeros_like();
        let latent_zeros = || model.latents().map(|t| LatentTable::zeros(t.t_count, t.d));
        OptimizerState {
            m_params: zeros(),
            v_params: zeros(),
            m_latents: latent_zeros(),
            v_latents: latent_zeros(),
            step: 0,
        }
    }
}

/// Divides every row by its ℓ2 norm; a zero row cannot sit on the unit
/// sphere, so it is an error.
pub fn project_latents(table: &mut LatentTable) -> Result<()> {
    for t in 0..table.t_count {
        let norm = table.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Invalid(format!(
                "latent row {t} is zero and cannot be normalized"
            )));
        }
        for v in table.row_mut(t) {
            *v /= norm;
        }
    }
    Ok(())
}

fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, hp: &AdamParams, bias1: f64, bias2: f64) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// One bias-corrected Adam step over network weights and latent codes, latent
/// rows at `learning_rate × latent_lr_mult`, followed by projection of every
/// latent row back onto the unit sphere.
pub fn adam_step(
    model: &mut FieldModel,
    grads: &GradientSet,
    state: &mut OptimizerState,
    hp: &AdamParams,
) -> Result<()> {
    grads.check_finite()?;
    state.step += 1;
    let bias1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bias2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (((_, p), (_, g)), ((_, m), (_, v))) in model
        .params
        .tensors_mut()
        .into_iter()
        .zip(grads.params.tensors())
        .zip(
            state
                .m_params
                .tensors_mut()
                .into_iter()
                .zip(state.v_params.tensors_mut()),
        )
    {
        adam_update(p, g, m, v, hp.learning_rate, hp, bias1, bias2);
    }
    if let Some(table) = model.latents_mut() {
        let g = grads
            .latents
            .as_ref()
            .expect("latent model gradients carry a latent table");
        let m = state.m_latents.as_mut().unwrap();
        let v = state.v_latents.as_mut().unwrap();
        adam_update(
            &mut table.codes,
            &g.codes,
            &mut m.codes,
            &mut v.codes,
            hp.learning_rate * hp.latent_lr_mult,
            hp,
            bias1,
            bias2,
        );
        project_latents(table)?;
    }
    Ok(())
}

/// Turns a keyframe latent table (rows for frames 0, K, 2K, …) into a
/// per-frame table: keyframe rows copied verbatim, interior frames linearly
/// interpolated, frames past the last keyframe copying it.
pub fn expand_latent_table(keyframes: &LatentTable, k: usize, t_count: usize) -> Result<LatentTable> {
    if keyframes.t_count == 0 {
        return Err(Error::Invalid("keyframe table is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("keyframe interval must be ≥ 1".into()));
    }
    let expected = (t_count - 1) / k + 1;
    if keyframes.t_count != expected {
        return Err(Error::Invalid(format!(
            "keyframe table has {} rows, {t_count} frames at interval {k} need {expected}",
            keyframes.t_count
        )));
    }
    let mut out = LatentTable::zeros(t_count, keyframes.d);
    for t in 0..t_count {
        let i = t / k;
        let row = if t % k == 0 || i + 1 >= keyframes.t_count {
            let src = i.min(keyframes.t_count - 1);
            keyframes.row(src).to_vec()
        } else {
            let lambda = (t - i * k) as f64 / k as f64;
            keyframes
                .row(i)
                .iter()
                .zip(keyframes.row(i + 1))
                .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
                .collect()
        };
        out.row_mut(t).copy_from_slice(&row);
    }
    Ok(out)
}

/// The video frames a keyframe-stage latent table covers.
pub fn keyframe_frames(k: usize, t_count: usize) -> Vec<usize> {
    (0..t_count).step_by(k).collect()
}
