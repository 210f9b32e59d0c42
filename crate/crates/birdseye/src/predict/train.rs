//! Minibatch training loop with the adaptive-moment update rule, plus the
//! flat-parameter plumbing shared by both sequence models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PredictError;

/// Models whose parameters can be read and written as one flat `f64` vector
/// (a fixed canonical ordering per model).
pub trait FlatParams {
    fn n_params(&self) -> usize;
    fn flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, v: &[f64]) -> Result<(), PredictError>;
}

/// A model trainable by [`train_model`]: per-sample loss and gradient in
/// flat-parameter order.
pub trait SequenceModel: FlatParams {
    type Sample;
    fn sample_loss_grad(&self, sample: &Self::Sample) -> Result<(f64, Vec<f64>), PredictError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 200,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Adaptive-moment gradient step state (β₁=0.9, β₂=0.999, ε=1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Trains in place; returns the mean loss per epoch.
///
/// Deterministic given `cfg.seed` (epoch shuffles come from one seeded
/// stream). `lr == 0` leaves the parameters bitwise untouched. A non-finite
/// batch loss or gradient aborts with a divergence error, restoring the last
/// parameters that evaluated finite.
pub fn train_model<M: SequenceModel>(
    model: &mut M,
    samples: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, PredictError> {
    if samples.is_empty() {
        return Err(PredictError::InvalidArgument("empty training set".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(PredictError::InvalidArgument(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.flat();
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut last_finite = params.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut loss = 0.0;
            let mut grad = vec![0.0; params.len()];
            for &i in chunk {
                let (l, g) = model.sample_loss_grad(&samples[i])?;
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            loss *= inv;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                model.set_flat(&last_finite)?;
                return Err(PredictError::Divergence(format!(
                    "non-finite loss at epoch {epoch} (last epoch losses: {:?})",
                    trace.last()
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            last_finite.copy_from_slice(&params);
            if cfg.lr > 0.0 {
                adam.step(&mut params, &grad, cfg.lr);
                model.set_flat(&params)?;
            }
        }
        trace.push(epoch_loss / samples.len() as f64);
    }
    Ok(trace)
}
