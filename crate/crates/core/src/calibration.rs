//! MI estimation on correlated Gaussians, where the true value is known.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{correlated_gaussian_pairs, gaussian_true_mi};
use crate::error::{Error, Result};
use crate::mi_losses::{bound_on_tape, regularized_loss_on_tape, LossKind, MiLossConfig};
use crate::models::PairCriticConfig;
use crate::ndmath::{AdamConfig, AdamState, Params, Tape, Tensor};
use crate::seeding::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub rho: f64,
    pub dims: usize,
    pub batch: usize,
    pub steps: usize,
    /// Trailing steps averaged into the estimate.
    pub window: usize,
    pub adam: AdamConfig,
    pub loss: MiLossConfig,
    pub critic: PairCriticConfig,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(kind: LossKind, rho: f64, seed: u64) -> Self {
        CalibrationConfig {
            rho,
            dims: 1,
            batch: 64,
            steps: 3000,
            window: 500,
            adam: AdamConfig::default(),
            loss: MiLossConfig::new(kind),
            critic: PairCriticConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.loss.kind.is_mi() {
            return Err(Error::invalid("loss", format!("{} is not an MI bound", self.loss.kind)));
        }
        if self.batch < 2 {
            return Err(Error::invalid("batch", format!("{} is below 2", self.batch)));
        }
        if self.window == 0 || self.window > self.steps {
            return Err(Error::invalid("window", format!("{} must lie in 1..={}", self.window, self.steps)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub kind: LossKind,
    pub rho: f64,
    pub true_mi: f64,
    /// Mean bound value over the trailing window.
    pub estimate: f64,
    /// Bound value at every step.
    pub series: Vec<f64>,
}

impl CalibrationResult {
    pub fn max_value(&self) -> f64 {
        self.series.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Trains a pair critic with Adam on a fresh batch each step and records the
/// bound's value.
pub fn calibrate_mi(cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let critic = PairCriticConfig {
        x_dims: cfg.dims,
        y_dims: cfg.dims,
        ..cfg.critic
    };
    let pairs = correlated_gaussian_pairs(cfg.rho, cfg.dims, cfg.batch * cfg.steps, derive_seed(cfg.seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let mut params = Params::new(critic.init::<f32>(&mut rng));
    let mut adam = AdamState::new(&params, cfg.adam);
    let width = cfg.batch * cfg.dims;
    let mut series = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let as_tensor = |v: &[f64]| {
            Tensor::new(vec![cfg.batch, cfg.dims], v[step * width..(step + 1) * width].iter().map(|&a| a as f32).collect())
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.leaf(as_tensor(&pairs.x)?);
        let y = tape.leaf(as_tensor(&pairs.y)?);
        let s = critic.scores(&mut tape, &vars, x, y)?;
        let bound = bound_on_tape(&mut tape, &cfg.loss, s)?;
        let loss = regularized_loss_on_tape(&mut tape, &cfg.loss, s)?;
        series.push(tape.value(bound).item()? as f64);
        let g = tape.backward(loss)?;
        let grads = Params::new(vars.iter().map(|&v| g.wrt(v)).collect());
        adam.step(&mut params, &grads)?;
    }
    let tail = &series[cfg.steps - cfg.window..];
    Ok(CalibrationResult {
        kind: cfg.loss.kind,
        rho: cfg.rho,
        true_mi: gaussian_true_mi(cfg.rho, cfg.dims),
        estimate: tail.iter().sum::<f64>() / tail.len() as f64,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_is_deterministic_and_bounded() {
        let mut cfg = CalibrationConfig::new(LossKind::InfoNce, 0.5, 3);
        cfg.steps = 50;
        cfg.window = 10;
        let a = calibrate_mi(&cfg).unwrap();
        assert_eq!(a, calibrate_mi(&cfg).unwrap());
        assert_eq!(a.series.len(), 50);
        assert!(a.max_value() <= (64f64).ln() + 1e-6);
        assert!((a.true_mi - 0.143841).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut cfg = CalibrationConfig::new(LossKind::CrossEntropy, 0.5, 0);
        assert!(calibrate_mi(&cfg).is_err());
        cfg.loss = MiLossConfig::new(LossKind::Mine);
        cfg.window = cfg.steps + 1;
        assert!(calibrate_mi(&cfg).is_err());
        cfg.window = 10;
        cfg.rho = 1.0;
        assert!(calibrate_mi(&cfg).is_err());
    }
}
