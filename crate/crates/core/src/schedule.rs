//! Per-frame noise times for the rolling and pre-rolling phases, the
//! training-time mixture between them, and the logit-normal loss weight.
//!
//! Times follow the flow convention used throughout the crate: `t = 1` is
//! clean data, `t = 0` is pure noise. Frame `k = 0` is the oldest (cleanest)
//! frame of the window.

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_THETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    PreRoll,
    Roll,
}

/// Noise times for every frame of a window at a given phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVector {
    pub t: Vec<f64>,
    pub kind: PhaseKind,
    pub phase: f64,
}

impl TimestepVector {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Times as the element type of a model.
    pub fn as_real<F: crate::numerics::Real>(&self) -> Vec<F> {
        self.t.iter().map(|&t| F::from_f64_lossy(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    /// Window length in frames.
    pub window: usize,
    /// Probability of drawing a pre-roll schedule during training.
    pub theta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, theta: DEFAULT_THETA }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window must be at least one frame"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!("theta {} outside [0, 1]", self.theta)));
        }
        Ok(())
    }
}

fn check(window: usize, phase: f64) -> Result<()> {
    if window == 0 {
        return Err(Error::invalid("window must be at least one frame"));
    }
    if !(0.0..=1.0).contains(&phase) {
        return Err(Error::invalid(format!("phase {phase} outside [0, 1]")));
    }
    Ok(())
}

/// `t_k = 1 - (k + phase) / T`.
pub fn rolling_timesteps(window: usize, phase: f64) -> Result<TimestepVector> {
    check(window, phase)?;
    let n = window as f64;
    let t = (0..window).map(|k| 1.0 - (k as f64 + phase) / n).collect();
    Ok(TimestepVector { t, kind: PhaseKind::Roll, phase })
}

/// `t_k = clamp(1 - (k / T + phase), 0, 1)`.
pub fn preroll_timesteps(window: usize, phase: f64) -> Result<TimestepVector> {
    check(window, phase)?;
    let n = window as f64;
    let t = (0..window)
        .map(|k| (1.0 - (k as f64 / n + phase)).clamp(0.0, 1.0))
        .collect();
    Ok(TimestepVector { t, kind: PhaseKind::PreRoll, phase })
}

/// Draw `phase ~ U(0,1)` and pick the pre-roll schedule with probability
/// theta, the rolling one otherwise.
pub fn sample_training_schedule<R: Rng + ?Sized>(cfg: &ScheduleConfig, rng: &mut R) -> Result<TimestepVector> {
    cfg.validate()?;
    let phase: f64 = rng.random();
    let preroll = rng.random::<f64>() < cfg.theta;
    if preroll {
        preroll_timesteps(cfg.window, phase)
    } else {
        rolling_timesteps(cfg.window, phase)
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Logit-normal(0, 1) density at `t`, extended by zero at both endpoints.
pub fn loss_weight(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let logit = (t / (1.0 - t)).ln();
    INV_SQRT_2PI / (t * (1.0 - t)) * (-0.5 * logit * logit).exp()
}
