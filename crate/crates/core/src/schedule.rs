//! Learning-rate schedules and stochastic weight averaging. The triangular
//! cyclical schedule sweeps linearly between a lower and upper bound; SWA
//! keeps a running mean of weight snapshots captured at fixed epochs and
//! needs a batch-statistics recalibration pass afterwards.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::ClassifierModel;
use crate::{Error, Result};

/// Triangular cyclical schedule bounds. `stepsize` is the half-cycle length
/// in whatever unit `t` is measured in (epochs by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClrConfig {
    pub lower: f64,
    pub upper: f64,
    pub stepsize: f64,
}

impl Default for ClrConfig {
    fn default() -> Self {
        ClrConfig { lower: 1e-5, upper: 1e-3, stepsize: 2.0 }
    }
}

impl ClrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.lower < self.upper && self.upper.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lower < upper, got {} and {}",
                self.lower, self.upper
            )));
        }
        if !(self.stepsize >= 1.0) {
            return Err(Error::Config(format!("stepsize must be >= 1, got {}", self.stepsize)));
        }
        Ok(())
    }
}

/// Triangular wave with period `2 * stepsize`: troughs at even multiples of
/// the stepsize, peaks at odd multiples, linear in between. `t` may be
/// fractional (e.g. epoch + batch fraction).
pub fn clr_value(t: f64, config: &ClrConfig) -> f64 {
    let cycle = (1.0 + t / (2.0 * config.stepsize)).floor();
    let x = (t / config.stepsize - 2.0 * cycle + 1.0).abs();
    config.lower + (config.upper - config.lower) * (1.0 - x).max(0.0)
}

/// Resolved learning-rate schedule, from the `lr.mode` config key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    Clr(ClrConfig),
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant(lr) if *lr > 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::Constant(lr) => {
                Err(Error::Config(format!("constant learning rate must be positive, got {lr}")))
            }
            LrSchedule::Clr(c) => c.validate(),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Clr(c) => clr_value(t, c),
        }
    }

    /// Returns the schedule with every bound multiplied by `factor`; used to
    /// drop the learning rate when deferred re-weighting kicks in.
    pub fn scaled(&self, factor: f64) -> LrSchedule {
        match *self {
            LrSchedule::Constant(lr) => LrSchedule::Constant(lr * factor),
            LrSchedule::Clr(c) => LrSchedule::Clr(ClrConfig {
                lower: c.lower * factor,
                upper: c.upper * factor,
                stepsize: c.stepsize,
            }),
        }
    }
}

/// Stochastic weight averaging config (`swa.*` keys).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaConfig {
    pub enabled: bool,
    pub start_epoch: usize,
    /// Epochs between snapshots; pick the CLR cycle length (2 * stepsize) so
    /// snapshots land on troughs.
    pub cycle: usize,
}

impl Default for SwaConfig {
    fn default() -> Self {
        SwaConfig { enabled: false, start_epoch: 0, cycle: 1 }
    }
}

impl SwaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.cycle == 0 {
            return Err(Error::Config("swa.cycle must be >= 1".into()));
        }
        Ok(())
    }
}

/// True on the epochs where a weight snapshot should be folded into the
/// average: `swa_start`, then every `cycle_len` epochs after it.
pub fn swa_capture_points(epoch: usize, swa_start: usize, cycle_len: usize) -> bool {
    assert!(cycle_len >= 1, "cycle length must be at least 1");
    epoch >= swa_start && (epoch - swa_start) % cycle_len == 0
}

/// Running mean over flat weight vectors, accumulated in f64.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwaState {
    averaged: Option<Vec<f64>>,
    n_snapshots: u64,
}

impl SwaState {
    pub fn new() -> Self {
        SwaState::default()
    }

    pub fn n_snapshots(&self) -> u64 {
        self.n_snapshots
    }

    pub fn averaged(&self) -> Option<&[f64]> {
        self.averaged.as_deref()
    }

    /// The average rounded back to f32, ready to load into a model.
    pub fn averaged_f32(&self) -> Option<Vec<f32>> {
        self.averaged.as_ref().map(|v| v.iter().map(|&x| x as f32).collect())
    }
}

/// Folds one snapshot into the mean: `avg <- (avg * n + w) / (n + 1)`.
pub fn swa_update(state: &mut SwaState, weights: &[f32]) -> Result<()> {
    match &mut state.averaged {
        None => {
            state.averaged = Some(weights.iter().map(|&w| f64::from(w)).collect());
            state.n_snapshots = 1;
        }
        Some(avg) => {
            if avg.len() != weights.len() {
                return Err(Error::Shape(format!(
                    "snapshot has {} weights, average has {}",
                    weights.len(),
                    avg.len()
                )));
            }
            let n = state.n_snapshots as f64;
            for (a, &w) in avg.iter_mut().zip(weights) {
                *a = (*a * n + f64::from(w)) / (n + 1.0);
            }
            state.n_snapshots += 1;
        }
    }
    Ok(())
}

/// Recomputes the model's running batch statistics under its current
/// (typically just-averaged) weights by passing the dataset through it.
/// Models without such statistics come back unchanged.
pub fn recalibrate_running_stats(model: &mut dyn ClassifierModel, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot recalibrate on an empty dataset".into()));
    }
    let images: Vec<ndarray::Array3<f32>> = dataset.images.iter().map(|i| i.pixels.clone()).collect();
    model.recalibrate(&images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clr_hand_values() {
        let c = ClrConfig::default();
        assert!((clr_value(0.0, &c) - 1e-5).abs() < 1e-18);
        assert!((clr_value(2.0, &c) - 1e-3).abs() < 1e-18);
        assert!((clr_value(1.0, &c) - 5.05e-4).abs() < 1e-12);
        // descent mirrors the ascent, then the next cycle repeats
        assert!((clr_value(3.0, &c) - 5.05e-4).abs() < 1e-12);
        assert!((clr_value(4.0, &c) - 1e-5).abs() < 1e-18);
        assert!((clr_value(6.0, &c) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn clr_is_periodic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for stepsize in [1.0, 2.0, 3.0, 5.5] {
            let c = ClrConfig { stepsize, ..ClrConfig::default() };
            for _ in 0..200 {
                let t = rng.random_range(0.0..60.0);
                let lr = clr_value(t, &c);
                assert!((c.lower..=c.upper).contains(&lr), "t={t}: {lr}");
                let next = clr_value(t + 2.0 * stepsize, &c);
                assert!((lr - next).abs() < 1e-15, "t={t}: {lr} vs {next}");
            }
            // extremes are attained exactly at multiples of the stepsize
            for k in 0..5 {
                assert_eq!(clr_value(2.0 * k as f64 * stepsize, &c), c.lower);
                assert_eq!(clr_value((2.0 * k as f64 + 1.0) * stepsize, &c), c.upper);
            }
        }
    }

    #[test]
    fn clr_rises_linearly_to_the_peak() {
        let c = ClrConfig::default();
        let span = c.upper - c.lower;
        for i in 0..=20 {
            let f = i as f64 / 20.0;
            let lr = clr_value(f * c.stepsize, &c);
            assert!((lr - (c.lower + span * f)).abs() < 1e-15);
        }
    }

    #[test]
    fn clr_config_validation() {
        assert!(ClrConfig::default().validate().is_ok());
        assert!(ClrConfig { lower: 1e-3, upper: 1e-5, ..Default::default() }.validate().is_err());
        assert!(ClrConfig { lower: 0.0, ..Default::default() }.validate().is_err());
        assert!(ClrConfig { stepsize: 0.5, ..Default::default() }.validate().is_err());
        let parsed: ClrConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, ClrConfig::default());
    }

    #[test]
    fn schedule_scaling_drops_both_bounds() {
        let s = LrSchedule::Clr(ClrConfig::default()).scaled(0.1);
        match s {
            LrSchedule::Clr(c) => {
                assert!((c.lower - 1e-6).abs() < 1e-20);
                assert!((c.upper - 1e-4).abs() < 1e-18);
            }
            _ => unreachable!(),
        }
        // scaling commutes with evaluation
        let base = LrSchedule::Clr(ClrConfig::default());
        for t in [0.0, 0.7, 1.9, 3.2] {
            assert!((base.scaled(0.1).value(t) - 0.1 * base.value(t)).abs() < 1e-18);
        }
        assert_eq!(LrSchedule::Constant(0.01).scaled(0.1), LrSchedule::Constant(0.001));
    }

    #[test]
    fn swa_first_and_second_snapshot() {
        let mut state = SwaState::new();
        assert_eq!(state.averaged(), None);
        swa_update(&mut state, &[0.0, 0.0]).unwrap();
        assert_eq!(state.averaged(), Some(&[0.0, 0.0][..]));
        assert_eq!(state.n_snapshots(), 1);
        swa_update(&mut state, &[2.0, 2.0]).unwrap();
        assert_eq!(state.averaged(), Some(&[1.0, 1.0][..]));
        assert_eq!(state.n_snapshots(), 2);

        assert!(swa_update(&mut state, &[1.0]).is_err());
    }

    #[test]
    fn swa_matches_direct_mean_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let snaps: Vec<Vec<f32>> = (0..7)
            .map(|_| (0..40).map(|_| rng.random_range(-2.0f32..2.0)).collect())
            .collect();
        let direct: Vec<f64> = (0..40)
            .map(|i| snaps.iter().map(|s| f64::from(s[i])).sum::<f64>() / snaps.len() as f64)
            .collect();

        let mut forward = SwaState::new();
        for s in &snaps {
            swa_update(&mut forward, s).unwrap();
        }
        let mut backward = SwaState::new();
        for s in snaps.iter().rev() {
            swa_update(&mut backward, s).unwrap();
        }
        for i in 0..40 {
            assert!((forward.averaged().unwrap()[i] - direct[i]).abs() < 1e-10);
            assert!((backward.averaged().unwrap()[i] - direct[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn swa_of_identical_snapshots_is_identity() {
        let w: Vec<f32> = (0..10).map(|i| i as f32 * 0.5 - 2.0).collect();
        let mut state = SwaState::new();
        for _ in 0..5 {
            swa_update(&mut state, &w).unwrap();
        }
        for (a, &b) in state.averaged_f32().unwrap().iter().zip(&w) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn capture_points_follow_the_cadence() {
        assert!(!swa_capture_points(9, 10, 4));
        assert!(swa_capture_points(10, 10, 4));
        assert!(!swa_capture_points(12, 10, 4));
        assert!(swa_capture_points(14, 10, 4));

        // count over E epochs matches the closed form
        for (e_total, start, cycle) in [(30usize, 10usize, 4usize), (20, 15, 1), (50, 0, 7)] {
            let count = (0..e_total).filter(|&e| swa_capture_points(e, start, cycle)).count();
            let expected = if e_total > start { (e_total - 1 - start) / cycle + 1 } else { 0 };
            assert_eq!(count, expected, "E={e_total} start={start} cycle={cycle}");
        }
    }
}
