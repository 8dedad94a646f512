//! Re-sampling and re-weighting for skewed class distributions: inverse
//! frequency and effective-number class weights, a weighted with-replacement
//! sampler, and deterministic over/undersampling index builders.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassHistogram;
use crate::{Error, Result};

/// Per-class weights; all non-negative, at least one positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights(vec![1.0; k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!("class weights must be finite and >= 0: {:?}", self.0)));
        }
        if !self.0.iter().any(|&w| w > 0.0) {
            return Err(Error::Validation("at least one class weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample weights; all positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights(pub Vec<f64>);

impl SamplingWeights {
    /// Expands class weights to one weight per sample by label lookup.
    pub fn from_class_weights(labels: &[u8], class_weights: &ClassWeights) -> Result<Self> {
        class_weights.validate()?;
        let w: Vec<f64> = labels
            .iter()
            .map(|&l| {
                class_weights
                    .0
                    .get(usize::from(l))
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("label {l} has no class weight")))
            })
            .collect::<Result<_>>()?;
        Ok(SamplingWeights(w))
    }
}

fn positive_counts(hist: &ClassHistogram) -> Result<()> {
    if let Some(j) = hist.counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {j} has no samples")));
    }
    Ok(())
}

/// `w_j ∝ 1/n_j`, normalized to sum 1.
pub fn inverse_frequency_class_weights(hist: &ClassHistogram) -> Result<ClassWeights> {
    positive_counts(hist)?;
    let raw: Vec<f64> = hist.counts.iter().map(|&n| 1.0 / n as f64).collect();
    let sum: f64 = raw.iter().sum();
    Ok(ClassWeights(raw.into_iter().map(|w| w / sum).collect()))
}

/// `w_j ∝ (1 − β) / (1 − β^{n_j})`, normalized to mean 1 so the overall loss
/// magnitude stays comparable across β. β = 0 collapses to uniform; β close
/// to 1 approaches inverse-frequency proportionality.
pub fn effective_number_class_weights(hist: &ClassHistogram, beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Validation(format!("beta must be in [0, 1), got {beta}")));
    }
    positive_counts(hist)?;
    let raw: Vec<f64> = hist
        .counts
        .iter()
        .map(|&n| {
            if beta == 0.0 {
                1.0
            } else {
                // effective sample count (1 - beta^n) / (1 - beta)
                (1.0 - beta) / (1.0 - beta.powf(n as f64))
            }
        })
        .collect();
    let mean: f64 = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights(raw.into_iter().map(|w| w / mean).collect()))
}

/// Draws `n_draws` dataset indices with replacement, each sample weighted by
/// its class weight. With inverse-frequency weights every class is drawn
/// with expected frequency 1/K regardless of skew.
pub fn weighted_sampler(
    labels: &[u8],
    class_weights: &ClassWeights,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n_draws == 0 {
        return Ok(Vec::new());
    }
    let weights = SamplingWeights::from_class_weights(labels, class_weights)?;
    let dist = WeightedIndex::new(&weights.0)
        .map_err(|e| Error::Validation(format!("sampler weights: {e}")))?;
    Ok((0..n_draws).map(|_| dist.sample(rng)).collect())
}

/// Balances by repetition: every class contributes `max_j n_j` indices, the
/// smaller classes by cycling through their samples in dataset order. The
/// result is deterministic; shuffle it per epoch if order matters.
pub fn oversample_indices(hist: &ClassHistogram, labels: &[u8]) -> Result<Vec<usize>> {
    positive_counts(hist)?;
    check_alignment(hist, labels)?;
    let target = hist.max_count() as usize;
    let mut out = Vec::with_capacity(hist.k() * target);
    for class in 0..hist.k() {
        let members: Vec<usize> = indices_of(labels, class as u8);
        out.extend((0..target).map(|i| members[i % members.len()]));
    }
    Ok(out)
}

/// Balances by rejection: keeps `min_j n_j` indices per class, chosen without
/// replacement, returned in ascending order.
pub fn undersample_indices(
    hist: &ClassHistogram,
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    positive_counts(hist)?;
    check_alignment(hist, labels)?;
    let target = hist.min_count() as usize;
    let mut out = Vec::with_capacity(hist.k() * target);
    for class in 0..hist.k() {
        let mut members: Vec<usize> = indices_of(labels, class as u8);
        members.shuffle(rng);
        out.extend_from_slice(&members[..target]);
    }
    out.sort_unstable();
    Ok(out)
}

fn indices_of(labels: &[u8], class: u8) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|&(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect()
}

fn check_alignment(hist: &ClassHistogram, labels: &[u8]) -> Result<()> {
    let recount = ClassHistogram::from_labels(labels, hist.k())?;
    if &recount != hist {
        return Err(Error::Validation(format!(
            "histogram {:?} does not match labels (recount {:?})",
            hist.counts, recount.counts
        )));
    }
    Ok(())
}

/// Index-selection strategy, from the `sampler` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    None,
    InverseFrequency,
    Oversample,
    Undersample,
}

/// Loss re-weighting strategy, from the `reweight` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightKind {
    #[default]
    None,
    InverseFrequency,
    EffectiveNumber,
}
