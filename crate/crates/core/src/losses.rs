//! Classification losses: stabilized cross-entropy, the label-distribution
//! aware margin (LDAM) loss, and deferred re-weighting (DRW), which trains
//! stage 1 with uniform weights and switches to class-balanced weights at a
//! configured epoch. All loss math runs in f64.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ClassHistogram;
use crate::sampling::{effective_number_class_weights, inverse_frequency_class_weights, ClassWeights};
use crate::{Error, Result};

/// Per-class margins Δ_j. [`ldam_margins`] produces strictly positive values
/// with the largest margin on the rarest class; zero margins are legal as an
/// explicit off switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginVector(pub Vec<f64>);

impl MarginVector {
    pub fn zeros(k: usize) -> Self {
        MarginVector(vec![0.0; k])
    }
}

/// LDAM margin shape: Δ_j = C / n_j^{1/4} with C set so the largest margin
/// equals `max_margin`; logits are multiplied by `scale_s` after the margin
/// is subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdamConfig {
    pub max_margin: f64,
    pub scale_s: f64,
}

impl Default for LdamConfig {
    fn default() -> Self {
        LdamConfig { max_margin: 0.5, scale_s: 30.0 }
    }
}

/// Deferred re-weighting switch: epochs before `start_epoch` train with
/// uniform class weights, later epochs with effective-number weights at
/// `beta` (or plain inverse-frequency weights when `inverse_frequency` is
/// set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrwConfig {
    pub start_epoch: usize,
    pub beta: f64,
    pub inverse_frequency: bool,
}

impl Default for DrwConfig {
    fn default() -> Self {
        DrwConfig { start_epoch: 0, beta: 0.9999, inverse_frequency: false }
    }
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(())
}

fn weight_for(class_weights: Option<&ClassWeights>, label: usize, k: usize) -> Result<f64> {
    match class_weights {
        None => Ok(1.0),
        Some(w) => {
            if w.0.len() != k {
                return Err(Error::Validation(format!(
                    "{} class weights for {k} classes",
                    w.0.len()
                )));
            }
            Ok(w.0[label])
        }
    }
}

/// log(sum exp z) computed against the running maximum.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `-w_y * log softmax(z)_y`.
pub fn cross_entropy(logits: &[f64], label: usize, class_weights: Option<&ClassWeights>) -> Result<f64> {
    check_logits(logits, label)?;
    let w = weight_for(class_weights, label, logits.len())?;
    Ok(w * (log_sum_exp(logits) - logits[label]))
}

/// Loss and its gradient w.r.t. the logits: `w_y * (softmax(z) - onehot_y)`.
pub fn cross_entropy_with_grad(
    logits: &[f64],
    label: usize,
    class_weights: Option<&ClassWeights>,
) -> Result<(f64, Vec<f64>)> {
    check_logits(logits, label)?;
    let w = weight_for(class_weights, label, logits.len())?;
    let lse = log_sum_exp(logits);
    let loss = w * (lse - logits[label]);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, z)| w * ((z - lse).exp() - f64::from(u8::from(j == label))))
        .collect();
    Ok((loss, grad))
}

/// Δ_j = C / n_j^{1/4}, C chosen so the rarest class gets `max_margin`.
pub fn ldam_margins(hist: &ClassHistogram, config: &LdamConfig) -> Result<MarginVector> {
    if config.max_margin <= 0.0 || !config.max_margin.is_finite() {
        return Err(Error::Validation(format!("max_margin must be positive, got {}", config.max_margin)));
    }
    if let Some(j) = hist.counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {j} has no samples, margin undefined")));
    }
    let c = config.max_margin * (hist.min_count() as f64).powf(0.25);
    Ok(MarginVector(
        hist.counts
            .iter()
            .map(|&n| c / (n as f64).powf(0.25))
            .collect(),
    ))
}

fn margined(logits: &[f64], label: usize, margins: &MarginVector, s: f64) -> Result<Vec<f64>> {
    if margins.0.len() != logits.len() {
        return Err(Error::Validation(format!(
            "{} margins for {} logits",
            margins.0.len(),
            logits.len()
        )));
    }
    if s <= 0.0 || !s.is_finite() {
        return Err(Error::Validation(format!("scale must be positive, got {s}")));
    }
    let mut z: Vec<f64> = logits.to_vec();
    z[label] -= margins.0[label];
    for v in &mut z {
        *v *= s;
    }
    Ok(z)
}

/// Cross-entropy after subtracting the true-class margin and scaling every
/// logit by `s`. The margin makes the true class work harder, pushing its
/// decision boundary outward; minority classes get the bigger push.
pub fn ldam_loss(
    logits: &[f64],
    label: usize,
    margins: &MarginVector,
    s: f64,
    class_weights: Option<&ClassWeights>,
) -> Result<f64> {
    check_logits(logits, label)?;
    cross_entropy(&margined(logits, label, margins, s)?, label, class_weights)
}

/// Loss and gradient w.r.t. the original logits (chain rule includes `s`).
pub fn ldam_loss_with_grad(
    logits: &[f64],
    label: usize,
    margins: &MarginVector,
    s: f64,
    class_weights: Option<&ClassWeights>,
) -> Result<(f64, Vec<f64>)> {
    check_logits(logits, label)?;
    let (loss, mut grad) = cross_entropy_with_grad(&margined(logits, label, margins, s)?, label, class_weights)?;
    for g in &mut grad {
        *g *= s;
    }
    Ok((loss, grad))
}

/// Stage-dependent class weights for deferred re-weighting.
pub fn drw_class_weights(epoch: usize, config: &DrwConfig, hist: &ClassHistogram) -> Result<ClassWeights> {
    if epoch < config.start_epoch {
        return Ok(ClassWeights::uniform(hist.k()));
    }
    if config.inverse_frequency {
        inverse_frequency_class_weights(hist)
    } else {
        effective_number_class_weights(hist, config.beta)
    }
}

/// How to score a batch, from the `loss` config key plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLoss {
    CrossEntropy { class_weights: Option<ClassWeights> },
    Ldam { margins: MarginVector, scale_s: f64, class_weights: Option<ClassWeights> },
}

impl BatchLoss {
    fn class_weights(&self) -> Option<&ClassWeights> {
        match self {
            BatchLoss::CrossEntropy { class_weights } => class_weights.as_ref(),
            BatchLoss::Ldam { class_weights, .. } => class_weights.as_ref(),
        }
    }

    fn sample_with_grad(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        // unweighted per-sample loss; batch_loss applies weights in the mean
        match self {
            BatchLoss::CrossEntropy { .. } => cross_entropy_with_grad(logits, label, None),
            BatchLoss::Ldam { margins, scale_s, .. } => {
                ldam_loss_with_grad(logits, label, margins, *scale_s, None)
            }
        }
    }
}

/// Mean loss over a batch: plain mean without class weights, otherwise the
/// weighted mean `sum(w_y * loss) / sum(w_y)` so the weight scale cancels.
pub fn batch_loss(logits: &Array2<f64>, labels: &[u8], spec: &BatchLoss) -> Result<f64> {
    batch_loss_with_grad(logits, labels, spec).map(|(loss, _)| loss)
}

/// [`batch_loss`] plus the gradient w.r.t. every logit.
pub fn batch_loss_with_grad(
    logits: &Array2<f64>,
    labels: &[u8],
    spec: &BatchLoss,
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    let k = logits.ncols();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Validation(format!("{n} logit rows vs {} labels", labels.len())));
    }

    let mut weight_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut grad = Array2::zeros((n, k));
    let row_buf: &mut Vec<f64> = &mut Vec::with_capacity(k);
    for (i, &label) in labels.iter().enumerate() {
        let label = usize::from(label);
        row_buf.clear();
        row_buf.extend(logits.row(i).iter());
        let w = weight_for(spec.class_weights(), label, k)?;
        let (loss, g) = self::BatchLoss::sample_with_grad(spec, row_buf, label)?;
        loss_sum += w * loss;
        weight_sum += w;
        for (j, gj) in g.into_iter().enumerate() {
            grad[[i, j]] = w * gj;
        }
    }
    if weight_sum <= 0.0 {
        return Err(Error::Validation("batch class weights sum to zero".into()));
    }
    grad.mapv_inplace(|g| g / weight_sum);
    Ok((loss_sum / weight_sum, grad))
}

/// From the `loss` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Ldam,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn hist(counts: &[u64]) -> ClassHistogram {
        ClassHistogram { counts: counts.to_vec() }
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let l = cross_entropy(&[0.0, 0.0], 0, None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // extreme logits must not overflow
        let l = cross_entropy(&[1000.0, 0.0], 0, None).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12, "{l}");
        let l = cross_entropy(&[0.0, 1000.0], 0, None).unwrap();
        assert!((l - 1000.0).abs() < 1e-9, "{l}");

        assert!(cross_entropy(&[0.0, 0.0], 2, None).is_err());
        assert!(cross_entropy(&[f64::NAN, 0.0], 0, None).is_err());
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let k = rng.random_range(2..8usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
            let label = rng.random_range(0..k);
            let naive = -((logits[label].exp()) / logits.iter().map(|z| z.exp()).sum::<f64>()).ln();
            let l = cross_entropy(&logits, label, None).unwrap();
            assert!((l - naive).abs() < 1e-10, "{l} vs {naive}");
        }
    }

    #[test]
    fn class_weight_scales_loss_exactly() {
        let w = ClassWeights(vec![0.3, 2.0]);
        let unweighted = cross_entropy(&[0.4, -0.2], 1, None).unwrap();
        let weighted = cross_entropy(&[0.4, -0.2], 1, Some(&w)).unwrap();
        assert!((weighted - 2.0 * unweighted).abs() < 1e-15);
    }

    #[test]
    fn ldam_margins_hand_cases() {
        let config = LdamConfig::default();
        let m = ldam_margins(&hist(&[10, 10]), &config).unwrap();
        assert_eq!(m.0, vec![0.5, 0.5]);

        let m = ldam_margins(&hist(&[100, 10]), &config).unwrap();
        assert!((m.0[0] - 0.2812).abs() < 1e-3, "{}", m.0[0]);
        assert!((m.0[1] - 0.5).abs() < 1e-12);

        // margins depend only on count ratios
        let scaled = ldam_margins(&hist(&[1600, 160]), &config).unwrap();
        for (a, b) in m.0.iter().zip(&scaled.0) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(ldam_margins(&hist(&[0, 5]), &config).is_err());
    }

    #[test]
    fn ldam_margins_order_rarest_largest() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = LdamConfig::default();
        for _ in 0..50 {
            let counts: Vec<u64> = (0..5).map(|_| rng.random_range(1..100_000u64)).collect();
            let m = ldam_margins(&hist(&counts), &config).unwrap();
            let max = m.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((max - config.max_margin).abs() < 1e-12);
            for i in 0..5 {
                for j in 0..5 {
                    if counts[i] < counts[j] {
                        assert!(m.0[i] > m.0[j], "{counts:?} -> {:?}", m.0);
                    }
                }
            }
            assert!(m.0.iter().all(|d| d.is_finite() && *d > 0.0));
        }
    }

    #[test]
    fn ldam_hand_case_and_zero_margin_equivalence() {
        let margins = MarginVector(vec![0.5, 0.5]);
        let l = ldam_loss(&[0.0, 0.0], 0, &margins, 1.0, None).unwrap();
        // -log(e^{-1/2} / (e^{-1/2} + 1))
        assert!((l - 0.974076984180107).abs() < 1e-12, "{l}");

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let k = rng.random_range(2..6usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..k);
            let zero = ldam_loss(&logits, label, &MarginVector::zeros(k), 1.0, None).unwrap();
            let ce = cross_entropy(&logits, label, None).unwrap();
            assert!((zero - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_never_decreases_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let k = rng.random_range(2..6usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let label = rng.random_range(0..k);
            let margins = MarginVector((0..k).map(|_| rng.random_range(0.05..0.9)).collect());
            let s = [1.0, 7.0, 30.0][rng.random_range(0..3usize)];
            let with = ldam_loss(&logits, label, &margins, s, None).unwrap();
            let without = ldam_loss(&logits, label, &MarginVector::zeros(k), s, None).unwrap();
            assert!(with >= without - 1e-12, "{with} < {without}");
        }
    }

    #[test]
    fn losses_stay_finite_at_large_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let k = rng.random_range(2..5usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1e4..1e4)).collect();
            let label = rng.random_range(0..k);
            let margins = MarginVector(vec![0.5; k]);
            for loss in [
                cross_entropy(&logits, label, None).unwrap(),
                ldam_loss(&logits, label, &margins, 30.0, None).unwrap(),
            ] {
                assert!(loss.is_finite() && loss >= 0.0, "{loss}");
            }
        }
    }

    #[test]
    fn drw_switches_weights_at_start_epoch() {
        let h = hist(&[600, 150, 150, 100]);
        let config = DrwConfig { start_epoch: 10, ..DrwConfig::default() };
        for epoch in 0..10 {
            assert_eq!(drw_class_weights(epoch, &config, &h).unwrap(), ClassWeights::uniform(4));
        }
        let stage2 = drw_class_weights(10, &config, &h).unwrap();
        assert_eq!(stage2, effective_number_class_weights(&h, config.beta).unwrap());
        let argmax = (0..4).max_by(|&a, &b| stage2.0[a].partial_cmp(&stage2.0[b]).unwrap());
        assert_eq!(argmax, Some(3), "{:?}", stage2.0);
        // constant within each stage
        assert_eq!(drw_class_weights(11, &config, &h).unwrap(), stage2);
        assert_eq!(drw_class_weights(99, &config, &h).unwrap(), stage2);

        let inv = DrwConfig { inverse_frequency: true, ..config };
        assert_eq!(
            drw_class_weights(10, &inv, &h).unwrap(),
            inverse_frequency_class_weights(&h).unwrap()
        );
    }

    #[test]
    fn batch_loss_matches_per_sample_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let n = rng.random_range(1..9usize);
            let k = rng.random_range(2..5usize);
            let logits = Array2::from_shape_fn((n, k), |_| rng.random_range(-3.0..3.0));
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let weights = ClassWeights((0..k).map(|_| rng.random_range(0.2..3.0)).collect());
            let margins = MarginVector((0..k).map(|_| rng.random_range(0.05..0.6)).collect());
            let spec = BatchLoss::Ldam {
                margins: margins.clone(),
                scale_s: 7.0,
                class_weights: Some(weights.clone()),
            };
            let got = batch_loss(&logits, &labels, &spec).unwrap();

            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let row: Vec<f64> = logits.row(i).to_vec();
                let label = usize::from(labels[i]);
                let l = ldam_loss(&row, label, &margins, 7.0, None).unwrap();
                num += weights.0[label] * l;
                den += weights.0[label];
            }
            assert!((got - num / den).abs() < 1e-10, "{got} vs {}", num / den);
        }
    }

    #[test]
    fn batch_loss_edge_cases() {
        let logits = Array2::from_shape_vec((1, 2), vec![0.3, -0.3]).unwrap();
        let spec = BatchLoss::CrossEntropy { class_weights: None };
        let single = batch_loss(&logits, &[1], &spec).unwrap();
        assert!((single - cross_entropy(&[0.3, -0.3], 1, None).unwrap()).abs() < 1e-15);

        // duplicating a sample leaves the mean unchanged
        let doubled = Array2::from_shape_vec((2, 2), vec![0.3, -0.3, 0.3, -0.3]).unwrap();
        assert!((batch_loss(&doubled, &[1, 1], &spec).unwrap() - single).abs() < 1e-15);

        let empty = Array2::<f64>::zeros((0, 2));
        assert!(batch_loss(&empty, &[], &spec).is_err());
        assert!(batch_loss(&logits, &[1, 0], &spec).is_err());
    }

    fn numeric_grad(logits: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut z = logits.to_vec();
        (0..logits.len())
            .map(|j| {
                z[j] = logits[j] + h;
                let up = f(&z);
                z[j] = logits[j] - h;
                let down = f(&z);
                z[j] = logits[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ldam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..120 {
            let k = rng.random_range(2..7usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..k);
            let margins = MarginVector((0..k).map(|_| rng.random_range(0.05..0.9)).collect());
            let s = [1.0, 7.0, 30.0][trial % 3];
            let weights = if trial % 2 == 0 {
                Some(ClassWeights((0..k).map(|_| rng.random_range(0.2..3.0)).collect()))
            } else {
                None
            };

            let (_, analytic) =
                ldam_loss_with_grad(&logits, label, &margins, s, weights.as_ref()).unwrap();
            let numeric = numeric_grad(&logits, |z| {
                ldam_loss(z, label, &margins, s, weights.as_ref()).unwrap()
            });
            // saturated draws (s = 30, one dominant logit) have true gradients
            // below f64 resolution; the floor keeps those vacuously consistent
            let scale = numeric
                .iter()
                .chain(&analytic)
                .fold(1e-6f64, |a, g| a.max(g.abs()));
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() / scale < 1e-4, "trial {trial}: {a} vs {n} (scale {scale})");
            }
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..5usize);
            let k = rng.random_range(2..5usize);
            let logits = Array2::from_shape_fn((n, k), |_| rng.random_range(-3.0..3.0));
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let weights = ClassWeights((0..k).map(|_| rng.random_range(0.2..3.0)).collect());
            let spec = BatchLoss::Ldam {
                margins: MarginVector((0..k).map(|_| rng.random_range(0.05..0.6)).collect()),
                scale_s: 30.0,
                class_weights: Some(weights),
            };
            let (_, analytic) = batch_loss_with_grad(&logits, &labels, &spec).unwrap();

            let h = 1e-5;
            let mut z = logits.clone();
            let mut worst = 0.0f64;
            let mut scale = 1e-8f64;
            for i in 0..n {
                for j in 0..k {
                    let orig = z[[i, j]];
                    z[[i, j]] = orig + h;
                    let up = batch_loss(&z, &labels, &spec).unwrap();
                    z[[i, j]] = orig - h;
                    let down = batch_loss(&z, &labels, &spec).unwrap();
                    z[[i, j]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    worst = worst.max((analytic[[i, j]] - numeric).abs());
                    scale = scale.max(numeric.abs());
                }
            }
            assert!(worst / scale < 1e-4, "{worst} vs scale {scale}");
        }
    }

    #[test]
    fn loss_kind_parses_config_spellings() {
        #[derive(Deserialize)]
        struct Keys {
            loss: LossKind,
        }
        assert_eq!(toml::from_str::<Keys>("loss = \"ldam\"").unwrap().loss, LossKind::Ldam);
        assert_eq!(
            toml::from_str::<Keys>("loss = \"cross_entropy\"").unwrap().loss,
            LossKind::CrossEntropy
        );
        assert!(toml::from_str::<Keys>("loss = \"focal\"").is_err());
    }
}
