//! Classifier abstraction, the compound-scaling calculator, and a small
//! residual CNN used for desk-scale experiments. The scaling calculator maps
//! (alpha, beta, gamma, phi) to depth/width/resolution multipliers; the CNN
//! consumes those multipliers with channel counts rounded to multiples of 8.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    self, init, snapshot, BatchNorm2d, Conv2d, GlobalAvgPool, HasParams, Linear, Relu, WeightSnapshot,
};
use crate::{Error, Result};

/// Compound-scaling bases and exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig { alpha: 1.0, beta: 1.0, gamma: 1.0, phi: 0.0 }
    }
}

/// Output of [`compound_scaling`]: the three multipliers plus how far the
/// bases sit from the constant-cost constraint `alpha * beta^2 * gamma^2 = 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingMultipliers {
    pub depth: f64,
    pub width: f64,
    pub resolution: f64,
    pub residual: f64,
    /// Set when the residual exceeds 0.1: scaling with these bases no longer
    /// roughly doubles cost per unit of phi.
    pub warn: bool,
}

/// `d = alpha^phi`, `w = beta^phi`, `r = gamma^phi`.
pub fn compound_scaling(config: &ScalingConfig) -> Result<ScalingMultipliers> {
    let ScalingConfig { alpha, beta, gamma, phi } = *config;
    for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(v >= 1.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
        }
    }
    if !(phi >= 0.0 && phi.is_finite()) {
        return Err(Error::Config(format!("phi must be >= 0, got {phi}")));
    }
    let residual = (alpha * beta * beta * gamma * gamma - 2.0).abs();
    Ok(ScalingMultipliers {
        depth: alpha.powf(phi),
        width: beta.powf(phi),
        resolution: gamma.powf(phi),
        residual,
        warn: residual > 0.1,
    })
}

/// Reference CNN shape before multiplier resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceCnnConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    /// Residual blocks per stage before depth scaling.
    pub base_depth: usize,
    /// Stage 1 channel count before width scaling; stages 2 and 3 double and
    /// quadruple it.
    pub base_width: usize,
    /// Expected input height = width before resolution scaling.
    pub base_resolution: usize,
    pub depth_multiplier: f64,
    pub width_multiplier: f64,
    pub resolution_multiplier: f64,
}

impl Default for ReferenceCnnConfig {
    fn default() -> Self {
        ReferenceCnnConfig {
            input_channels: 10,
            num_classes: 4,
            base_depth: 1,
            base_width: 16,
            base_resolution: 65,
            depth_multiplier: 1.0,
            width_multiplier: 1.0,
            resolution_multiplier: 1.0,
        }
    }
}

/// Channel counts round to the nearest multiple of 8, never below 8.
fn round_width(x: f64) -> usize {
    (((x / 8.0).round() as usize) * 8).max(8)
}

/// Architecture after applying the multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedArch {
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub resolution: usize,
}

impl ReferenceCnnConfig {
    pub fn with_scaling(mut self, multipliers: &ScalingMultipliers) -> Self {
        self.depth_multiplier = multipliers.depth;
        self.width_multiplier = multipliers.width;
        self.resolution_multiplier = multipliers.resolution;
        self
    }

    pub fn resolve(&self) -> Result<ResolvedArch> {
        if self.input_channels == 0 || self.num_classes == 0 || self.base_width == 0 || self.base_depth == 0 {
            return Err(Error::Config("channels, classes, width and depth must be positive".into()));
        }
        for (name, m) in [
            ("depth_multiplier", self.depth_multiplier),
            ("width_multiplier", self.width_multiplier),
            ("resolution_multiplier", self.resolution_multiplier),
        ] {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {m}")));
            }
        }
        let widths = [
            round_width(self.base_width as f64 * self.width_multiplier),
            round_width(self.base_width as f64 * 2.0 * self.width_multiplier),
            round_width(self.base_width as f64 * 4.0 * self.width_multiplier),
        ];
        let blocks_per_stage = ((self.base_depth as f64 * self.depth_multiplier).round() as usize).max(1);
        let resolution = (self.base_resolution as f64 * self.resolution_multiplier).round() as usize;
        if resolution < 8 {
            return Err(Error::Config(format!(
                "scaled resolution {resolution}px is below the 8px minimum"
            )));
        }
        Ok(ResolvedArch { widths, blocks_per_stage, resolution })
    }
}

/// Anything that maps image batches to logits and can have its weights
/// captured and restored as a flat vector. The snapshot/load round trip must
/// reproduce forward outputs bitwise.
pub trait ClassifierModel {
    fn input_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Logit matrix, one row per image. `train` enables batch-statistics
    /// updates and gradient caches.
    fn forward_batch(&mut self, images: &[Array3<f32>], train: bool) -> Result<Array2<f32>>;
    fn snapshot(&mut self) -> WeightSnapshot;
    fn load_snapshot(&mut self, snap: &WeightSnapshot) -> Result<()>;
    /// Recomputes running batch statistics from data; no-op for models
    /// without such state.
    fn recalibrate(&mut self, _images: &[Array3<f32>]) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn stack_images(images: &[Array3<f32>]) -> Result<Array4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {i} has shape {:?}, image 0 has {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

// Short-circuiting BN application used to expose pre-normalization
// activations during recalibration: Err carries the activation out.
type Run<T> = std::result::Result<T, Array4<f32>>;

fn bn_gate(
    bn: &mut BatchNorm2d<f32>,
    x: Array4<f32>,
    train: bool,
    counter: &mut usize,
    stop: Option<usize>,
) -> Run<Array4<f32>> {
    if stop == Some(*counter) {
        return Err(x);
    }
    *counter += 1;
    Ok(bn.forward(&x, train))
}

struct ResidualBlock {
    conv1: Conv2d<f32>,
    bn1: BatchNorm2d<f32>,
    relu1: Relu<f32>,
    conv2: Conv2d<f32>,
    bn2: BatchNorm2d<f32>,
    relu_out: Relu<f32>,
}

impl ResidualBlock {
    fn new(name: &str, width: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), width, width, 3, 1, 1, false),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), width),
            relu1: Relu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), width, width, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), width),
            relu_out: Relu::default(),
        }
    }

    fn run(&mut self, x: &Array4<f32>, train: bool, counter: &mut usize, stop: Option<usize>) -> Run<Array4<f32>> {
        let a = self.conv1.forward(x, train);
        let b = bn_gate(&mut self.bn1, a, train, counter, stop)?;
        let c = self.relu1.forward(&b, train);
        let d = self.conv2.forward(&c, train);
        let e = bn_gate(&mut self.bn2, d, train, counter, stop)?;
        let summed = e + x;
        Ok(self.relu_out.forward(&summed, train))
    }

    fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        // the post-sum gradient reaches both the conv path and the skip
        let g_sum = self.relu_out.backward(gy);
        let g_d = self.bn2.backward(&g_sum);
        let g_c = self.conv2.backward(&g_d);
        let g_b = self.relu1.backward(&g_c);
        let g_a = self.bn1.backward(&g_b);
        let g_main = self.conv1.backward(&g_a);
        g_main + g_sum
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut nn::ParamTensor<f32>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut nn::Buffer<f32>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
}

struct Downsample {
    conv: Conv2d<f32>,
    bn: BatchNorm2d<f32>,
    relu: Relu<f32>,
}

impl Downsample {
    fn new(name: &str, cin: usize, cout: usize) -> Self {
        Downsample {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 2, 1, false),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu: Relu::default(),
        }
    }
}

/// Three-stage residual CNN: stem conv, per-stage residual blocks with
/// stride-2 downsampling between stages, global average pooling, and a
/// linear head. Widths are `[w, 2w, 4w]` after rounding.
pub struct ReferenceCnn {
    pub config: ReferenceCnnConfig,
    arch: ResolvedArch,
    stem_conv: Conv2d<f32>,
    stem_bn: BatchNorm2d<f32>,
    stem_relu: Relu<f32>,
    stages: Vec<Vec<ResidualBlock>>,
    downs: Vec<Downsample>,
    gap: GlobalAvgPool,
    head: Linear<f32>,
}

/// Builds the CNN with He-initialized convolutions and a Xavier head; the
/// random source fixes the weights completely.
pub fn build_reference_cnn(config: &ReferenceCnnConfig, rng: &mut ChaCha8Rng) -> Result<ReferenceCnn> {
    let arch = config.resolve()?;
    let mut stem_conv = Conv2d::new("stem.conv", config.input_channels, arch.widths[0], 3, 1, 1, false);
    init::he_conv(&mut stem_conv.w.value, rng);
    let stem_bn = BatchNorm2d::new("stem.bn", arch.widths[0]);

    let mut stages = Vec::new();
    let mut downs = Vec::new();
    for (si, &width) in arch.widths.iter().enumerate() {
        if si > 0 {
            let mut down = Downsample::new(&format!("down{}", si - 1), arch.widths[si - 1], width);
            init::he_conv(&mut down.conv.w.value, rng);
            downs.push(down);
        }
        let mut blocks = Vec::new();
        for bi in 0..arch.blocks_per_stage {
            let mut block = ResidualBlock::new(&format!("stage{si}.block{bi}"), width);
            init::he_conv(&mut block.conv1.w.value, rng);
            init::he_conv(&mut block.conv2.w.value, rng);
            blocks.push(block);
        }
        stages.push(blocks);
    }

    let mut head = Linear::new("head", arch.widths[2], config.num_classes);
    init::xavier_linear(&mut head.w.value, rng);

    Ok(ReferenceCnn {
        config: config.clone(),
        arch,
        stem_conv,
        stem_bn,
        stem_relu: Relu::default(),
        stages,
        downs,
        gap: GlobalAvgPool::default(),
        head,
    })
}

impl ReferenceCnn {
    pub fn arch(&self) -> ResolvedArch {
        self.arch
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, batch has {c}",
                self.config.input_channels
            )));
        }
        if h != self.arch.resolution || w != self.arch.resolution {
            return Err(Error::Shape(format!(
                "model expects {0}x{0} inputs, batch is {h}x{w}",
                self.arch.resolution
            )));
        }
        Ok(())
    }

    /// Full forward pass, or (with `stop = Some(i)`) the input of the i-th
    /// batch-norm layer in forward order, carried out through `Err`.
    fn run(&mut self, x: &Array4<f32>, train: bool, stop: Option<usize>) -> Run<Array2<f32>> {
        let mut counter = 0usize;
        let stem = self.stem_conv.forward(x, train);
        let stem = bn_gate(&mut self.stem_bn, stem, train, &mut counter, stop)?;
        let mut x = self.stem_relu.forward(&stem, train);
        for si in 0..self.stages.len() {
            if si > 0 {
                let down = &mut self.downs[si - 1];
                let y = down.conv.forward(&x, train);
                let y = bn_gate(&mut down.bn, y, train, &mut counter, stop)?;
                x = down.relu.forward(&y, train);
            }
            for block in &mut self.stages[si] {
                x = block.run(&x, train, &mut counter, stop)?;
            }
        }
        let pooled = self.gap.forward(&x, train);
        Ok(self.head.forward(&pooled, train))
    }

    /// Backpropagates from the logit gradient, accumulating parameter
    /// gradients. Requires the immediately preceding `forward_batch` to have
    /// run with `train = true`.
    pub fn backward_batch(&mut self, grad_logits: &Array2<f32>) {
        let n = grad_logits.nrows();
        let g = self.head.backward(grad_logits);
        let mut g = self.gap.backward(&g, n, self.arch.widths[2]);
        for si in (0..self.stages.len()).rev() {
            for block in self.stages[si].iter_mut().rev() {
                g = block.backward(&g);
            }
            if si > 0 {
                let down = &mut self.downs[si - 1];
                let y = down.relu.backward(&g);
                let y = down.bn.backward(&y);
                g = down.conv.backward(&y);
            }
        }
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        let _ = self.stem_conv.backward(&g);
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    fn bn_count(&self) -> usize {
        // stem + 2 per block + 1 per downsample
        1 + self.stages.iter().map(|s| 2 * s.len()).sum::<usize>() + self.downs.len()
    }
}

impl HasParams<f32> for ReferenceCnn {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut nn::ParamTensor<f32>)) {
        self.stem_conv.visit_params(f);
        self.stem_bn.visit_params(f);
        for si in 0..self.stages.len() {
            if si > 0 {
                let down = &mut self.downs[si - 1];
                down.conv.visit_params(f);
                down.bn.visit_params(f);
            }
            for block in &mut self.stages[si] {
                block.visit_params(f);
            }
        }
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut nn::Buffer<f32>)) {
        self.stem_bn.visit_buffers(f);
        for si in 0..self.stages.len() {
            if si > 0 {
                self.downs[si - 1].bn.visit_buffers(f);
            }
            for block in &mut self.stages[si] {
                block.visit_buffers(f);
            }
        }
    }
}

impl ClassifierModel for ReferenceCnn {
    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn forward_batch(&mut self, images: &[Array3<f32>], train: bool) -> Result<Array2<f32>> {
        let x = stack_images(images)?;
        self.check_input(&x)?;
        Ok(self.run(&x, train, None).expect("no stop requested"))
    }

    fn snapshot(&mut self) -> WeightSnapshot {
        snapshot(self)
    }

    fn load_snapshot(&mut self, snap: &WeightSnapshot) -> Result<()> {
        nn::load_snapshot(self, snap)
    }

    /// Sets every batch-norm layer's running statistics to the exact
    /// population moments of its input, walking the layers in forward order
    /// so earlier layers already use their fresh statistics. Deterministic,
    /// independent of batching, and idempotent.
    fn recalibrate(&mut self, images: &[Array3<f32>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Validation("cannot recalibrate on an empty batch".into()));
        }
        let batches: Vec<Array4<f32>> = images
            .chunks(64)
            .map(stack_images)
            .collect::<Result<_>>()?;
        self.check_input(&batches[0])?;
        for target in 0..self.bn_count() {
            let mut sum: Vec<f64> = Vec::new();
            let mut sumsq: Vec<f64> = Vec::new();
            let mut count = 0u64;
            for batch in &batches {
                let pre = match self.run(batch, false, Some(target)) {
                    Err(pre) => pre,
                    Ok(_) => unreachable!("stop index within bn_count"),
                };
                let (n, c, h, w) = pre.dim();
                if sum.is_empty() {
                    sum = vec![0.0; c];
                    sumsq = vec![0.0; c];
                }
                for ch in 0..c {
                    let plane = pre.index_axis(Axis(1), ch);
                    for &v in plane.iter() {
                        let v = f64::from(v);
                        sum[ch] += v;
                        sumsq[ch] += v * v;
                    }
                }
                count += (n * h * w) as u64;
            }
            let n = count as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let var: Vec<f64> = sumsq
                .iter()
                .zip(&mean)
                .map(|(sq, m)| (sq / n - m * m).max(0.0))
                .collect();
            self.set_bn_stats(target, &mean, &var)?;
        }
        Ok(())
    }
}

impl ReferenceCnn {
    fn set_bn_stats(&mut self, target: usize, mean: &[f64], var: &[f64]) -> Result<()> {
        let mut counter = 0usize;
        let mut result = Ok(());
        let mut apply = |bn: &mut BatchNorm2d<f32>, counter: &mut usize| -> bool {
            if *counter == target {
                result = bn.set_running_stats(mean, var);
                return true;
            }
            *counter += 1;
            false
        };
        if apply(&mut self.stem_bn, &mut counter) {
            return result;
        }
        for si in 0..self.stages.len() {
            if si > 0 && apply(&mut self.downs[si - 1].bn, &mut counter) {
                return result;
            }
            for block in &mut self.stages[si] {
                if apply(&mut block.bn1, &mut counter) || apply(&mut block.bn2, &mut counter) {
                    return result;
                }
            }
        }
        Err(Error::Shape(format!("no batch-norm layer at index {target}")))
    }
}

/// Argmax class per sample, evaluated in fixed-size batches.
pub fn predict(model: &mut dyn ClassifierModel, dataset: &crate::data::Dataset, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    if let Some(img) = dataset.images.first() {
        if img.channels() != model.input_channels() {
            return Err(Error::Shape(format!(
                "model expects {} channels, dataset has {}",
                model.input_channels(),
                img.channels()
            )));
        }
    }
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(batch_size.max(1)) {
        let images: Vec<Array3<f32>> = chunk.iter().map(|i| i.pixels.clone()).collect();
        let logits = model.forward_batch(&images, false)?;
        for row in logits.rows() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

const CHECKPOINT_KIND: &str = "reference_cnn";

/// Writes `manifest_path` (JSON tensor layout + architecture) and a raw
/// little-endian f32 file with the same stem holding the weights.
pub fn save_checkpoint(model: &mut ReferenceCnn, manifest_path: &Path) -> Result<()> {
    let snap = snapshot(model);
    nn::save_checkpoint_as(CHECKPOINT_KIND, &model.config, &snap, manifest_path)
}

/// Rebuilds the architecture from a checkpoint manifest and loads its
/// weights.
pub fn load_checkpoint(manifest_path: &Path) -> Result<ReferenceCnn> {
    let (config, snap): (ReferenceCnnConfig, _) = nn::load_checkpoint_as(CHECKPOINT_KIND, manifest_path)?;
    let mut model = build_reference_cnn(&config, &mut rand::SeedableRng::seed_from_u64(0))?;
    model.load_snapshot(&snap)?;
    Ok(model)
}

/// From the `model.kind` config key. External models implement
/// [`ClassifierModel`] and are trained by embedding callers; the bundled
/// runner only instantiates the reference CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    ReferenceCnn,
    External,
}
