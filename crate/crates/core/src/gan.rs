//! Per-class DC-GAN training and synthetic class balancing.
//!
//! One unconditional GAN is trained per under-represented class on
//! band-composed 3-channel crops in [-1, 1]. Filter counts follow the usual
//! DC-GAN ladder: with `base_filters` f and a 64px target, the generator
//! projects the latent vector to 8f x 4 x 4 and halves the channel count at
//! each stride-2 transposed convolution (8f, 4f, 2f, f, then the image
//! channels); the discriminator mirrors it with stride-2 convolutions
//! (f, 2f, 4f, 8f) and a final valid convolution to one logit. Batch norm
//! sits on every interior block, ReLU in the generator, LeakyReLU(0.2) in
//! the discriminator, tanh on the output so samples stay in [-1, 1].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{class_histogram, BandTriple, Dataset, MultiSpectralImage, Provenance};
use crate::nn::{
    self, init, snapshot, Adam, BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, HasParams, LeakyRelu,
    ParamTensor, Relu, Tanh, WeightSnapshot,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Output height = width; must be 4 doubled a whole number of times.
    pub resolution: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub latent_dim: usize,
    pub channels: usize,
    pub batch_size: usize,
    /// Discriminator first-layer width; the ladders above scale from it.
    pub base_filters: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            resolution: 64,
            epochs: 45,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            latent_dim: 100,
            channels: 3,
            batch_size: 64,
            base_filters: 64,
        }
    }
}

impl GanConfig {
    /// Stride-2 stages between 4x4 and the target resolution.
    fn stages(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !(r / 4).is_power_of_two() || r % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution {r} is not 4 * 2^k for k >= 1; the up/downsampling stacks cannot meet it"
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("latent_dim", self.latent_dim),
            ("channels", self.channels),
            ("batch_size", self.batch_size),
            ("base_filters", self.base_filters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

struct UpBlock {
    conv: ConvTranspose2d<f32>,
    bn: BatchNorm2d<f32>,
    relu: Relu<f32>,
}

/// Latent vectors to images in [-1, 1].
pub struct Generator {
    pub config: GanConfig,
    project: ConvTranspose2d<f32>,
    project_bn: BatchNorm2d<f32>,
    project_relu: Relu<f32>,
    ups: Vec<UpBlock>,
    last: ConvTranspose2d<f32>,
    tanh: Tanh<f32>,
}

impl Generator {
    fn new(config: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.stages();
        let c0 = config.base_filters << (k - 1);
        let mut project = ConvTranspose2d::new("g.project", config.latent_dim, c0, 4, 1, 0, false);
        init::normal(&mut project.w.value, 0.02, rng);
        let mut project_bn = BatchNorm2d::new("g.project.bn", c0);
        init::normal_with_mean(&mut project_bn.gamma.value, 1.0, 0.02, rng);

        let mut ups = Vec::new();
        for i in 0..k - 1 {
            let cin = c0 >> i;
            let cout = c0 >> (i + 1);
            let mut conv = ConvTranspose2d::new(&format!("g.up{i}"), cin, cout, 4, 2, 1, false);
            init::normal(&mut conv.w.value, 0.02, rng);
            let mut bn = BatchNorm2d::new(&format!("g.up{i}.bn"), cout);
            init::normal_with_mean(&mut bn.gamma.value, 1.0, 0.02, rng);
            ups.push(UpBlock { conv, bn, relu: Relu::default() });
        }

        let mut last = ConvTranspose2d::new("g.out", config.base_filters, config.channels, 4, 2, 1, false);
        init::normal(&mut last.w.value, 0.02, rng);

        Ok(Generator {
            config: *config,
            project,
            project_bn,
            project_relu: Relu::default(),
            ups,
            last,
            tanh: Tanh::default(),
        })
    }

    fn forward(&mut self, z: &Array2<f32>, train: bool) -> Array4<f32> {
        let (n, d) = z.dim();
        assert_eq!(d, self.config.latent_dim, "latent width mismatch");
        let z4 = z.to_owned().into_shape_with_order((n, d, 1, 1)).expect("standard layout");
        let mut x = self.project.forward(&z4, train);
        x = self.project_bn.forward(&x, train);
        x = self.project_relu.forward(&x, train);
        for up in &mut self.ups {
            x = up.conv.forward(&x, train);
            x = up.bn.forward(&x, train);
            x = up.relu.forward(&x, train);
        }
        let x = self.last.forward(&x, train);
        self.tanh.forward(&x, train)
    }

    fn backward(&mut self, gy: &Array4<f32>) {
        let g = self.tanh.backward(gy);
        let mut g = self.last.backward(&g);
        for up in self.ups.iter_mut().rev() {
            let a = up.relu.backward(&g);
            let b = up.bn.backward(&a);
            g = up.conv.backward(&b);
        }
        let g = self.project_relu.backward(&g);
        let g = self.project_bn.backward(&g);
        let _ = self.project.backward(&g);
    }
}

impl HasParams<f32> for Generator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<f32>)) {
        self.project.visit_params(f);
        self.project_bn.visit_params(f);
        for up in &mut self.ups {
            up.conv.visit_params(f);
            up.bn.visit_params(f);
        }
        self.last.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<f32>)) {
        self.project_bn.visit_buffers(f);
        for up in &mut self.ups {
            up.bn.visit_buffers(f);
        }
    }
}

struct DownBlock {
    conv: Conv2d<f32>,
    bn: BatchNorm2d<f32>,
    act: LeakyRelu<f32>,
}

struct Discriminator {
    first: Conv2d<f32>,
    first_act: LeakyRelu<f32>,
    downs: Vec<DownBlock>,
    last: Conv2d<f32>,
}

impl Discriminator {
    fn new(config: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.stages();
        let f = config.base_filters;
        let mut first = Conv2d::new("d.in", config.channels, f, 4, 2, 1, false);
        init::normal(&mut first.w.value, 0.02, rng);

        let mut downs = Vec::new();
        for i in 0..k - 1 {
            let cin = f << i;
            let cout = f << (i + 1);
            let mut conv = Conv2d::new(&format!("d.down{i}"), cin, cout, 4, 2, 1, false);
            init::normal(&mut conv.w.value, 0.02, rng);
            let mut bn = BatchNorm2d::new(&format!("d.down{i}.bn"), cout);
            init::normal_with_mean(&mut bn.gamma.value, 1.0, 0.02, rng);
            downs.push(DownBlock { conv, bn, act: LeakyRelu::new(0.2) });
        }

        let mut last = Conv2d::new("d.out", f << (k - 1), 1, 4, 1, 0, false);
        init::normal(&mut last.w.value, 0.02, rng);

        Ok(Discriminator { first, first_act: LeakyRelu::new(0.2), downs, last })
    }

    /// One logit per image.
    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Vec<f32> {
        let mut y = self.first.forward(x, train);
        y = self.first_act.forward(&y, train);
        for down in &mut self.downs {
            y = down.conv.forward(&y, train);
            y = down.bn.forward(&y, train);
            y = down.act.forward(&y, train);
        }
        let out = self.last.forward(&y, train);
        debug_assert_eq!((out.dim().1, out.dim().2, out.dim().3), (1, 1, 1));
        out.iter().copied().collect()
    }

    /// Input gradient from per-image logit gradients.
    fn backward(&mut self, grad_logits: &[f32]) -> Array4<f32> {
        let g = Array4::from_shape_vec((grad_logits.len(), 1, 1, 1), grad_logits.to_vec()).expect("shape");
        let mut g = self.last.backward(&g);
        for down in self.downs.iter_mut().rev() {
            let a = down.act.backward(&g);
            let b = down.bn.backward(&a);
            g = down.conv.backward(&b);
        }
        let g = self.first_act.backward(&g);
        self.first.backward(&g)
    }
}

impl HasParams<f32> for Discriminator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<f32>)) {
        self.first.visit_params(f);
        for down in &mut self.downs {
            down.conv.visit_params(f);
            down.bn.visit_params(f);
        }
        self.last.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<f32>)) {
        for down in &mut self.downs {
            down.bn.visit_buffers(f);
        }
    }
}

/// Numerically stable `mean(max(x, 0) - t*x + ln(1 + e^{-|x|}))` with its
/// gradient `(sigmoid(x) - t) / n`.
fn bce_with_logits(logits: &[f32], target: f32) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0f64;
    let grad = logits
        .iter()
        .map(|&x| {
            let xf = f64::from(x);
            loss += xf.max(0.0) - f64::from(target) * xf + (-xf.abs()).exp().ln_1p();
            let sig = 1.0 / (1.0 + (-xf).exp());
            ((sig - f64::from(target)) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanIteration {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Fraction of real images the discriminator scored positive.
    pub d_real_acc: f64,
    /// Fraction of generated images it scored negative.
    pub d_fake_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainLog {
    pub iterations: Vec<GanIteration>,
    pub iterations_per_epoch: usize,
}

impl GanTrainLog {
    /// Mean of (real accuracy + fake accuracy) / 2 over the last epoch; an
    /// equilibrated discriminator sits near 0.5.
    pub fn final_epoch_discriminator_accuracy(&self) -> Option<f64> {
        let last = self.iterations.last()?.epoch;
        let accs: Vec<f64> = self
            .iterations
            .iter()
            .filter(|it| it.epoch == last)
            .map(|it| (it.d_real_acc + it.d_fake_acc) / 2.0)
            .collect();
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        w.write_record(["epoch", "d_loss", "g_loss", "d_real_acc", "d_fake_acc"])
            .map_err(|e| Error::parse(path, e.to_string()))?;
        for it in &self.iterations {
            w.write_record([
                it.epoch.to_string(),
                format!("{:.6}", it.d_loss),
                format!("{:.6}", it.g_loss),
                format!("{:.4}", it.d_real_acc),
                format!("{:.4}", it.d_fake_acc),
            ])
            .map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn standard_latents(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((n, dim), |_| rng.sample::<f32, _>(StandardNormal))
}

fn check_training_images(images: &[Array3<f32>], config: &GanConfig) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Validation("cannot train a GAN on an empty image set".into()));
    }
    let want = (config.channels, config.resolution, config.resolution);
    for (i, img) in images.iter().enumerate() {
        if img.dim() != want {
            return Err(Error::Shape(format!(
                "training image {i} has shape {:?}, expected {want:?}",
                img.dim()
            )));
        }
        for &v in img.iter() {
            if !v.is_finite() || v.abs() > 1.0 + 1e-6 {
                return Err(Error::Validation(format!(
                    "training image {i} holds {v}; values must be finite and within [-1, 1]"
                )));
            }
        }
    }
    Ok(())
}

/// Adversarial training on one class's images. Alternates a discriminator
/// step (real batch scored toward 1, a detached fake batch toward 0) with a
/// generator step (fresh fakes scored toward 1 through the frozen
/// discriminator). Fully determined by `rng`.
pub fn train_dcgan(
    class_images: &[Array3<f32>],
    config: &GanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Generator, GanTrainLog)> {
    config.validate()?;
    check_training_images(class_images, config)?;

    let mut g = Generator::new(config, rng)?;
    let mut d = Discriminator::new(config, rng)?;
    let mut g_opt: Adam<f32> = Adam::new(config.beta1, config.beta2);
    let mut d_opt: Adam<f32> = Adam::new(config.beta1, config.beta2);
    let lr = config.learning_rate;

    let n = class_images.len();
    let b = config.batch_size;
    let iters_per_epoch = n.div_ceil(b);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs * iters_per_epoch);

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for iter in 0..iters_per_epoch {
            // real batch, wrapping so every batch is full
            let mut real = Array4::zeros((b, config.channels, config.resolution, config.resolution));
            for j in 0..b {
                let idx = order[(iter * b + j) % n];
                real.index_axis_mut(Axis(0), j).assign(&class_images[idx]);
            }

            // discriminator step: real toward 1, detached fakes toward 0
            let real_logits = d.forward(&real, true);
            let (loss_real, grad_real) = bce_with_logits(&real_logits, 1.0);
            d.backward(&grad_real);

            let z = standard_latents(b, config.latent_dim, rng);
            let fake = g.forward(&z, true);
            let fake_logits = d.forward(&fake, true);
            let (loss_fake, grad_fake) = bce_with_logits(&fake_logits, 0.0);
            d.backward(&grad_fake);
            d_opt.step(&mut d, lr);
            let d_loss = loss_real + loss_fake;

            // generator step: fresh fakes pushed toward the real label
            let z = standard_latents(b, config.latent_dim, rng);
            let fake = g.forward(&z, true);
            let gen_logits = d.forward(&fake, true);
            let (g_loss, grad_gen) = bce_with_logits(&gen_logits, 1.0);
            let gx = d.backward(&grad_gen);
            g.backward(&gx);
            g_opt.step(&mut g, lr);
            // the generator step backpropagated through the discriminator;
            // discard those gradients so the next step starts clean
            d.zero_grads();

            if !d_loss.is_finite() || !g_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "GAN training diverged at epoch {epoch} iteration {iter}: \
                     discriminator loss {d_loss}, generator loss {g_loss}"
                )));
            }

            let frac = |hits: usize| hits as f64 / b as f64;
            log.push(GanIteration {
                epoch,
                d_loss,
                g_loss,
                d_real_acc: frac(real_logits.iter().filter(|&&x| x > 0.0).count()),
                d_fake_acc: frac(fake_logits.iter().filter(|&&x| x <= 0.0).count()),
            });
        }
    }

    Ok((g, GanTrainLog { iterations: log, iterations_per_epoch: iters_per_epoch }))
}

/// Draws `n` images from the generator; output values are tanh-bounded in
/// [-1, 1]. Batched internally, same result for any batch size.
pub fn generate_samples(generator: &mut Generator, n: usize, rng: &mut ChaCha8Rng) -> Vec<Array3<f32>> {
    let config = generator.config;
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(config.batch_size);
        let z = standard_latents(take, config.latent_dim, rng);
        let batch = generator.forward(&z, false);
        for i in 0..take {
            out.push(batch.index_axis(Axis(0), i).to_owned());
        }
        remaining -= take;
    }
    out
}

/// Zero-pads on the bottom/right up to `(h, w)`, undoing the center crop
/// used before GAN training.
pub fn pad_bottom_right(image: &Array3<f32>, h: usize, w: usize) -> Result<Array3<f32>> {
    let (c, ih, iw) = image.dim();
    if ih > h || iw > w {
        return Err(Error::Shape(format!("cannot pad {ih}x{iw} down to {h}x{w}")));
    }
    let mut out = Array3::zeros((c, h, w));
    out.slice_mut(ndarray::s![.., ..ih, ..iw]).assign(image);
    Ok(out)
}

/// Crops the centered `size` x `size` window (even overhang splits toward
/// the top-left).
pub fn center_crop(image: &Array3<f32>, size: usize) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    if h < size || w < size {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {size}x{size}")));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    Ok(image.slice(ndarray::s![.., oy..oy + size, ox..ox + size]).to_owned())
}

/// Affine map of the image's own [min, max] onto [-1, 1]; constant images
/// become all zeros.
pub fn rescale_unit(image: &Array3<f32>) -> Array3<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in image.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !range.is_normal() {
        return Array3::zeros(image.dim());
    }
    // (v - lo) / range lands in [0, 1] with exact endpoints, so the output
    // cannot escape [-1, 1] even after rounding
    image.mapv(|v| 2.0 * ((v - lo) / range) - 1.0)
}

/// Band-composes, center-crops, and rescales every image of `class_label`,
/// yielding GAN-ready training crops.
pub fn prepare_class_images(
    dataset: &Dataset,
    class_label: u8,
    triple: &BandTriple,
    resolution: usize,
) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::new();
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        if label != class_label {
            continue;
        }
        let composed = crate::data::compose_bands(img, triple)?;
        let cropped = center_crop(&composed.pixels, resolution)?;
        out.push(rescale_unit(&cropped));
    }
    Ok(out)
}

/// Appends generated samples until every class holds exactly
/// `target_per_class` images. Real images pass through untouched; classes
/// already above target are an error unless `truncate_majority` keeps their
/// first `target_per_class` occurrences and drops the rest.
pub fn balance_with_gan(
    dataset: &Dataset,
    generators: &mut BTreeMap<u8, Generator>,
    target_per_class: usize,
    truncate_majority: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let hist = class_histogram(dataset)?;
    if hist.max_count() > target_per_class as u64 && !truncate_majority {
        return Err(Error::Validation(format!(
            "a class holds {} images, above the target {target_per_class}; \
             enable majority truncation to shrink it",
            hist.max_count()
        )));
    }
    for (j, &count) in hist.counts.iter().enumerate() {
        if count < target_per_class as u64 && !generators.contains_key(&(j as u8)) {
            return Err(Error::Validation(format!(
                "class {j} holds {count} images, below the target {target_per_class}, \
                 and no generator was supplied for it"
            )));
        }
    }

    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::Validation("cannot balance an empty dataset".into()))?;
    let (c, h, w) = first.pixels.dim();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    let mut kept = vec![0usize; dataset.k];
    for ((img, &label), &prov) in dataset.images.iter().zip(&dataset.labels).zip(&dataset.provenance) {
        if kept[label as usize] == target_per_class {
            continue;
        }
        kept[label as usize] += 1;
        images.push(img.clone());
        labels.push(label);
        provenance.push(prov);
    }

    for j in 0..dataset.k {
        let deficit = target_per_class - kept[j];
        if deficit == 0 {
            continue;
        }
        let gen = generators.get_mut(&(j as u8)).expect("checked above");
        if gen.config.channels != c {
            return Err(Error::Shape(format!(
                "class {j} generator emits {} channels but the dataset holds {c}",
                gen.config.channels
            )));
        }
        for sample in generate_samples(gen, deficit, rng) {
            let padded = pad_bottom_right(&sample, h, w)?;
            images.push(MultiSpectralImage { pixels: padded, band_ids: first.band_ids.clone() });
            labels.push(j as u8);
            provenance.push(Provenance::GanSynthetic);
        }
    }

    Dataset::new(images, labels, dataset.k, dataset.split, provenance)
}

/// [-1, 1] to [0, 255] with exact endpoints.
fn unit_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Tiles `rows` x `cols` fresh samples into one PNG(`path`), mapping -1 to 0
/// and +1 to 255.
pub fn export_sample_grid(
    generator: &mut Generator,
    rows: usize,
    cols: usize,
    path: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Validation("sample grid needs at least one row and column".into()));
    }
    if generator.config.channels != 3 {
        return Err(Error::Validation(format!(
            "sample grids render RGB; the generator emits {} channels",
            generator.config.channels
        )));
    }
    let res = generator.config.resolution;
    let samples = generate_samples(generator, rows * cols, rng);
    let mut canvas = image::RgbImage::new((cols * res) as u32, (rows * res) as u32);
    for (idx, sample) in samples.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        for y in 0..res {
            for x in 0..res {
                let px = image::Rgb([
                    unit_to_u8(sample[[0, y, x]]),
                    unit_to_u8(sample[[1, y, x]]),
                    unit_to_u8(sample[[2, y, x]]),
                ]);
                canvas.put_pixel((c * res + x) as u32, (r * res + y) as u32, px);
            }
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::parse(path, e.to_string()))
}

const GENERATOR_KIND: &str = "dcgan_generator";

pub fn save_generator(generator: &mut Generator, manifest_path: &Path) -> Result<()> {
    let snap = snapshot(generator);
    nn::save_checkpoint_as(GENERATOR_KIND, &generator.config, &snap, manifest_path)
}

pub fn load_generator(manifest_path: &Path) -> Result<Generator> {
    let (config, snap): (GanConfig, WeightSnapshot) = nn::load_checkpoint_as(GENERATOR_KIND, manifest_path)?;
    let mut generator = Generator::new(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    nn::load_snapshot(&mut generator, &snap)?;
    Ok(generator)
}
