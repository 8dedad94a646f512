//! Dataset representation and plumbing: multi-band images, class histograms,
//! band-triple composition, normalization, flip/rotation augmentation, a
//! procedural imbalanced dataset generator, and a raw-tensor on-disk format
//! with a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::parallel;
use crate::{Error, Result};

/// One sample: `pixels` is channel-major (C, H, W), one band id per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectralImage {
    pub pixels: Array3<f32>,
    pub band_ids: Arc<[String]>,
}

impl MultiSpectralImage {
    pub fn new(pixels: Array3<f32>, band_ids: Arc<[String]>) -> Result<Self> {
        if pixels.shape()[0] != band_ids.len() {
            return Err(Error::Shape(format!(
                "{} channels but {} band ids",
                pixels.shape()[0],
                band_ids.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        Ok(MultiSpectralImage { pixels, band_ids })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Where a sample came from. Stored per sample so synthetic balancing can be
/// audited after the fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    GanSynthetic,
}

impl Provenance {
    pub fn to_u8(self) -> u8 {
        match self {
            Provenance::Real => 0,
            Provenance::GanSynthetic => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Provenance::Real),
            1 => Ok(Provenance::GanSynthetic),
            other => Err(Error::Validation(format!("unknown provenance tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Validation(format!(
                "unknown split {other:?} (expected \"train\" or \"validation\")"
            ))),
        }
    }
}

/// A labelled split. All images share one band list and one spatial shape;
/// `labels[i] < k` and `provenance[i]` describe `images[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<MultiSpectralImage>,
    pub labels: Vec<u8>,
    pub k: usize,
    pub split: Split,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(
        images: Vec<MultiSpectralImage>,
        labels: Vec<u8>,
        k: usize,
        split: Split,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != provenance.len() {
            return Err(Error::Validation(format!(
                "{} images, {} labels, {} provenance tags",
                images.len(),
                labels.len(),
                provenance.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|&(_, &l)| usize::from(l) >= k) {
            return Err(Error::Validation(format!("sample {i}: label {l} out of range for K = {k}")));
        }
        if let Some(first) = images.first() {
            let shape = first.pixels.shape();
            for (i, img) in images.iter().enumerate() {
                if img.pixels.shape() != shape {
                    return Err(Error::Shape(format!(
                        "sample {i} has shape {:?}, sample 0 has {:?}",
                        img.pixels.shape(),
                        shape
                    )));
                }
                if img.band_ids != first.band_ids {
                    return Err(Error::Validation(format!("sample {i} has different band ids")));
                }
            }
        }
        Ok(Dataset { images, labels, k, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn band_ids(&self) -> Option<&Arc<[String]>> {
        self.images.first().map(|img| &img.band_ids)
    }
}

/// Per-class sample counts `n_j`, indices aligned with labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn from_labels(labels: &[u8], k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("empty dataset has no histogram".into()));
        }
        let mut counts = vec![0u64; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = usize::from(l);
            if l >= k {
                return Err(Error::Validation(format!("sample {i}: label {l} out of range for K = {k}")));
            }
            counts[l] += 1;
        }
        Ok(ClassHistogram { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min_count(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }
}

pub fn class_histogram(dataset: &Dataset) -> Result<ClassHistogram> {
    ClassHistogram::from_labels(&dataset.labels, dataset.k)
}

/// Three band identifiers in display order (e.g. B6, B5, B2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandTriple(pub [String; 3]);

impl BandTriple {
    pub fn new(a: &str, b: &str, c: &str) -> Self {
        BandTriple([a.to_string(), b.to_string(), c.to_string()])
    }

    /// Parses a comma-separated triple such as `"B6,B5,B2"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "band triple {s:?} must be three comma-separated identifiers"
            )));
        }
        Ok(BandTriple::new(parts[0], parts[1], parts[2]))
    }
}

impl std::fmt::Display for BandTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Selects three channels by band identifier, in triple order. Pixel values
/// are copied unchanged.
pub fn compose_bands(image: &MultiSpectralImage, triple: &BandTriple) -> Result<MultiSpectralImage> {
    let indices: Vec<usize> = triple
        .0
        .iter()
        .map(|wanted| {
            image
                .band_ids
                .iter()
                .position(|b| b == wanted)
                .ok_or_else(|| Error::UnknownBand {
                    wanted: wanted.clone(),
                    available: image.band_ids.to_vec(),
                })
        })
        .collect::<Result<_>>()?;
    let (h, w) = (image.height(), image.width());
    let mut pixels = Array3::zeros((3, h, w));
    for (out_c, &in_c) in indices.iter().enumerate() {
        pixels
            .index_axis_mut(ndarray::Axis(0), out_c)
            .assign(&image.pixels.index_axis(ndarray::Axis(0), in_c));
    }
    Ok(MultiSpectralImage { pixels, band_ids: Arc::from(triple.0.clone()) })
}

/// [`compose_bands`] over a whole split; labels and provenance carry over.
pub fn compose_dataset(dataset: &Dataset, triple: &BandTriple) -> Result<Dataset> {
    let images = dataset
        .images
        .iter()
        .map(|img| compose_bands(img, triple))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, dataset.labels.clone(), dataset.k, dataset.split, dataset.provenance.clone())
}

/// Per-band mean and standard deviation, usually computed on the training
/// split and reused for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub band_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population statistics over every pixel of every image, accumulated in
    /// f64. Chunk partial sums are merged in fixed chunk order, so the result
    /// does not depend on thread count.
    pub fn compute(dataset: &Dataset) -> Result<Self> {
        let band_ids = dataset
            .band_ids()
            .ok_or_else(|| Error::Validation("cannot compute stats of an empty dataset".into()))?
            .to_vec();
        let c = band_ids.len();
        let partials = parallel::map_chunks(&dataset.images, |_, imgs| {
            let mut sum = vec![0f64; c];
            let mut sumsq = vec![0f64; c];
            let mut n = 0u64;
            for img in imgs {
                for (ch, plane) in img.pixels.outer_iter().enumerate() {
                    for &v in plane.iter() {
                        let v = f64::from(v);
                        sum[ch] += v;
                        sumsq[ch] += v * v;
                    }
                }
                n += (img.height() * img.width()) as u64;
            }
            (sum, sumsq, n)
        });
        let mut sum = vec![0f64; c];
        let mut sumsq = vec![0f64; c];
        let mut n = 0u64;
        for (s, sq, pn) in partials {
            for ch in 0..c {
                sum[ch] += s[ch];
                sumsq[ch] += sq[ch];
            }
            n += pn;
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        for (ch, s) in std.iter().enumerate() {
            if *s < 1e-12 {
                return Err(Error::DegenerateBand { band: band_ids[ch].clone() });
            }
        }
        Ok(NormalizationStats { band_ids, mean, std })
    }

    pub fn identity(band_ids: &[String]) -> Self {
        NormalizationStats {
            band_ids: band_ids.to_vec(),
            mean: vec![0.0; band_ids.len()],
            std: vec![1.0; band_ids.len()],
        }
    }

    fn check_match(&self, dataset: &Dataset) -> Result<()> {
        match dataset.band_ids() {
            Some(ids) if ids.as_ref() == self.band_ids.as_slice() => Ok(()),
            Some(ids) => Err(Error::Validation(format!(
                "normalization bands {:?} do not match dataset bands {:?}",
                self.band_ids, ids
            ))),
            None => Ok(()),
        }
    }
}

/// Applies `(x - mean) / std` per band.
pub fn normalize(dataset: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    stats.check_match(dataset)?;
    if stats.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Validation("normalization std must be positive".into()));
    }
    let mut out = dataset.clone();
    parallel::for_each_chunk_mut(&mut out.images, |_, imgs| {
        for img in imgs {
            for (ch, mut plane) in img.pixels.outer_iter_mut().enumerate() {
                let m = stats.mean[ch] as f32;
                let s = stats.std[ch] as f32;
                plane.mapv_inplace(|v| (v - m) / s);
            }
        }
    });
    Ok(out)
}

/// Inverse of [`normalize`] with the same stats.
pub fn denormalize(dataset: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    stats.check_match(dataset)?;
    let mut out = dataset.clone();
    parallel::for_each_chunk_mut(&mut out.images, |_, imgs| {
        for img in imgs {
            for (ch, mut plane) in img.pixels.outer_iter_mut().enumerate() {
                let m = stats.mean[ch] as f32;
                let s = stats.std[ch] as f32;
                plane.mapv_inplace(|v| v * s + m);
            }
        }
    });
    Ok(out)
}

/// Which random transforms [`augment_standard`] may draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation by a random multiple of 90 degrees. On non-square images only
    /// 0 and 180 degrees are drawn so the shape is preserved.
    pub rot90: bool,
    /// Arbitrary-angle rotation (bilinear resampling, zero fill outside the
    /// source). Off by default: on small rasters the boundary fill and
    /// interpolation blur cost more than the extra pose variety buys.
    pub arbitrary_rotation: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip: true, vflip: true, rot90: true, arbitrary_rotation: false }
    }
}

pub fn flip_horizontal(image: &MultiSpectralImage) -> MultiSpectralImage {
    let mut pixels = image.pixels.clone();
    pixels.invert_axis(ndarray::Axis(2));
    MultiSpectralImage { pixels: pixels.as_standard_layout().to_owned(), band_ids: image.band_ids.clone() }
}

pub fn flip_vertical(image: &MultiSpectralImage) -> MultiSpectralImage {
    let mut pixels = image.pixels.clone();
    pixels.invert_axis(ndarray::Axis(1));
    MultiSpectralImage { pixels: pixels.as_standard_layout().to_owned(), band_ids: image.band_ids.clone() }
}

/// Rotates by `k` quarter turns counter-clockwise. Requires a square image
/// for odd `k`.
pub fn rotate_quarter(image: &MultiSpectralImage, k: u8) -> MultiSpectralImage {
    let k = k % 4;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if k == 0 {
        return image.clone();
    }
    if k % 2 == 1 {
        assert_eq!(h, w, "quarter turns of non-square images change the shape");
    }
    let src = &image.pixels;
    let mut pixels = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = src[[ch, y, x]];
                match k {
                    1 => pixels[[ch, w - 1 - x, y]] = v,
                    2 => pixels[[ch, h - 1 - y, w - 1 - x]] = v,
                    _ => pixels[[ch, x, h - 1 - y]] = v,
                }
            }
        }
    }
    MultiSpectralImage { pixels, band_ids: image.band_ids.clone() }
}

/// Rotates counter-clockwise by `degrees` about the image center, sampling
/// the source bilinearly and filling outside pixels with zero.
pub fn rotate_arbitrary(image: &MultiSpectralImage, degrees: f64) -> MultiSpectralImage {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = &image.pixels;
    let mut pixels = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output coordinate backwards
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let at = |yy: isize, xx: isize, ch: usize| -> f64 {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    f64::from(src[[ch, yy as usize, xx as usize]])
                }
            };
            for ch in 0..c {
                let v = at(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1, ch) * (1.0 - fy) * fx
                    + at(y0 + 1, x0, ch) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1, ch) * fy * fx;
                pixels[[ch, y, x]] = v as f32;
            }
        }
    }
    MultiSpectralImage { pixels, band_ids: image.band_ids.clone() }
}

/// Applies one random transform draw per enabled option, in declaration
/// order (hflip, vflip, rot90, arbitrary rotation), so a given seed always
/// produces the same output.
pub fn augment_standard(
    image: &MultiSpectralImage,
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
) -> MultiSpectralImage {
    let mut out = image.clone();
    if config.hflip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if config.vflip && rng.random_bool(0.5) {
        out = flip_vertical(&out);
    }
    if config.rot90 {
        let k = if image.height() == image.width() {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        if k != 0 {
            out = rotate_quarter(&out, k);
        }
    }
    if config.arbitrary_rotation {
        let degrees = rng.random_range(0.0..360.0);
        out = rotate_arbitrary(&out, degrees);
    }
    out
}

/// Recipe for [`make_synthetic_imbalanced`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub priors: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
    pub split: Split,
}

impl SyntheticSpec {
    pub fn new(priors: Vec<f64>, size: usize, seed: u64) -> Self {
        SyntheticSpec {
            priors,
            size,
            channels: 10,
            height: 65,
            width: 65,
            noise_sigma: 0.5,
            seed,
            split: Split::Train,
        }
    }
}

/// Splits `size` into class counts following `priors` by largest-remainder
/// rounding; remainder ties go to the lower class index.
pub fn allocate_counts(priors: &[f64], size: usize) -> Vec<u64> {
    let quotas: Vec<f64> = priors.iter().map(|p| p * size as f64).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    // stable sort keeps lower indices first among equal fractions
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap()
    });
    for i in 0..(size as u64 - assigned) as usize {
        counts[order[i % priors.len()]] += 1;
    }
    counts
}

/// Generates a learnable imbalanced dataset: class `j` is an oriented
/// sinusoidal grating (orientation `j*pi/K`), each channel at its own spatial
/// frequency with a random phase per sample and channel, plus Gaussian noise.
/// Classes overlap under heavy noise but a small CNN beats chance easily.
pub fn make_synthetic_imbalanced(spec: &SyntheticSpec) -> Result<Dataset> {
    let k = spec.priors.len();
    if k == 0 {
        return Err(Error::Validation("priors must be nonempty".into()));
    }
    if let Some(p) = spec.priors.iter().find(|&&p| p <= 0.0 || !p.is_finite()) {
        return Err(Error::Validation(format!("class prior {p} is not positive")));
    }
    let sum: f64 = spec.priors.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("priors sum to {sum}, expected 1")));
    }
    if spec.size < k {
        return Err(Error::Validation(format!("size {} < K = {k}", spec.size)));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Validation("channels, height and width must be positive".into()));
    }

    let counts = allocate_counts(&spec.priors, spec.size);
    let mut labels: Vec<u8> = Vec::with_capacity(spec.size);
    for (j, &n) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(j as u8, n as usize));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);

    let band_ids: Arc<[String]> = (1..=spec.channels).map(|i| format!("B{i}")).collect();
    let noise = rand_distr::Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Validation(format!("noise sigma: {e}")))?;
    let (h, w) = (spec.height, spec.width);

    let mut images = Vec::with_capacity(spec.size);
    for &label in &labels {
        let theta = f64::from(label) * std::f64::consts::PI / k as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        let mut pixels = Array3::zeros((spec.channels, h, w));
        for ch in 0..spec.channels {
            // cycles across the image; kept below Nyquist for rasters >= 12px
            let freq = 1.5 + 0.35 * ch as f64;
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..h {
                let v = y as f64 / h as f64;
                for x in 0..w {
                    let u = x as f64 / w as f64;
                    let s = (std::f64::consts::TAU * freq * (u * cos_t + v * sin_t) + phase).sin();
                    pixels[[ch, y, x]] = (s + noise.sample(&mut rng)) as f32;
                }
            }
        }
        images.push(MultiSpectralImage { pixels, band_ids: band_ids.clone() });
    }
    let provenance = vec![Provenance::Real; spec.size];
    Dataset::new(images, labels, k, spec.split, provenance)
}

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    k: usize,
    band_ids: Vec<String>,
    /// (channels, height, width)
    shape: [usize; 3],
    splits: BTreeMap<String, SplitFiles>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    normalization: Option<ManifestStats>,
}

#[derive(Serialize, Deserialize)]
struct SplitFiles {
    tensors: String,
    labels: String,
    provenance: String,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Every split of a stored dataset, plus optional normalization stats.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub k: usize,
    pub band_ids: Vec<String>,
    pub shape: [usize; 3],
    pub splits: BTreeMap<Split, Dataset>,
    pub normalization: Option<NormalizationStats>,
}

/// Writes `manifest.json` plus raw tensor/label/provenance files per split
/// into `dir` (created if missing). Tensors are little-endian f32, C-order
/// N×C×H×W with no header; labels and provenance are one byte per sample.
pub fn save_dataset(
    dir: &Path,
    datasets: &[&Dataset],
    normalization: Option<&NormalizationStats>,
) -> Result<PathBuf> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Validation("nothing to save".into()))?;
    let band_ids = first
        .band_ids()
        .ok_or_else(|| Error::Validation("cannot save an empty split".into()))?
        .to_vec();
    let shape = {
        let img = &first.images[0];
        [img.channels(), img.height(), img.width()]
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut splits = BTreeMap::new();
    for ds in datasets {
        let name = ds.split.as_str();
        if splits.contains_key(name) {
            return Err(Error::Validation(format!("two datasets tagged {name}")));
        }
        if ds.k != first.k || ds.band_ids().map(|b| b.to_vec()).as_deref() != Some(&band_ids) {
            return Err(Error::Validation(format!("split {name} disagrees on K or bands")));
        }
        let files = SplitFiles {
            tensors: format!("{name}.f32"),
            labels: format!("{name}.labels.u8"),
            provenance: format!("{name}.prov.u8"),
            n: ds.len(),
        };

        let mut bytes = Vec::with_capacity(ds.len() * shape.iter().product::<usize>() * 4);
        for img in &ds.images {
            let standard = img.pixels.as_standard_layout();
            for &v in standard.as_slice().expect("standard layout") {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&files.tensors);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(&files.labels);
        fs::write(&path, &ds.labels).map_err(|e| Error::io(&path, e))?;
        let prov: Vec<u8> = ds.provenance.iter().map(|p| p.to_u8()).collect();
        let path = dir.join(&files.provenance);
        fs::write(&path, prov).map_err(|e| Error::io(&path, e))?;
        splits.insert(name.to_string(), files);
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        k: first.k,
        band_ids,
        shape,
        splits,
        normalization: normalization.map(|s| ManifestStats { mean: s.mean.clone(), std: s.std.clone() }),
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_manifest(manifest_path: &Path) -> Result<(Manifest, PathBuf)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::parse(
            manifest_path,
            format!("manifest version {} unsupported (expected {MANIFEST_VERSION})", manifest.version),
        ));
    }
    if manifest.band_ids.len() != manifest.shape[0] {
        return Err(Error::parse(
            manifest_path,
            format!("{} band ids but {} channels", manifest.band_ids.len(), manifest.shape[0]),
        ));
    }
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((manifest, dir))
}

fn load_split(manifest: &Manifest, dir: &Path, split: Split) -> Result<Dataset> {
    let files = manifest.splits.get(split.as_str()).ok_or_else(|| {
        Error::Validation(format!(
            "manifest has no {:?} split (available: {:?})",
            split.as_str(),
            manifest.splits.keys().collect::<Vec<_>>()
        ))
    })?;
    let [c, h, w] = manifest.shape;
    let per_sample = c * h * w;

    let path = dir.join(&files.tensors);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = files.n * per_sample * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            &path,
            format!(
                "expected {} samples of {per_sample} f32 ({expected} bytes), found {} bytes (~{:.1} samples)",
                files.n,
                bytes.len(),
                bytes.len() as f64 / (per_sample * 4) as f64
            ),
        ));
    }

    let path = dir.join(&files.labels);
    let labels = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if labels.len() != files.n {
        return Err(Error::parse(&path, format!("expected {} labels, found {}", files.n, labels.len())));
    }
    let path = dir.join(&files.provenance);
    let prov_bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if prov_bytes.len() != files.n {
        return Err(Error::parse(
            &path,
            format!("expected {} provenance tags, found {}", files.n, prov_bytes.len()),
        ));
    }
    let provenance = prov_bytes
        .iter()
        .map(|&b| Provenance::from_u8(b))
        .collect::<Result<Vec<_>>>()?;

    let band_ids: Arc<[String]> = Arc::from(manifest.band_ids.clone());
    let mut images = Vec::with_capacity(files.n);
    for i in 0..files.n {
        let start = i * per_sample * 4;
        let mut flat = Vec::with_capacity(per_sample);
        for j in 0..per_sample {
            let off = start + j * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "sample {i} in {} contains a non-finite value",
                    files.tensors
                )));
            }
            flat.push(v);
        }
        let pixels = Array3::from_shape_vec((c, h, w), flat).expect("length checked");
        images.push(MultiSpectralImage { pixels, band_ids: band_ids.clone() });
    }
    Dataset::new(images, labels, manifest.k, split, provenance)
}

/// Loads one split described by a manifest.
pub fn load_dataset(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let (manifest, dir) = read_manifest(manifest_path)?;
    load_split(&manifest, &dir, split)
}

/// Loads every split plus normalization stats.
pub fn load_bundle(manifest_path: &Path) -> Result<Bundle> {
    let (manifest, dir) = read_manifest(manifest_path)?;
    let mut splits = BTreeMap::new();
    for name in manifest.splits.keys() {
        let split = Split::from_name(name)?;
        splits.insert(split, load_split(&manifest, &dir, split)?);
    }
    let normalization = manifest.normalization.as_ref().map(|s| NormalizationStats {
        band_ids: manifest.band_ids.clone(),
        mean: s.mean.clone(),
        std: s.std.clone(),
    });
    Ok(Bundle {
        k: manifest.k,
        band_ids: manifest.band_ids.clone(),
        shape: manifest.shape,
        splits,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_image(c: usize, h: usize, w: usize, seed: u64) -> MultiSpectralImage {
        let band_ids: Arc<[String]> = (1..=c).map(|i| format!("B{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0f32..1.0));
        MultiSpectralImage { pixels, band_ids }
    }

    fn tiny_dataset(n: usize, k: usize, seed: u64) -> Dataset {
        let images: Vec<_> = (0..n).map(|i| tiny_image(4, 6, 6, seed + i as u64)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % k) as u8).collect();
        Dataset::new(images, labels, k, Split::Train, vec![Provenance::Real; n]).unwrap()
    }

    #[test]
    fn histogram_counts_and_rejects() {
        let h = ClassHistogram::from_labels(&[0, 0, 1, 2, 3], 4).unwrap();
        assert_eq!(h.counts, vec![2, 1, 1, 1]);
        assert_eq!(h.total(), 5);

        let mut shuffled = vec![0u8, 0, 1, 2, 3];
        shuffled.reverse();
        assert_eq!(ClassHistogram::from_labels(&shuffled, 4).unwrap(), h);

        assert!(ClassHistogram::from_labels(&[], 4).is_err());
        assert!(ClassHistogram::from_labels(&[4], 4).is_err());
    }

    #[test]
    fn compose_selects_channels_without_touching_values() {
        let img = tiny_image(10, 5, 5, 7);
        let triple = BandTriple::new("B6", "B5", "B2");
        let out = compose_bands(&img, &triple).unwrap();
        assert_eq!(out.band_ids.as_ref(), &["B6".to_string(), "B5".into(), "B2".into()]);
        for (out_c, in_c) in [(0, 5), (1, 4), (2, 1)] {
            assert_eq!(
                out.pixels.index_axis(ndarray::Axis(0), out_c),
                img.pixels.index_axis(ndarray::Axis(0), in_c)
            );
        }

        let repeated = compose_bands(&img, &BandTriple::new("B3", "B3", "B3")).unwrap();
        for c in 0..3 {
            assert_eq!(
                repeated.pixels.index_axis(ndarray::Axis(0), c),
                img.pixels.index_axis(ndarray::Axis(0), 2)
            );
        }

        // permuting the triple permutes the channels of the first result
        let permuted = compose_bands(&img, &BandTriple::new("B2", "B6", "B5")).unwrap();
        assert_eq!(
            permuted.pixels.index_axis(ndarray::Axis(0), 0),
            out.pixels.index_axis(ndarray::Axis(0), 2)
        );
        assert_eq!(
            permuted.pixels.index_axis(ndarray::Axis(0), 1),
            out.pixels.index_axis(ndarray::Axis(0), 0)
        );

        match compose_bands(&img, &BandTriple::new("B6", "B11", "B2")) {
            Err(Error::UnknownBand { wanted, available }) => {
                assert_eq!(wanted, "B11");
                assert_eq!(available.len(), 10);
            }
            other => panic!("expected UnknownBand, got {other:?}"),
        }
    }

    #[test]
    fn band_triple_parsing() {
        assert_eq!(BandTriple::parse("B6,B5,B2").unwrap(), BandTriple::new("B6", "B5", "B2"));
        assert_eq!(BandTriple::parse(" B4, B3 ,B2 ").unwrap(), BandTriple::new("B4", "B3", "B2"));
        assert!(BandTriple::parse("B6,B5").is_err());
        assert!(BandTriple::parse("B6,,B2").is_err());
    }

    #[test]
    fn normalize_standardizes_and_round_trips() {
        let ds = tiny_dataset(30, 3, 11);
        let stats = NormalizationStats::compute(&ds).unwrap();
        let normed = normalize(&ds, &stats).unwrap();
        let re = NormalizationStats::compute(&normed).unwrap();
        for ch in 0..4 {
            assert!(re.mean[ch].abs() < 1e-6, "band {ch} mean {}", re.mean[ch]);
            assert!((re.std[ch] - 1.0).abs() < 1e-5, "band {ch} std {}", re.std[ch]);
        }
        let back = denormalize(&normed, &stats).unwrap();
        for (a, b) in back.images[0].pixels.iter().zip(ds.images[0].pixels.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn identity_stats_change_nothing() {
        let ds = tiny_dataset(4, 2, 3);
        let stats = NormalizationStats::identity(&ds.band_ids().unwrap().to_vec());
        assert_eq!(normalize(&ds, &stats).unwrap(), ds);
    }

    #[test]
    fn constant_band_is_degenerate() {
        let mut ds = tiny_dataset(5, 2, 9);
        for img in &mut ds.images {
            img.pixels.index_axis_mut(ndarray::Axis(0), 2).fill(0.25);
        }
        match NormalizationStats::compute(&ds) {
            Err(Error::DegenerateBand { band }) => assert_eq!(band, "B3"),
            other => panic!("expected DegenerateBand, got {other:?}"),
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = tiny_image(3, 7, 5, 21);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)).pixels, img.pixels);
        assert_eq!(flip_vertical(&flip_vertical(&img)).pixels, img.pixels);
        assert_ne!(flip_horizontal(&img).pixels, img.pixels);
    }

    #[test]
    fn quarter_turns_compose() {
        let img = tiny_image(2, 6, 6, 22);
        assert_eq!(rotate_quarter(&img, 0).pixels, img.pixels);
        let once = rotate_quarter(&img, 1);
        let twice = rotate_quarter(&once, 1);
        assert_eq!(twice.pixels, rotate_quarter(&img, 2).pixels);
        assert_eq!(rotate_quarter(&rotate_quarter(&img, 3), 1).pixels, img.pixels);
    }

    #[test]
    fn arbitrary_rotation_shape_and_identity() {
        let img = tiny_image(2, 9, 9, 23);
        let same = rotate_arbitrary(&img, 0.0);
        for (a, b) in same.pixels.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let turned = rotate_arbitrary(&img, 37.5);
        assert_eq!(turned.pixels.shape(), img.pixels.shape());
        // a quarter turn via the arbitrary path agrees with the exact one
        let q = rotate_arbitrary(&img, 90.0);
        let exact = rotate_quarter(&img, 1);
        for (a, b) in q.pixels.iter().zip(exact.pixels.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn augment_is_deterministic_and_shape_preserving() {
        let img = tiny_image(4, 8, 8, 31);
        let config = AugmentConfig { arbitrary_rotation: true, ..AugmentConfig::default() };
        let a = augment_standard(&img, &mut ChaCha8Rng::seed_from_u64(5), &config);
        let b = augment_standard(&img, &mut ChaCha8Rng::seed_from_u64(5), &config);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.pixels.shape(), img.pixels.shape());
        let c = augment_standard(&img, &mut ChaCha8Rng::seed_from_u64(6), &config);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn augment_preserves_shape_on_non_square() {
        let img = tiny_image(2, 6, 9, 33);
        for seed in 0..20 {
            let out = augment_standard(&img, &mut ChaCha8Rng::seed_from_u64(seed), &AugmentConfig::default());
            assert_eq!(out.pixels.shape(), img.pixels.shape());
        }
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(allocate_counts(&[0.60, 0.15, 0.15, 0.10], 1000), vec![600, 150, 150, 100]);
        assert_eq!(allocate_counts(&[0.60, 0.15, 0.15, 0.10], 100), vec![60, 15, 15, 10]);
        // remainder tie between classes 0 and 1 goes to the lower index
        assert_eq!(allocate_counts(&[0.3, 0.3, 0.4], 5), vec![2, 1, 2]);
        assert_eq!(allocate_counts(&[0.5, 0.5], 7), vec![4, 3]);
    }

    #[test]
    fn synthetic_counts_follow_priors() {
        let spec = SyntheticSpec {
            channels: 3,
            height: 8,
            width: 8,
            ..SyntheticSpec::new(vec![0.60, 0.15, 0.15, 0.10], 100, 42)
        };
        let ds = make_synthetic_imbalanced(&spec).unwrap();
        let h = class_histogram(&ds).unwrap();
        assert_eq!(h.counts, vec![60, 15, 15, 10]);
        assert_eq!(ds.len(), 100);
        assert!(ds.provenance.iter().all(|&p| p == Provenance::Real));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SyntheticSpec {
            channels: 2,
            height: 6,
            width: 6,
            ..SyntheticSpec::new(vec![0.7, 0.3], 20, 77)
        };
        let a = make_synthetic_imbalanced(&spec).unwrap();
        let b = make_synthetic_imbalanced(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_imbalanced(&SyntheticSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_priors() {
        assert!(make_synthetic_imbalanced(&SyntheticSpec::new(vec![0.5, 0.5, 0.1], 10, 1)).is_err());
        assert!(make_synthetic_imbalanced(&SyntheticSpec::new(vec![1.1, -0.1], 10, 1)).is_err());
        assert!(make_synthetic_imbalanced(&SyntheticSpec::new(vec![1.0, 0.0], 10, 1)).is_err());
        assert!(make_synthetic_imbalanced(&SyntheticSpec::new(vec![0.5, 0.5], 1, 1)).is_err());
    }

    #[test]
    fn synthetic_classes_differ_more_than_noise() {
        // same-class images correlate (same orientation), cross-class do not
        let spec = SyntheticSpec {
            channels: 1,
            height: 16,
            width: 16,
            noise_sigma: 0.1,
            ..SyntheticSpec::new(vec![0.5, 0.5], 40, 5)
        };
        let ds = make_synthetic_imbalanced(&spec).unwrap();
        let idx_of = |class: u8| -> Vec<usize> {
            ds.labels
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect()
        };
        // gradient-energy along x differs by orientation even with random phase
        let energy_x = |i: usize| -> f64 {
            let p = &ds.images[i].pixels;
            let mut e = 0.0;
            for y in 0..16 {
                for x in 0..15 {
                    let d = f64::from(p[[0, y, x + 1]] - p[[0, y, x]]);
                    e += d * d;
                }
            }
            e
        };
        let mean = |v: &[usize]| v.iter().map(|&i| energy_x(i)).sum::<f64>() / v.len() as f64;
        let e0 = mean(&idx_of(0));
        let e1 = mean(&idx_of(1));
        // class 0 varies along x (orientation 0), class 1 along the diagonal
        assert!(e0 > 1.5 * e1, "x-gradient energy {e0} vs {e1}");
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny_dataset(6, 3, 50);
        let mut val = tiny_dataset(4, 3, 60);
        val.split = Split::Validation;
        val.provenance[2] = Provenance::GanSynthetic;
        let stats = NormalizationStats::compute(&train).unwrap();
        let manifest = save_dataset(dir.path(), &[&train, &val], Some(&stats)).unwrap();

        let bundle = load_bundle(&manifest).unwrap();
        assert_eq!(bundle.k, 3);
        assert_eq!(bundle.shape, [4, 6, 6]);
        assert_eq!(bundle.splits[&Split::Train], train);
        assert_eq!(bundle.splits[&Split::Validation], val);
        assert_eq!(bundle.normalization.as_ref().unwrap().mean, stats.mean);

        let only_train = load_dataset(&manifest, Split::Train).unwrap();
        assert_eq!(only_train, train);
    }

    #[test]
    fn load_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny_dataset(6, 3, 51);
        let manifest = save_dataset(dir.path(), &[&train], None).unwrap();
        let label_path = dir.path().join("train.labels.u8");
        let mut bytes = fs::read(&label_path).unwrap();
        bytes[1] = 7;
        fs::write(&label_path, bytes).unwrap();
        let err = load_dataset(&manifest, Split::Train).unwrap_err();
        assert!(err.to_string().contains("label 7"), "{err}");
    }

    #[test]
    fn load_rejects_truncated_tensor_file() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny_dataset(6, 3, 52);
        let manifest = save_dataset(dir.path(), &[&train], None).unwrap();
        let tensor_path = dir.path().join("train.f32");
        let bytes = fs::read(&tensor_path).unwrap();
        fs::write(&tensor_path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_dataset(&manifest, Split::Train).unwrap_err();
        assert!(err.to_string().contains("train.f32"), "{err}");
        assert!(err.to_string().contains("samples"), "{err}");
    }

    #[test]
    fn load_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny_dataset(3, 3, 53);
        let manifest = save_dataset(dir.path(), &[&train], None).unwrap();
        fs::remove_file(dir.path().join("train.f32")).unwrap();
        let err = load_dataset(&manifest, Split::Train).unwrap_err();
        assert!(err.to_string().contains("train.f32"), "{err}");
        // asking for a split the manifest lacks is also an error
        assert!(load_dataset(&manifest, Split::Validation).is_err());
    }

    #[test]
    fn dataset_validates_invariants() {
        let img = tiny_image(2, 4, 4, 70);
        assert!(Dataset::new(vec![img.clone()], vec![3], 3, Split::Train, vec![Provenance::Real]).is_err());
        assert!(Dataset::new(vec![img.clone()], vec![0, 1], 3, Split::Train, vec![Provenance::Real]).is_err());
        let other = tiny_image(2, 5, 5, 71);
        assert!(Dataset::new(
            vec![img, other],
            vec![0, 1],
            3,
            Split::Train,
            vec![Provenance::Real; 2]
        )
        .is_err());
    }
}
