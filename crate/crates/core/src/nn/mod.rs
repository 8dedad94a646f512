//! Minimal neural-network layers with hand-written backward passes.
//!
//! Everything is generic over [`ndarray::NdFloat`]: training runs in `f32`,
//! while gradient checks instantiate the same code in `f64`. Batched kernels
//! route through [`crate::parallel`], so forward/backward results are
//! bit-identical for any thread count.
//!
//! Layers follow one calling convention: `forward(&mut self, x, train)`
//! caches whatever the backward pass needs (only when `train` is true), and
//! `backward(&mut self, gy)` consumes that cache, accumulates parameter
//! gradients, and returns the input gradient. Optimizer `step` consumes and
//! zeroes accumulated gradients.

pub mod act;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod optim;
#[cfg(test)]
pub(crate) mod testutil;

pub use act::{LeakyRelu, Relu, Tanh};
pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::{GlobalAvgPool, Linear};
pub use optim::{Adam, Sgd};

use ndarray::{ArrayD, NdFloat};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A trainable tensor: value plus accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: NdFloat> ParamTensor<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let value = ArrayD::zeros(shape);
        let grad = ArrayD::zeros(shape);
        ParamTensor { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// A non-trainable named tensor (running statistics and the like). Included
/// in snapshots so weight averaging and checkpoints carry it along.
#[derive(Debug, Clone)]
pub struct Buffer<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

impl<F: NdFloat> Buffer<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Buffer { name: name.into(), value: ArrayD::zeros(shape) }
    }
}

/// Visitation over a network's tensors in a stable, architecture-defined
/// order. Optimizers, snapshots, and weight averaging all rely on that order
/// being identical across calls and across instances of the same shape.
pub trait HasParams<F: NdFloat> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>));
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<F>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(F::zero()));
    }
}

/// Location of one tensor inside a flat weight snapshot.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat `f32` view of every parameter and buffer of a network, with a
/// manifest describing the layout. The flat vector is the unit that weight
/// averaging and checkpointing operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub entries: Vec<SnapshotEntry>,
    pub values: Vec<f32>,
}

/// Captures parameters followed by buffers, in visitation order.
pub fn snapshot<F: NdFloat, M: HasParams<F> + ?Sized>(net: &mut M) -> WeightSnapshot {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    let mut push = |name: &str, t: &ArrayD<F>| {
        let offset = values.len();
        values.extend(t.iter().map(|&v| v.to_f32().unwrap()));
        entries.push(SnapshotEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
    };
    net.visit_params(&mut |p| push(&p.name, &p.value));
    net.visit_buffers(&mut |b| push(&b.name, &b.value));
    WeightSnapshot { entries, values }
}

/// Writes a snapshot back into a network with the same architecture.
/// Names and shapes must match the network's own layout exactly.
pub fn load_snapshot<F: NdFloat, M: HasParams<F> + ?Sized>(
    net: &mut M,
    snap: &WeightSnapshot,
) -> Result<()> {
    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    {
        let mut write = |name: &str, t: &mut ArrayD<F>| {
            if err.is_some() {
                return;
            }
            let Some(entry) = snap.entries.get(idx) else {
                err = Some(Error::Shape(format!(
                    "snapshot has {} tensors but the network expects more (next: {name})",
                    snap.entries.len()
                )));
                return;
            };
            if entry.name != name || entry.shape != t.shape() {
                err = Some(Error::Shape(format!(
                    "snapshot tensor {} {:?} does not match network tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
                return;
            }
            let src = &snap.values[entry.offset..entry.offset + entry.len];
            for (dst, &s) in t.iter_mut().zip(src) {
                *dst = F::from(s).unwrap();
            }
            idx += 1;
        };
        net.visit_params(&mut |p| write(&p.name.clone(), &mut p.value));
        net.visit_buffers(&mut |b| write(&b.name.clone(), &mut b.value));
    }
    if let Some(e) = err {
        return Err(e);
    }
    if idx != snap.entries.len() {
        return Err(Error::Shape(format!(
            "snapshot has {} tensors but the network consumed {idx}",
            snap.entries.len()
        )));
    }
    Ok(())
}

/// Replaces a snapshot's values, keeping the manifest. Errors on length
/// mismatch; used to push an averaged weight vector back into a model.
pub fn with_values(snap: &WeightSnapshot, values: Vec<f32>) -> Result<WeightSnapshot> {
    if values.len() != snap.values.len() {
        return Err(Error::Shape(format!(
            "weight vector length {} does not match snapshot length {}",
            values.len(),
            snap.values.len()
        )));
    }
    Ok(WeightSnapshot { entries: snap.entries.clone(), values })
}

/// Writes values as raw little-endian f32, no header.
pub(crate) fn write_f32_file(path: &std::path::Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_file(path: &std::path::Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::parse(
            path,
            format!("expected {} f32 values ({} bytes), found {} bytes", expected_len, expected_len * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

#[derive(Serialize)]
struct ManifestOut<'a, C> {
    kind: &'a str,
    config: &'a C,
    entries: &'a [SnapshotEntry],
    values_file: &'a str,
}

#[derive(Deserialize)]
struct ManifestIn<C> {
    kind: String,
    config: C,
    entries: Vec<SnapshotEntry>,
    values_file: String,
}

/// Shared checkpoint layout: a JSON manifest (kind tag, architecture config,
/// tensor shapes) next to a raw little-endian f32 weight file with the same
/// stem.
pub(crate) fn save_checkpoint_as<C: Serialize>(
    kind: &str,
    config: &C,
    snap: &WeightSnapshot,
    manifest_path: &std::path::Path,
) -> Result<()> {
    let values_file = manifest_path
        .with_extension("f32")
        .file_name()
        .expect("checkpoint path has a file name")
        .to_string_lossy()
        .into_owned();
    let manifest = ManifestOut { kind, config, entries: &snap.entries, values_file: &values_file };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or_else(|| std::path::Path::new("."));
    write_f32_file(&dir.join(&values_file), &snap.values)
}

pub(crate) fn load_checkpoint_as<C: serde::de::DeserializeOwned>(
    expected_kind: &str,
    manifest_path: &std::path::Path,
) -> Result<(C, WeightSnapshot)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ManifestIn<C> =
        serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, e.to_string()))?;
    if manifest.kind != expected_kind {
        return Err(Error::parse(
            manifest_path,
            format!("checkpoint kind {:?} is not {expected_kind:?}", manifest.kind),
        ));
    }
    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    let dir = manifest_path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let values = read_f32_file(&dir.join(&manifest.values_file), total)?;
    Ok((manifest.config, WeightSnapshot { entries: manifest.entries, values }))
}
