//! The `pcv1` container for models and datasets.
//!
//! ```text
//! u64 LE  header length
//! [u8]    header, UTF-8 JSON with "version": "pcv1"
//! repeated:
//!   u64 LE  blob length in bytes
//!   [u8]    blob
//! ```
//!
//! Model files carry one little-endian `f32` blob per parameter tensor in
//! declaration order (weight, then bias, for each parametric layer), then one
//! bit-packed mask blob per prunable layer in layer order.
//!
//! Dataset files carry an `f32` image blob followed by a `u8` label blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, SurrogateParams};
use crate::error::{Error, Result};
use crate::net::{Conv2d, Layer, Linear, Mask, Network, ResNet4Config};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const VERSION: &str = "pcv1";

/// Upper bound on any single declared tensor, to reject absurd headers
/// before allocating.
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv2d {
        weight_shape: [usize; 4],
        stride: usize,
        padding: usize,
        prunable: bool,
    },
    Linear {
        weight_shape: [usize; 2],
    },
    Relu,
    Flatten,
    GlobalAvgPool,
    AvgPool2d {
        kernel: usize,
    },
    ResidualAdd {
        skip_from: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub layer: usize,
    pub weights: usize,
    pub pruned: usize,
}

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Option<ResNet4Config>,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub prune_ratio: f64,
    pub accuracy: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
    pub masks: Vec<MaskSummary>,
    pub meta: ModelMeta,
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn f32_blob(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Sequential reader over length-prefixed sections.
struct Sections<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Sections<'a> {
    fn next(&mut self, what: &str) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < 8 {
            return Err(Error::Model(format!("truncated before {what} length")));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap());
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= rest.len() - 8)
            .ok_or_else(|| Error::Model(format!("{what} length {len} exceeds remaining {} bytes", rest.len() - 8)))?;
        self.pos += 8 + len;
        Ok(&rest[8..8 + len])
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Model(format!(
                "{} trailing bytes after last section",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_f32_blob(blob: &[u8], expected: usize, what: &str) -> Result<Vec<f32>> {
    if blob.len() != expected * 4 {
        return Err(Error::Model(format!(
            "{what}: blob has {} bytes, expected {} f32 values",
            blob.len(),
            expected
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!("{what}: non-finite value")));
    }
    Ok(values)
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Model(format!("tensor shape {shape:?} is too large")))
}

pub fn model_to_bytes(net: &Network<f32>, meta: &ModelMeta) -> Result<Vec<u8>> {
    let layers = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv2d(c) => {
                let s = c.weight.shape();
                LayerDesc::Conv2d {
                    weight_shape: [s[0], s[1], s[2], s[3]],
                    stride: c.stride,
                    padding: c.padding,
                    prunable: c.prunable,
                }
            }
            Layer::Linear(l) => {
                let s = l.weight.shape();
                LayerDesc::Linear {
                    weight_shape: [s[0], s[1]],
                }
            }
            Layer::Relu => LayerDesc::Relu,
            Layer::Flatten => LayerDesc::Flatten,
            Layer::GlobalAvgPool => LayerDesc::GlobalAvgPool,
            Layer::AvgPool2d { kernel } => LayerDesc::AvgPool2d { kernel: *kernel },
            Layer::ResidualAdd { skip_from } => LayerDesc::ResidualAdd {
                skip_from: *skip_from,
            },
        })
        .collect();
    let header = ModelHeader {
        version: VERSION.to_string(),
        input_shape: net.input_shape(),
        num_classes: net.num_classes(),
        layers,
        masks: net
            .masks()
            .iter()
            .map(|(&layer, m)| MaskSummary {
                layer,
                weights: m.len(),
                pruned: m.pruned_count(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let mut out = Vec::new();
    push_blob(&mut out, &serde_json::to_vec(&header)?);
    for (_, t) in net.param_tensors() {
        push_blob(&mut out, &f32_blob(t.data()));
    }
    for mask in net.masks().values() {
        push_blob(&mut out, &mask.to_bits());
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(Network<f32>, ModelHeader)> {
    let mut sec = Sections { bytes, pos: 0 };
    let header: ModelHeader = serde_json::from_slice(sec.next("header")?)
        .map_err(|e| Error::Model(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Model(format!(
            "unsupported version {:?}, expected {VERSION:?}",
            header.version
        )));
    }
    checked_numel(&header.input_shape)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, desc) in header.layers.iter().enumerate() {
        let mut params = |shape: Vec<usize>, bias_len: usize| -> Result<(Tensor<f32>, Tensor<f32>)> {
            let n = checked_numel(&shape)?;
            let w = read_f32_blob(sec.next("weight")?, n, &format!("layer {i} weight"))?;
            let b = read_f32_blob(sec.next("bias")?, bias_len, &format!("layer {i} bias"))?;
            Ok((Tensor::new(shape, w)?, Tensor::new(vec![bias_len], b)?))
        };
        layers.push(match desc {
            LayerDesc::Conv2d {
                weight_shape,
                stride,
                padding,
                prunable,
            } => {
                let (weight, bias) = params(weight_shape.to_vec(), weight_shape[0])?;
                Layer::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride: *stride,
                    padding: *padding,
                    prunable: *prunable,
                })
            }
            LayerDesc::Linear { weight_shape } => {
                let (weight, bias) = params(weight_shape.to_vec(), weight_shape[0])?;
                Layer::Linear(Linear { weight, bias })
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Flatten => Layer::Flatten,
            LayerDesc::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerDesc::AvgPool2d { kernel } => Layer::AvgPool2d { kernel: *kernel },
            LayerDesc::ResidualAdd { skip_from } => Layer::ResidualAdd {
                skip_from: *skip_from,
            },
        });
    }
    let mut net = Network::new(header.input_shape, header.num_classes, layers)
        .map_err(|e| Error::Model(format!("architecture: {e}")))?;
    let mut masks = net.masks().clone();
    for (&layer, mask) in masks.iter_mut() {
        let bits = sec.next("mask")?;
        *mask = Mask::from_bits(bits, mask.len())
            .ok_or_else(|| Error::Model(format!("layer {layer} mask blob has wrong length")))?;
    }
    sec.finish()?;
    let summary_ok = header.masks.len() == masks.len()
        && header
            .masks
            .iter()
            .zip(&masks)
            .all(|(s, (&l, m))| s.layer == l && s.weights == m.len() && s.pruned == m.pruned_count());
    if !summary_ok {
        return Err(Error::Model("mask summary disagrees with mask blobs".into()));
    }
    // A masked weight that is not zero means the file was not written by us.
    let before = net.clone();
    net.set_masks(masks)?;
    if net.layers() != before.layers() {
        return Err(Error::Model("masked weights are not zero".into()));
    }
    Ok((net, header))
}

pub fn save_model(path: impl AsRef<Path>, net: &Network<f32>, meta: &ModelMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(net, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Network<f32>, ModelHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub kind: String,
    pub split: Split,
    pub shape: [usize; 4],
    pub num_classes: usize,
    pub surrogate: Option<SurrogateParams>,
}

pub fn dataset_to_bytes(ds: &Dataset, surrogate: Option<&SurrogateParams>) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_shape();
    let manifest = DatasetManifest {
        version: VERSION.to_string(),
        kind: "dataset".to_string(),
        split: ds.split(),
        shape: [ds.len(), c, h, w],
        num_classes: ds.num_classes(),
        surrogate: surrogate.copied(),
    };
    let mut out = Vec::new();
    push_blob(&mut out, &serde_json::to_vec(&manifest)?);
    push_blob(&mut out, &f32_blob(ds.images().data()));
    push_blob(&mut out, ds.labels());
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(Dataset, DatasetManifest)> {
    let mut sec = Sections { bytes, pos: 0 };
    let manifest: DatasetManifest = serde_json::from_slice(sec.next("manifest")?)
        .map_err(|e| Error::Model(format!("manifest: {e}")))?;
    if manifest.version != VERSION || manifest.kind != "dataset" {
        return Err(Error::Model(format!(
            "not a {VERSION} dataset: version {:?}, kind {:?}",
            manifest.version, manifest.kind
        )));
    }
    let n = checked_numel(&manifest.shape)?;
    let pixels = read_f32_blob(sec.next("images")?, n, "images")?;
    let labels = sec.next("labels")?;
    if labels.len() != manifest.shape[0] {
        return Err(Error::Model(format!(
            "{} labels for {} images",
            labels.len(),
            manifest.shape[0]
        )));
    }
    sec.finish()?;
    let ds = Dataset::new(
        Tensor::new(manifest.shape.to_vec(), pixels)?,
        labels.to_vec(),
        manifest.num_classes,
        manifest.split,
    )
    .map_err(|e| Error::Model(format!("dataset: {e}")))?;
    Ok((ds, manifest))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset, surrogate: Option<&SurrogateParams>) -> Result<()> {
    write_atomic(path.as_ref(), &dataset_to_bytes(ds, surrogate)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, DatasetManifest)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
