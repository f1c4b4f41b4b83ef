//! On-disk model format: a JSON manifest plus a blob of little-endian `f64`.
//!
//! Offsets in the manifest are element indices into the blob. Dense weights
//! are stored `[out][in]`, convolution kernels `[outC][inC][kH][kW]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, Model, ModelError, Padding};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub input_shape: [usize; 3],
    pub class_labels: Vec<String>,
    pub weights_blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<u32>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    /// `[top, bottom, left, right]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<usize>,
}

fn read(path: &Path) -> Result<Vec<u8>, ModelError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelError::MissingFile(path.to_path_buf())
        } else {
            ModelError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Model, ModelError> {
    let manifest_path = manifest_path.as_ref();
    let text = read(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.weights_blob);
    let bytes = read(&blob_path)?;
    let actual = crc32fast::hash(&bytes);
    if let Some(expected) = manifest.checksum {
        if expected != actual {
            return Err(ModelError::ChecksumMismatch { expected, actual });
        }
    }
    if bytes.len() % 8 != 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "weights blob is {} bytes, not a whole number of f64 values",
            bytes.len()
        )));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, e)| build_layer(i, e, &blob))
        .collect::<Result<Vec<_>, _>>()?;
    Model::with_checksum(manifest.input_shape, layers, manifest.class_labels, actual)
}

fn field<T: Copy>(layer: usize, name: &str, v: Option<T>) -> Result<T, ModelError> {
    v.ok_or_else(|| ModelError::Parse(format!("layer {layer}: missing `{name}`")))
}

fn slice_tensor(
    layer: usize,
    blob: &[f64],
    offset: usize,
    shape: Vec<usize>,
) -> Result<Tensor, ModelError> {
    let n: usize = shape.iter().product();
    let end = offset.checked_add(n).filter(|&e| e <= blob.len()).ok_or_else(|| {
        ModelError::ShapeMismatch(format!(
            "layer {layer}: declared {shape:?} at offset {offset} needs {n} values but blob holds {}",
            blob.len()
        ))
    })?;
    let data = blob[offset..end].to_vec();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteWeight { layer, index });
    }
    Ok(Tensor::from_parts(shape, data)?)
}

fn build_layer(i: usize, e: &LayerEntry, blob: &[f64]) -> Result<LayerSpec, ModelError> {
    let kind = LayerKind::parse(&e.kind).ok_or_else(|| ModelError::UnknownLayerType(e.kind.clone()))?;
    let pair = |v: [usize; 2]| (v[0], v[1]);
    Ok(match kind {
        LayerKind::Dense => {
            let (inp, out) = (field(i, "inputs", e.inputs)?, field(i, "outputs", e.outputs)?);
            LayerSpec::Dense {
                weights: slice_tensor(i, blob, field(i, "weight_offset", e.weight_offset)?, vec![out, inp])?,
                bias: slice_tensor(i, blob, field(i, "bias_offset", e.bias_offset)?, vec![out])?,
            }
        }
        LayerKind::Conv2d => {
            let in_c = field(i, "in_channels", e.in_channels)?;
            let out_c = field(i, "out_channels", e.out_channels)?;
            let [kh, kw] = field(i, "kernel", e.kernel)?;
            let p = e.padding.unwrap_or([0; 4]);
            LayerSpec::Conv2d {
                kernels: slice_tensor(
                    i,
                    blob,
                    field(i, "weight_offset", e.weight_offset)?,
                    vec![out_c, in_c, kh, kw],
                )?,
                bias: slice_tensor(i, blob, field(i, "bias_offset", e.bias_offset)?, vec![out_c])?,
                stride: pair(e.stride.unwrap_or([1, 1])),
                padding: Padding {
                    top: p[0],
                    bottom: p[1],
                    left: p[2],
                    right: p[3],
                },
            }
        }
        LayerKind::Maxpool2d | LayerKind::Avgpool2d => {
            let window = pair(field(i, "window", e.window)?);
            let stride = e.stride.map(pair).unwrap_or(window);
            if kind == LayerKind::Maxpool2d {
                LayerSpec::MaxPool2d { window, stride }
            } else {
                LayerSpec::AvgPool2d { window, stride }
            }
        }
        LayerKind::Relu => LayerSpec::Relu,
        LayerKind::Flatten => LayerSpec::Flatten,
    })
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`, parameters packed
/// contiguously in layer order. Returns the manifest path.
pub fn save_model(model: &Model, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, ModelError> {
    let dir = dir.as_ref();
    let mut blob: Vec<u8> = Vec::with_capacity(model.parameter_count() * 8);
    let mut offset = 0usize;
    let mut push = |t: &Tensor, blob: &mut Vec<u8>| {
        let start = offset;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
        start
    };
    let mut layers = Vec::new();
    for layer in model.layers() {
        let mut e = LayerEntry {
            kind: layer.kind().name().to_string(),
            ..Default::default()
        };
        match layer {
            LayerSpec::Dense { weights, bias } => {
                e.outputs = Some(weights.shape()[0]);
                e.inputs = Some(weights.shape()[1]);
                e.weight_offset = Some(push(weights, &mut blob));
                e.bias_offset = Some(push(bias, &mut blob));
            }
            LayerSpec::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => {
                let s = kernels.shape();
                e.out_channels = Some(s[0]);
                e.in_channels = Some(s[1]);
                e.kernel = Some([s[2], s[3]]);
                e.stride = Some([stride.0, stride.1]);
                e.padding = Some([padding.top, padding.bottom, padding.left, padding.right]);
                e.weight_offset = Some(push(kernels, &mut blob));
                e.bias_offset = Some(push(bias, &mut blob));
            }
            LayerSpec::MaxPool2d { window, stride } | LayerSpec::AvgPool2d { window, stride } => {
                e.window = Some([window.0, window.1]);
                e.stride = Some([stride.0, stride.1]);
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        layers.push(e);
    }
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        input_shape: model.input_shape(),
        class_labels: model.class_labels().to_vec(),
        weights_blob: blob_name.clone(),
        checksum: Some(crc32fast::hash(&blob)),
        layers,
    };
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
    let manifest_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Parse(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
    Ok(manifest_path)
}
