//! On-disk formats.
//!
//! A model directory holds `model.json` (layer manifest) and `weights.bin`
//! (little-endian `f32`, tensors concatenated in manifest order; offsets and
//! shapes in the manifest count elements).
//!
//! A quantized model directory holds `qmodel.json` and `qweights.bin`. The
//! binary file has two sections: every layer's weight codes (signed 8-bit
//! containers when `bits_w <= 8`, signed 32-bit otherwise), followed by every
//! layer's corrected bias as little-endian `f32`. Scales, activation scales
//! and zero points live in the manifest as JSON numbers.
//!
//! Datasets are CSV with header `f0,…,f{d-1},label`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Exponent;
use crate::inference::{Accumulation, InputQuant, QuantLayer, QuantOp, QuantizedModel};
use crate::model::{ActivationKind, BatchNorm, Dataset, Layer, LayerKind, Model};
use crate::quant::{BitWidth, Granularity, QuantScheme, QuantizedTensor, Signedness};
use crate::tensor::{Padding, Tensor};

pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_WEIGHTS: &str = "weights.bin";
pub const QMODEL_MANIFEST: &str = "qmodel.json";
pub const QMODEL_WEIGHTS: &str = "qweights.bin";

const MODEL_FORMAT: &str = "powfit-model";
const QMODEL_FORMAT: &str = "powfit-qmodel";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerManifest {
    Dense {
        activation: ActivationKind,
        tensors: Vec<TensorEntry>,
    },
    Conv2d {
        activation: ActivationKind,
        stride: usize,
        padding: Padding,
        tensors: Vec<TensorEntry>,
    },
    Batchnorm {
        activation: ActivationKind,
        tensors: Vec<TensorEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub total_elements: usize,
    pub layers: Vec<LayerManifest>,
}

fn parse_error(file: &str, text: &str, err: &serde_json::Error) -> Error {
    let offset = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + err.column().saturating_sub(1);
    Error::Parse {
        file: file.to_string(),
        offset,
        message: err.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation("json", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn from_json<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_error(file, text, &e))
}

struct F32Writer {
    bytes: Vec<u8>,
    elements: usize,
}

impl F32Writer {
    fn push(&mut self, name: &str, t: &Tensor) -> TensorEntry {
        let entry = TensorEntry {
            name: name.to_string(),
            offset: self.elements,
            shape: t.shape().to_vec(),
        };
        for &v in t.data() {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.elements += t.len();
        entry
    }
}

pub fn write_model_dir(model: &Model, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let mut w = F32Writer {
        bytes: Vec::new(),
        elements: 0,
    };
    let layers = model
        .layers()
        .iter()
        .map(|layer| match &layer.kind {
            LayerKind::Dense { weight, bias } => LayerManifest::Dense {
                activation: layer.activation,
                tensors: vec![w.push("weight", weight), w.push("bias", bias)],
            },
            LayerKind::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => LayerManifest::Conv2d {
                activation: layer.activation,
                stride: *stride,
                padding: *padding,
                tensors: vec![w.push("kernel", kernel), w.push("bias", bias)],
            },
            LayerKind::BatchNorm(bn) => LayerManifest::Batchnorm {
                activation: layer.activation,
                tensors: vec![
                    w.push("gamma", &bn.gamma),
                    w.push("beta", &bn.beta),
                    w.push("mean", &bn.mean),
                    w.push("var", &bn.var),
                ],
            },
        })
        .collect();
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: VERSION,
        input_shape: model.input_shape().to_vec(),
        total_elements: w.elements,
        layers,
    };
    write_file(&dir.join(MODEL_MANIFEST), to_json(&manifest)?.as_bytes())?;
    write_file(&dir.join(MODEL_WEIGHTS), &w.bytes)
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::validation(
            "format",
            format!("expected `{expected}`, got `{format}`"),
        ));
    }
    if version != VERSION {
        return Err(Error::validation(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

fn take_tensor(values: &[f32], tensors: &[TensorEntry], name: &str, field: &str) -> Result<Tensor> {
    let entry = tensors.iter().find(|t| t.name == name).ok_or_else(|| {
        Error::validation(format!("{field}.tensors"), format!("missing `{name}`"))
    })?;
    let n: usize = entry.shape.iter().product();
    let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| {
        Error::validation(
            format!("{field}.tensors.{name}.offset"),
            format!(
                "elements {}..{} exceed the weight file",
                entry.offset,
                entry.offset + n
            ),
        )
    })?;
    Tensor::new(
        entry.shape.clone(),
        slice.iter().map(|&v| f64::from(v)).collect(),
    )
    .map_err(|e| Error::validation(format!("{field}.tensors.{name}"), e.to_string()))
}

fn decode_f32(bytes: &[u8], file: &str) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Parse {
            file: file.to_string(),
            offset: bytes.len() - bytes.len() % 4,
            message: "trailing bytes after the last f32".to_string(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_model_dir(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join(MODEL_MANIFEST);
    let text = read_text(&manifest_path)?;
    let manifest: ModelManifest = from_json(&manifest_path.display().to_string(), &text)?;
    check_header(&manifest.format, manifest.version, MODEL_FORMAT)?;
    let weights_path = dir.join(MODEL_WEIGHTS);
    let values = decode_f32(
        &read_bytes(&weights_path)?,
        &weights_path.display().to_string(),
    )?;
    if values.len() != manifest.total_elements {
        return Err(Error::Parse {
            file: weights_path.display().to_string(),
            offset: values.len() * 4,
            message: format!(
                "expected {} f32 values, found {}",
                manifest.total_elements,
                values.len()
            ),
        });
    }
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, lm)| {
            let field = format!("layers[{i}]");
            Ok(match lm {
                LayerManifest::Dense {
                    activation,
                    tensors,
                } => Layer::dense(
                    take_tensor(&values, tensors, "weight", &field)?,
                    take_tensor(&values, tensors, "bias", &field)?,
                    *activation,
                ),
                LayerManifest::Conv2d {
                    activation,
                    stride,
                    padding,
                    tensors,
                } => Layer::conv2d(
                    take_tensor(&values, tensors, "kernel", &field)?,
                    take_tensor(&values, tensors, "bias", &field)?,
                    *stride,
                    *padding,
                    *activation,
                ),
                LayerManifest::Batchnorm {
                    activation,
                    tensors,
                } => Layer::batchnorm(
                    BatchNorm {
                        gamma: take_tensor(&values, tensors, "gamma", &field)?,
                        beta: take_tensor(&values, tensors, "beta", &field)?,
                        mean: take_tensor(&values, tensors, "mean", &field)?,
                        var: take_tensor(&values, tensors, "var", &field)?,
                    },
                    *activation,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(manifest.input_shape, layers).map_err(|e| Error::validation("layers", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeDtype {
    I8,
    I32,
}

impl CodeDtype {
    pub fn for_bits(bits: BitWidth) -> Self {
        if bits.bits() <= 8 {
            CodeDtype::I8
        } else {
            CodeDtype::I32
        }
    }

    fn width(self) -> usize {
        match self {
            CodeDtype::I8 => 1,
            CodeDtype::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub dtype: String,
    pub byte_offset: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLayerManifest {
    #[serde(flatten)]
    pub op: QuantOp,
    pub activation: ActivationKind,
    pub scheme: String,
    /// Exponent of this layer (weights and input activations).
    pub a: f64,
    pub granularity: Granularity,
    pub codes: TensorEntry,
    pub bias: TensorEntry,
    pub scales: Vec<f64>,
    pub act_range: f64,
    pub act_scale: f64,
    pub zero_point: f64,
    pub act_range_source: crate::inference::RangeSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModelManifest {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub bits_w: BitWidth,
    pub bits_a: BitWidth,
    pub accumulation: Accumulation,
    pub a: Exponent,
    pub codes: Section,
    pub biases: Section,
    pub layers: Vec<QLayerManifest>,
}

pub fn write_qmodel_dir(qm: &QuantizedModel, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let dtype = CodeDtype::for_bits(qm.bits_w);
    let mut code_bytes = Vec::new();
    let mut bias = F32Writer {
        bytes: Vec::new(),
        elements: 0,
    };
    let mut code_elements = 0usize;
    let mut layers = Vec::with_capacity(qm.layers.len());
    for layer in &qm.layers {
        let q = &layer.weights;
        let codes = TensorEntry {
            name: "codes".to_string(),
            offset: code_elements,
            shape: q.shape.clone(),
        };
        for c in q.codes.to_vec() {
            match dtype {
                CodeDtype::I8 => code_bytes.push(c as i8 as u8),
                CodeDtype::I32 => code_bytes.extend_from_slice(&c.to_le_bytes()),
            }
        }
        code_elements += q.codes.len();
        layers.push(QLayerManifest {
            op: layer.op,
            activation: layer.activation,
            scheme: q.scheme.name().to_string(),
            a: layer.exponent,
            granularity: q.granularity,
            codes,
            bias: bias.push("bias", &layer.bias),
            scales: q.scales.clone(),
            act_range: layer.input.range,
            act_scale: layer.input.scale,
            zero_point: layer.input.zero_point,
            act_range_source: layer.input.source,
        });
    }
    let manifest = QModelManifest {
        format: QMODEL_FORMAT.to_string(),
        version: VERSION,
        input_shape: qm.input_shape.clone(),
        bits_w: qm.bits_w,
        bits_a: qm.bits_a,
        accumulation: qm.accumulation,
        a: qm.exponent.clone(),
        codes: Section {
            dtype: format!("{dtype:?}").to_lowercase(),
            byte_offset: 0,
            elements: code_elements,
        },
        biases: Section {
            dtype: "f32".to_string(),
            byte_offset: code_bytes.len(),
            elements: bias.elements,
        },
        layers,
    };
    let mut bytes = code_bytes;
    bytes.extend_from_slice(&bias.bytes);
    write_file(&dir.join(QMODEL_MANIFEST), to_json(&manifest)?.as_bytes())?;
    write_file(&dir.join(QMODEL_WEIGHTS), &bytes)
}

pub fn read_qmodel_dir(dir: &Path) -> Result<QuantizedModel> {
    let manifest_path = dir.join(QMODEL_MANIFEST);
    let text = read_text(&manifest_path)?;
    let m: QModelManifest = from_json(&manifest_path.display().to_string(), &text)?;
    check_header(&m.format, m.version, QMODEL_FORMAT)?;
    let weights_path = dir.join(QMODEL_WEIGHTS);
    let file = weights_path.display().to_string();
    let bytes = read_bytes(&weights_path)?;

    let dtype = CodeDtype::for_bits(m.bits_w);
    if m.codes.dtype != format!("{dtype:?}").to_lowercase() {
        return Err(Error::validation(
            "codes.dtype",
            format!(
                "`{}` does not match bits_w = {}",
                m.codes.dtype,
                m.bits_w.bits()
            ),
        ));
    }
    let code_len = m.codes.elements * dtype.width();
    let expected = code_len + m.biases.elements * 4;
    if m.codes.byte_offset != 0 || m.biases.byte_offset != code_len || bytes.len() != expected {
        return Err(Error::Parse {
            file,
            offset: bytes.len().min(expected),
            message: format!(
                "expected {} bytes ({} of codes), found {}",
                expected,
                code_len,
                bytes.len()
            ),
        });
    }
    let codes: Vec<i32> = match dtype {
        CodeDtype::I8 => bytes[..code_len]
            .iter()
            .map(|&b| i32::from(b as i8))
            .collect(),
        CodeDtype::I32 => bytes[..code_len]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let biases = decode_f32(&bytes[code_len..], &file)?;

    let layers = m
        .layers
        .iter()
        .enumerate()
        .map(|(i, lm)| {
            let field = format!("layers[{i}]");
            let n: usize = lm.codes.shape.iter().product();
            let layer_codes = codes
                .get(lm.codes.offset..lm.codes.offset + n)
                .ok_or_else(|| {
                    Error::validation(format!("{field}.codes.offset"), "outside the code section")
                })?;
            let scheme = match lm.scheme.as_str() {
                "uniform" => QuantScheme::Uniform,
                "power" => QuantScheme::Power { a: lm.a },
                "log" => QuantScheme::Log,
                other => {
                    return Err(Error::validation(
                        format!("{field}.scheme"),
                        format!("unknown `{other}`"),
                    ))
                }
            };
            let weights = QuantizedTensor::from_parts(
                lm.codes.shape.clone(),
                layer_codes.to_vec(),
                lm.scales.clone(),
                scheme,
                m.bits_w,
                Signedness::Signed,
                lm.granularity,
            )
            .map_err(|e| Error::validation(format!("{field}.codes"), e.to_string()))?;
            let bias = take_tensor(&biases, std::slice::from_ref(&lm.bias), "bias", &field)?;
            if bias.len() != lm.codes.shape[0] {
                return Err(Error::validation(
                    format!("{field}.bias.shape"),
                    "differs from output channels",
                ));
            }
            if !(lm.act_scale > 0.0) {
                return Err(Error::validation(
                    format!("{field}.act_scale"),
                    "must be positive",
                ));
            }
            if !(lm.zero_point >= 0.0) {
                return Err(Error::validation(
                    format!("{field}.zero_point"),
                    "must be non-negative",
                ));
            }
            Ok(QuantLayer {
                op: lm.op,
                weights,
                bias,
                activation: lm.activation,
                exponent: lm.a,
                input: InputQuant {
                    range: lm.act_range,
                    zero_point: lm.zero_point,
                    scale: lm.act_scale,
                    source: lm.act_range_source,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        input_shape: m.input_shape,
        layers,
        exponent: m.a,
        bits_w: m.bits_w,
        bits_a: m.bits_a,
        accumulation: m.accumulation,
    })
}

pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..ds.dims()).map(|i| format!("f{i}")).collect();
    header.push("label".to_string());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        record.push(ds.labels()[i].to_string());
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.display().to_string(),
            offset,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a dataset CSV; the class count is one more than the largest label
/// unless `class_count` is given.
pub fn read_dataset_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let dims = headers.len().saturating_sub(1);
    let well_formed = dims > 0
        && headers.get(dims) == Some("label")
        && (0..dims).all(|i| headers.get(i) == Some(format!("f{i}").as_str()));
    if !well_formed {
        return Err(Error::Parse {
            file: path.display().to_string(),
            offset: 0,
            message: "header must be f0,...,f{d-1},label".to_string(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map(|p| p.byte() as usize).unwrap_or(0);
        let bad = |msg: String| Error::Parse {
            file: path.display().to_string(),
            offset,
            message: msg,
        };
        for i in 0..dims {
            let v: f64 = record[i]
                .trim()
                .parse()
                .map_err(|_| bad(format!("f{i} is not a number: `{}`", &record[i])))?;
            data.push(v);
        }
        let label: usize = record[dims]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label is not a class index: `{}`", &record[dims])))?;
        labels.push(label);
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, dims, data)?, labels, classes)
}
