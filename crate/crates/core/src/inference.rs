//! Whole-model quantization and simulated quantized inference.
//!
//! Weights are quantized per layer with the fitted exponent. Layer inputs
//! are shifted by a zero-point constant so they are non-negative, raised to
//! the same exponent and quantized as unsigned codes; the shift is undone
//! by subtracting `C·Σ_j ŵ_ij` from each output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, Exponent, FitConfig, FitMode, FitReport, Solver};
use crate::model::{
    accuracy_with, normal_cdf, normal_pdf, ActivationKind, Dataset, InputStats, LayerKind, Model,
};
use crate::quant::{
    check_exponent, dequantize_code, dequantize_tensor, quantize_tensor, round_half_away,
    signed_pow, BitWidth, Granularity, Norm, QuantScheme, QuantizedTensor,
};
use crate::tensor::{conv2d, matvec, pad_spatial, padding_amounts, Padding, Tensor};

/// Lower bound of SiLU over the reals.
pub const C_SILU: f64 = 0.27846;
/// Lower bound of GeLU (exact erf form) over the reals.
pub const C_GELU: f64 = 0.169971;

/// Magnitude of the most negative value `kind` can produce.
pub fn activation_lower_bound(kind: ActivationKind) -> f64 {
    match kind {
        ActivationKind::Relu | ActivationKind::Identity => 0.0,
        ActivationKind::Silu => C_SILU,
        ActivationKind::Gelu => C_GELU,
    }
}

const MIN_RANGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ActRangePolicy {
    /// Ranges from the batch-norm preceding each layer: `β + n_σ·|γ|`.
    BnStats { n_sigma: f64 },
    /// Ranges observed on a calibration set.
    Dynamic,
}

impl Default for ActRangePolicy {
    fn default() -> Self {
        ActRangePolicy::BnStats { n_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// Inverse power applied per product (exact simulated quantization).
    #[default]
    Pre,
    /// Powered integer products accumulated, inverse power applied once.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    BnStats,
    Dynamic,
}

/// How a layer's input is mapped to unsigned codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputQuant {
    /// Upper end of the (unshifted) input range.
    pub range: f64,
    /// Shift `C` added before quantization.
    pub zero_point: f64,
    /// Powered units per code: `(range + C)^a / (2^b - 1)`.
    pub scale: f64,
    pub source: RangeSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum QuantOp {
    Dense,
    Conv2d { stride: usize, padding: Padding },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub op: QuantOp,
    pub weights: QuantizedTensor,
    /// Bias after optional bias correction.
    pub bias: Tensor,
    pub activation: ActivationKind,
    /// Exponent shared by this layer's weights and input activations.
    pub exponent: f64,
    pub input: InputQuant,
}

impl QuantLayer {
    pub fn reconstructed_weight(&self) -> Tensor {
        dequantize_tensor(&self.weights)
    }

    /// `Σ_j ŵ_cj` per output channel.
    fn weight_sums(&self, w_hat: &Tensor) -> Vec<f64> {
        let out = w_hat.shape()[0];
        let per = w_hat.len() / out.max(1);
        w_hat
            .data()
            .chunks_exact(per.max(1))
            .take(out)
            .map(|c| c.iter().sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub input_shape: Vec<usize>,
    pub layers: Vec<QuantLayer>,
    /// Exponent(s) used for the weights; `Global(1.0)` for uniform and log.
    pub exponent: Exponent,
    pub bits_w: BitWidth,
    pub bits_a: BitWidth,
    pub accumulation: Accumulation,
}

/// Weight scheme selection for [`quantize_model`].
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    /// Power quantization with a fitted exponent.
    Fitted {
        mode: FitMode,
        solver: Solver,
    },
    /// Power quantization with given exponent(s).
    Fixed(Exponent),
    Uniform,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOptions {
    pub bits_w: BitWidth,
    pub bits_a: BitWidth,
    pub granularity: Granularity,
    pub norm: Norm,
    pub scheme: WeightScheme,
    pub act_policy: ActRangePolicy,
    pub accumulation: Accumulation,
    pub bias_correct: bool,
}

impl QuantizeOptions {
    pub fn new(bits_w: BitWidth, bits_a: BitWidth) -> Self {
        Self {
            bits_w,
            bits_a,
            granularity: Granularity::per_channel(),
            norm: Norm::L2,
            scheme: WeightScheme::Fitted {
                mode: FitMode::Global,
                solver: Solver::NelderMead,
            },
            act_policy: ActRangePolicy::default(),
            accumulation: Accumulation::Pre,
            bias_correct: true,
        }
    }

    pub fn fit_config(&self, solver: Solver) -> FitConfig {
        FitConfig {
            granularity: self.granularity,
            norm: self.norm,
            solver,
            ..FitConfig::new(self.bits_w)
        }
    }
}

/// A quantized model together with the fit that chose its exponent.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub model: QuantizedModel,
    pub fit: Option<FitReport>,
}

/// Statistics of a weighted layer's input over a calibration set.
#[derive(Debug, Clone)]
struct ObservedInput {
    max: f64,
    min: f64,
    mean: Vec<f64>,
}

fn observe_inputs(folded: &Model, calib: &Dataset) -> Result<Vec<ObservedInput>> {
    let count = folded.weighted_count();
    let mut obs: Vec<Option<ObservedInput>> = vec![None; count];
    for row in calib.rows() {
        let inputs = folded.weighted_layer_inputs(&row)?;
        for (slot, x) in obs.iter_mut().zip(inputs) {
            let entry = slot.get_or_insert_with(|| ObservedInput {
                max: f64::NEG_INFINITY,
                min: f64::INFINITY,
                mean: vec![0.0; x.len()],
            });
            for (m, &v) in entry.mean.iter_mut().zip(x.data()) {
                entry.max = entry.max.max(v);
                entry.min = entry.min.min(v);
                *m += v;
            }
        }
    }
    let n = calib.len().max(1) as f64;
    obs.into_iter()
        .map(|o| {
            let mut o = o.ok_or_else(|| Error::validation("calib", "calibration set is empty"))?;
            o.mean.iter_mut().for_each(|m| *m /= n);
            Ok(o)
        })
        .collect()
}

/// `E[σ(z)]` for `z ~ N(mean, std²)`.
fn expected_activation(kind: ActivationKind, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return kind.apply(mean);
    }
    match kind {
        ActivationKind::Identity => mean,
        ActivationKind::Relu => {
            let t = mean / std;
            mean * normal_cdf(t) + std * normal_pdf(t)
        }
        ActivationKind::Silu | ActivationKind::Gelu => {
            // composite Simpson over ±10σ
            let n = 400;
            let (lo, hi) = (-10.0, 10.0);
            let h = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let t = lo + i as f64 * h;
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * kind.apply(mean + std * t) * normal_pdf(t);
            }
            acc * h / 3.0
        }
    }
}

/// Activation feeding weighted layer `index` of the folded model.
fn feeding_activation(folded: &Model, index: usize) -> ActivationKind {
    if index == 0 {
        return ActivationKind::Identity;
    }
    folded
        .layers()
        .iter()
        .filter(|l| l.is_weighted())
        .nth(index - 1)
        .map(|l| l.activation)
        .unwrap_or(ActivationKind::Identity)
}

/// Per-layer input range, zero point and mean used for scales and bias
/// correction.
#[derive(Debug, Clone)]
pub struct InputCalibration {
    pub range: f64,
    pub zero_point: f64,
    pub source: RangeSource,
    /// Expected input value per input element.
    pub mean: Vec<f64>,
}

/// Derives the input range, zero point and mean of every weighted layer of
/// `model` (which may still carry batch-norm layers).
pub fn calibrate_inputs(
    model: &Model,
    policy: ActRangePolicy,
    calib: Option<&Dataset>,
) -> Result<Vec<InputCalibration>> {
    let (folded, stats) = model.fold_batchnorm_with_stats()?;
    let observed = match calib {
        Some(ds) => Some(observe_inputs(&folded, ds)?),
        None => None,
    };
    let shapes = folded.layer_shapes()?;
    let weighted_input_shapes: Vec<&Vec<usize>> = folded
        .layers()
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| l.is_weighted())
        .map(|(_, s)| s)
        .collect();

    let mut out = Vec::with_capacity(stats.len());
    for (idx, stat) in stats.iter().enumerate() {
        let act = feeding_activation(&folded, idx);
        let input_len: usize = weighted_input_shapes[idx].iter().product();
        let from_bn = match (policy, stat) {
            (ActRangePolicy::BnStats { n_sigma }, Some(s)) => {
                Some(bn_calibration(s, n_sigma, act, input_len))
            }
            _ => None,
        };
        let entry = match from_bn {
            Some(c) => c,
            None => {
                let obs = observed.as_ref().map(|o| &o[idx]).ok_or_else(|| {
                    Error::structure(format!(
                        "layer {idx} has no preceding batch-norm and no calibration data was given"
                    ))
                })?;
                let zero_point = match act {
                    ActivationKind::Identity => (-obs.min).max(0.0),
                    other => activation_lower_bound(other),
                };
                InputCalibration {
                    range: obs.max.max(MIN_RANGE),
                    zero_point,
                    source: RangeSource::Dynamic,
                    mean: obs.mean.clone(),
                }
            }
        };
        out.push(entry);
    }
    Ok(out)
}

fn bn_calibration(
    stats: &InputStats,
    n_sigma: f64,
    act: ActivationKind,
    input_len: usize,
) -> InputCalibration {
    let bn = &stats.bn;
    let gamma = bn.gamma.data();
    let beta = bn.beta.data();
    let range = gamma
        .iter()
        .zip(beta)
        .map(|(g, b)| b + n_sigma * g.abs())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(MIN_RANGE);
    let zero_point = match act {
        ActivationKind::Identity => gamma
            .iter()
            .zip(beta)
            .map(|(g, b)| -(b - n_sigma * g.abs()))
            .fold(0.0, f64::max),
        other => activation_lower_bound(other),
    };
    let channel_means: Vec<f64> = gamma
        .iter()
        .zip(beta)
        .map(|(g, b)| expected_activation(act, *b, g.abs()))
        .collect();
    let per = input_len / channel_means.len().max(1);
    let mean = (0..input_len)
        .map(|i| channel_means[i / per.max(1)])
        .collect();
    InputCalibration {
        range,
        zero_point,
        source: RangeSource::BnStats,
        mean,
    }
}

/// Unsigned activation scale `s_X` of every weighted layer.
pub fn derive_activation_scales(
    model: &Model,
    policy: ActRangePolicy,
    exponent: &Exponent,
    bits_a: BitWidth,
    calib: Option<&Dataset>,
) -> Result<Vec<f64>> {
    let cal = calibrate_inputs(model, policy, calib)?;
    cal.iter()
        .enumerate()
        .map(|(i, c)| {
            let a = exponent.for_layer(i);
            check_exponent(a)?;
            Ok((c.range + c.zero_point).powf(a) / f64::from(bits_a.unsigned_max()))
        })
        .collect()
}

/// `b − (Ŵ − W)·μ` for a weight matrix flattened to `[out × in]`.
pub fn bias_correction(w: &Tensor, w_hat: &Tensor, mean: &[f64], bias: &Tensor) -> Result<Tensor> {
    if w.shape() != w_hat.shape() {
        return Err(Error::dim(
            "float and reconstructed weights differ in shape",
        ));
    }
    let out = w.shape()[0];
    let cols = w.len() / out.max(1);
    if mean.len() != cols || bias.len() != out {
        return Err(Error::dim(format!(
            "bias correction needs {} input means and {} biases, got {} and {}",
            cols,
            out,
            mean.len(),
            bias.len()
        )));
    }
    let delta = Tensor::matrix(
        out,
        cols,
        w_hat
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a - b)
            .collect(),
    )?;
    let shift = matvec(&delta, mean)?;
    Tensor::new(
        bias.shape().to_vec(),
        bias.data().iter().zip(shift).map(|(b, s)| b - s).collect(),
    )
}

/// Input means rearranged to match a conv kernel flattened per output
/// channel (`C_in·kh·kw`), using per-channel averages.
fn conv_mean(mean: &[f64], c_in: usize, taps: usize) -> Vec<f64> {
    let per = mean.len() / c_in.max(1);
    let channel: Vec<f64> = mean
        .chunks(per.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
        .collect();
    channel
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, taps))
        .collect()
}

type SchemeFn = Box<dyn Fn(f64) -> QuantScheme>;

/// Folds batch-norms, fits the exponent, quantizes every layer, derives
/// activation scales and optionally corrects biases.
pub fn quantize_model(
    model: &Model,
    options: &QuantizeOptions,
    calib: Option<&Dataset>,
) -> Result<Quantized> {
    let (folded, _) = model.fold_batchnorm_with_stats()?;
    let count = folded.weighted_count();

    let (exponent, fit_report, weight_scheme): (Exponent, Option<FitReport>, SchemeFn) =
        match &options.scheme {
            WeightScheme::Fitted { mode, solver } => {
                let report = fit(&folded, *mode, &options.fit_config(*solver))?;
                (
                    report.a_star.clone(),
                    Some(report),
                    Box::new(|a| QuantScheme::Power { a }),
                )
            }
            WeightScheme::Fixed(e) => {
                if let Exponent::PerLayer(v) = e {
                    if v.len() != count {
                        return Err(Error::validation(
                            "exponent",
                            format!("{} exponents for {} layers", v.len(), count),
                        ));
                    }
                }
                (e.clone(), None, Box::new(|a| QuantScheme::Power { a }))
            }
            WeightScheme::Uniform => (
                Exponent::Global(1.0),
                None,
                Box::new(|_| QuantScheme::Uniform),
            ),
            WeightScheme::Log => (Exponent::Global(1.0), None, Box::new(|_| QuantScheme::Log)),
        };
    if options.accumulation == Accumulation::Post && options.scheme == WeightScheme::Log {
        return Err(Error::validation(
            "accumulation",
            "post-accumulation needs a power-family weight scheme",
        ));
    }

    let calibration = calibrate_inputs(model, options.act_policy, calib)?;
    let full_a = f64::from(options.bits_a.unsigned_max());
    let mut layers = Vec::with_capacity(count);
    for (idx, (layer, cal)) in folded
        .layers()
        .iter()
        .filter(|l| l.is_weighted())
        .zip(&calibration)
        .enumerate()
    {
        let a = exponent.for_layer(idx);
        check_exponent(a)?;
        let w = layer.weight().expect("weighted");
        let q = quantize_tensor(w, weight_scheme(a), options.bits_w, options.granularity)?;
        let w_hat = dequantize_tensor(&q);
        let bias = layer.bias().expect("weighted").clone();
        let (op, mean) = match &layer.kind {
            LayerKind::Dense { .. } => (QuantOp::Dense, cal.mean.clone()),
            LayerKind::Conv2d {
                stride,
                padding,
                kernel,
                ..
            } => {
                let taps = kernel.shape()[2] * kernel.shape()[3];
                (
                    QuantOp::Conv2d {
                        stride: *stride,
                        padding: *padding,
                    },
                    conv_mean(&cal.mean, kernel.shape()[1], taps),
                )
            }
            LayerKind::BatchNorm(_) => unreachable!("folded"),
        };
        let bias = if options.bias_correct {
            bias_correction(w, &w_hat, &mean, &bias)?
        } else {
            bias
        }
        .map(|v| f64::from(v as f32))?;
        let act_exponent = if options.scheme == WeightScheme::Log {
            1.0
        } else {
            a
        };
        layers.push(QuantLayer {
            op,
            weights: q,
            bias,
            activation: layer.activation,
            exponent: act_exponent,
            input: InputQuant {
                range: cal.range,
                zero_point: cal.zero_point,
                scale: (cal.range + cal.zero_point).powf(act_exponent) / full_a,
                source: cal.source,
            },
        });
    }

    Ok(Quantized {
        model: QuantizedModel {
            input_shape: folded.input_shape().to_vec(),
            layers,
            exponent,
            bits_w: options.bits_w,
            bits_a: options.bits_a,
            accumulation: options.accumulation,
        },
        fit: fit_report,
    })
}

/// Unsigned input codes for already shifted, non-negative values.
pub fn input_codes(shifted: &[f64], a: f64, scale: f64, bits: BitWidth) -> Vec<i32> {
    let full = f64::from(bits.unsigned_max());
    shifted
        .iter()
        .map(|&v| round_half_away(v.max(0.0).powf(a) / scale).clamp(0.0, full) as i32)
        .collect()
}

impl QuantizedModel {
    pub fn output_len(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weights.shape[0])
            .unwrap_or_default()
    }

    /// Simulated quantized forward pass for one input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let n: usize = self.input_shape.iter().product();
        if input.len() != n {
            return Err(Error::dim(format!(
                "input of {} values for model input {:?}",
                input.len(),
                self.input_shape
            )));
        }
        let mut x = input.reshape(self.input_shape.clone())?;
        for layer in &self.layers {
            x = self.layer_forward(layer, &x)?;
        }
        Ok(x)
    }

    fn layer_forward(&self, layer: &QuantLayer, x: &Tensor) -> Result<Tensor> {
        let a = layer.exponent;
        let c = layer.input.zero_point;
        let (x, stride) = match layer.op {
            QuantOp::Dense => (x.reshape(vec![x.len()])?, 1),
            QuantOp::Conv2d { stride, padding } => {
                let k = &layer.weights.shape;
                let pads = padding_amounts(x.shape()[1], x.shape()[2], k[2], k[3], stride, padding);
                (pad_spatial(x, pads, 0.0)?, stride)
            }
        };
        let shifted: Vec<f64> = x.data().iter().map(|&v| v + c).collect();
        let codes = input_codes(&shifted, a, layer.input.scale, self.bits_a);
        let w_hat = layer.reconstructed_weight();
        let sums = layer.weight_sums(&w_hat);

        let pre = match self.accumulation {
            Accumulation::Pre => {
                let x_hat: Vec<f64> = codes
                    .iter()
                    .map(|&q| {
                        dequantize_code(q, layer.input.scale, QuantScheme::Power { a }, self.bits_a)
                    })
                    .collect();
                let x_hat = Tensor::new(x.shape().to_vec(), x_hat)?;
                apply_op(layer.op, &w_hat, &x_hat, stride)?
            }
            Accumulation::Post => {
                let q_x = Tensor::new(
                    x.shape().to_vec(),
                    codes.iter().map(|&q| f64::from(q)).collect(),
                )?;
                let q_w = Tensor::new(
                    layer.weights.shape.clone(),
                    layer
                        .weights
                        .codes
                        .to_vec()
                        .into_iter()
                        .map(f64::from)
                        .collect(),
                )?;
                let acc = apply_op(layer.op, &q_w, &q_x, stride)?;
                let groups = layer.weights.group_count();
                let per = acc.len() / layer.weights.shape[0].max(1);
                let data = acc
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &o)| {
                        let ch = i / per.max(1);
                        let s_w = layer.weights.scales[if groups == 1 { 0 } else { ch }];
                        signed_pow(o * s_w * layer.input.scale, 1.0 / a)
                    })
                    .collect();
                Tensor::new(acc.shape().to_vec(), data)?
            }
        };
        let per = pre.len() / layer.bias.len().max(1);
        let act = layer.activation;
        let data = pre
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / per.max(1);
                act.apply(v + layer.bias.data()[ch] - c * sums[ch])
            })
            .collect();
        Tensor::new(pre.shape().to_vec(), data)
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        accuracy_with(dataset, |x| self.forward(x))
    }
}

fn apply_op(op: QuantOp, w: &Tensor, x: &Tensor, stride: usize) -> Result<Tensor> {
    match op {
        QuantOp::Dense => Tensor::vector(matvec(w, x.data())?),
        QuantOp::Conv2d { .. } => conv2d(x, w, stride, Padding::Valid),
    }
}

/// Simulated quantized inference of `qm` on one input.
pub fn forward_quantized(qm: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    qm.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BatchNorm, Layer};

    fn bits(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn lower_bounds() {
        assert_eq!(activation_lower_bound(ActivationKind::Relu), 0.0);
        assert_eq!(activation_lower_bound(ActivationKind::Identity), 0.0);
        assert_eq!(activation_lower_bound(ActivationKind::Silu), 0.27846);
        assert_eq!(activation_lower_bound(ActivationKind::Gelu), 0.169971);
    }

    #[test]
    fn bias_correction_cases() {
        let w = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let w_hat = Tensor::matrix(1, 2, vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        let b = Tensor::vector(vec![0.0]).unwrap();
        let r = bias_correction(&w, &w_hat, &[1.0, 1.0], &b).unwrap();
        assert!((r.data()[0] + 0.25).abs() < 1e-12);
        let r = bias_correction(&w, &w, &[3.0, -2.0], &b).unwrap();
        assert_eq!(r, b);
        let r = bias_correction(&w, &w_hat, &[0.0, 0.0], &b).unwrap();
        assert_eq!(r, b);
        assert!(bias_correction(&w, &w_hat, &[1.0], &b).is_err());
    }

    #[test]
    fn expected_relu_matches_quadrature() {
        for &(m, s) in &[(0.0, 1.0), (1.5, 0.5), (-2.0, 0.7)] {
            let closed = expected_activation(ActivationKind::Relu, m, s);
            // Simpson on the same integrand
            let n = 4000;
            let h = 20.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let t = -10.0 + i as f64 * h;
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * (m + s * t).max(0.0) * normal_pdf(t);
            }
            assert!((closed - acc * h / 3.0).abs() < 1e-6);
        }
    }

    fn bn_model() -> Model {
        let v = |x: Vec<f64>| Tensor::vector(x).unwrap();
        Model::new(
            vec![1],
            vec![
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    v(vec![0.0]),
                    ActivationKind::Identity,
                ),
                Layer::batchnorm(
                    BatchNorm {
                        gamma: v(vec![1.0]),
                        beta: v(vec![0.0]),
                        mean: v(vec![0.0]),
                        var: v(vec![1.0]),
                    },
                    ActivationKind::Relu,
                ),
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    v(vec![0.0]),
                    ActivationKind::Identity,
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn bn_range_is_beta_plus_n_sigma_gamma() {
        let m = bn_model();
        let calib = Dataset::new(
            Tensor::matrix(10, 1, (0..10).map(|i| i as f64 / 4.0).collect()).unwrap(),
            vec![0; 10],
            1,
        )
        .unwrap();
        let cal =
            calibrate_inputs(&m, ActRangePolicy::BnStats { n_sigma: 3.0 }, Some(&calib)).unwrap();
        assert_eq!(cal[1].range, 3.0);
        assert_eq!(cal[1].source, RangeSource::BnStats);
        // first layer has no batch-norm: dynamic fallback, max input 2.25
        assert_eq!(cal[0].range, 2.25);
        assert_eq!(cal[0].source, RangeSource::Dynamic);
        // without calibration data the first layer cannot be ranged
        assert!(matches!(
            calibrate_inputs(&m, ActRangePolicy::default(), None),
            Err(Error::Structure(_))
        ));
        let scales = derive_activation_scales(
            &m,
            ActRangePolicy::default(),
            &Exponent::Global(0.5),
            bits(4),
            Some(&calib),
        )
        .unwrap();
        assert!((scales[1] - 3f64.sqrt() / 15.0).abs() < 1e-15);
    }

    #[test]
    fn dynamic_range_uses_calibration_max() {
        let m = bn_model();
        let calib = Dataset::new(
            Tensor::matrix(3, 1, vec![0.5, 2.5, -1.0]).unwrap(),
            vec![0; 3],
            1,
        )
        .unwrap();
        let cal = calibrate_inputs(&m, ActRangePolicy::Dynamic, Some(&calib)).unwrap();
        assert_eq!(cal[0].range, 2.5);
        // identity-fed first layer shifts by the most negative observed input
        assert_eq!(cal[0].zero_point, 1.0);
        // relu(bn(x)) with var = 1 carries the ε_bn shrink
        assert!((cal[1].range - 2.5).abs() < 1e-4);
    }

    #[test]
    fn full_scale_passthrough() {
        let m = Model::new(
            vec![1],
            vec![Layer::dense(
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::vector(vec![0.0]).unwrap(),
                ActivationKind::Relu,
            )],
        )
        .unwrap();
        let calib =
            Dataset::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), vec![0, 0], 1).unwrap();
        let mut opts = QuantizeOptions::new(bits(8), bits(8));
        opts.act_policy = ActRangePolicy::Dynamic;
        let q = quantize_model(&m, &opts, Some(&calib)).unwrap();
        let a = q.model.exponent.for_layer(0);
        let out = q
            .model
            .forward(&Tensor::vector(vec![1.0]).unwrap())
            .unwrap();
        // one grid step below the top code
        let step = 1.0 - (254.0f64 / 255.0).powf(1.0 / a);
        assert!(
            (out.data()[0] - 1.0).abs() <= step,
            "{} (a = {a})",
            out.data()[0]
        );
    }

    #[test]
    fn post_with_log_is_rejected() {
        let m = bn_model();
        let calib =
            Dataset::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), vec![0, 0], 1).unwrap();
        let mut opts = QuantizeOptions::new(bits(4), bits(4));
        opts.scheme = WeightScheme::Log;
        opts.accumulation = Accumulation::Post;
        assert!(quantize_model(&m, &opts, Some(&calib)).is_err());
    }
}
