//! Analysis helpers: error/accuracy sweeps over the exponent, scheme
//! comparison tables, weight distribution statistics and a bit-weighted
//! operation count for the integer power overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{objective, Exponent, GridSpec};
use crate::inference::{quantize_model, QuantizeOptions, WeightScheme};
use crate::intpow::IntPowConfig;
use crate::model::{Dataset, LayerKind, Model};
use crate::quant::{reconstruction_error, BitWidth, QuantScheme};
use crate::tensor::moments;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub a: f64,
    pub epsilon: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub model_id: String,
    pub bits: u32,
    pub points: Vec<SweepPoint>,
    /// Pearson correlation of ε and accuracy; `None` when either is constant.
    pub correlation: Option<f64>,
}

impl SweepCurve {
    /// Grid point with the smallest ε (ties toward smaller `a`).
    pub fn argmin_epsilon(&self) -> Option<SweepPoint> {
        self.points
            .iter()
            .copied()
            .fold(None, |best: Option<SweepPoint>, p| match best {
                Some(b) if b.epsilon <= p.epsilon => Some(b),
                _ => Some(p),
            })
    }

    pub fn at(&self, a: f64) -> Option<SweepPoint> {
        self.points
            .iter()
            .copied()
            .find(|p| (p.a - a).abs() < 1e-12)
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// ε and quantized accuracy at every grid exponent, using `base` for all
/// settings except the weight scheme. `model` may carry batch-norms.
pub fn sweep_a(
    model: &Model,
    dataset: &Dataset,
    base: &QuantizeOptions,
    grid: GridSpec,
    model_id: &str,
) -> Result<SweepCurve> {
    grid.validate()?;
    let folded = model.fold_batchnorm()?;
    let mut points = Vec::with_capacity(grid.len());
    for a in grid.points() {
        let epsilon = objective(&folded, a, base.bits_w, base.granularity, base.norm)?;
        let options = QuantizeOptions {
            scheme: WeightScheme::Fixed(Exponent::Global(a)),
            ..base.clone()
        };
        let q = quantize_model(model, &options, Some(dataset))?;
        let accuracy = q.model.accuracy(dataset)?;
        points.push(SweepPoint {
            a,
            epsilon,
            accuracy,
        });
    }
    let eps: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
    let acc: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    Ok(SweepCurve {
        model_id: model_id.to_string(),
        bits: base.bits_w.bits(),
        correlation: pearson(&eps, &acc),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: String,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Fitted exponent, power rows only.
    pub a_star: Option<Exponent>,
    pub accuracy: f64,
    pub reconstruction_error: f64,
}

/// Uniform, logarithmic and fitted power rows for every bit width in
/// `bits` (used for both weights and activations).
pub fn compare_schemes(
    model: &Model,
    dataset: &Dataset,
    bits: &[BitWidth],
    base: &QuantizeOptions,
) -> Result<Vec<ComparisonRow>> {
    let folded = model.fold_batchnorm()?;
    let power = match &base.scheme {
        s @ WeightScheme::Fitted { .. } => s.clone(),
        _ => WeightScheme::Fitted {
            mode: crate::fit::FitMode::Global,
            solver: crate::fit::Solver::NelderMead,
        },
    };
    let mut rows = Vec::with_capacity(3 * bits.len());
    for &b in bits {
        for scheme in [WeightScheme::Uniform, WeightScheme::Log, power.clone()] {
            let options = QuantizeOptions {
                bits_w: b,
                bits_a: b,
                scheme: scheme.clone(),
                ..base.clone()
            };
            let q = quantize_model(model, &options, Some(dataset))?;
            let accuracy = q.model.accuracy(dataset)?;
            let (name, a_star, eps) = match scheme {
                WeightScheme::Uniform => (
                    "uniform",
                    None,
                    reconstruction_error(
                        &folded,
                        QuantScheme::Uniform,
                        b,
                        base.granularity,
                        base.norm,
                    )?,
                ),
                WeightScheme::Log => (
                    "log",
                    None,
                    reconstruction_error(
                        &folded,
                        QuantScheme::Log,
                        b,
                        base.granularity,
                        base.norm,
                    )?,
                ),
                _ => {
                    let report = q.fit.as_ref().expect("fitted scheme reports its fit");
                    (
                        "power",
                        Some(report.a_star.clone()),
                        report.epsilon_at_a_star,
                    )
                }
            };
            rows.push(ComparisonRow {
                scheme: name.to_string(),
                bits_w: b.bits(),
                bits_a: b.bits(),
                a_star,
                accuracy,
                reconstruction_error: eps,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub count: usize,
    pub std: f64,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub layers: Vec<LayerStats>,
    pub mean_std: f64,
    pub mean_skewness: Option<f64>,
    pub mean_kurtosis: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let collected: Option<Vec<f64>> = values.collect();
    collected
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Moments of each flattened dense/conv weight and their cross-layer means.
pub fn weight_stats(model: &Model) -> Result<WeightStats> {
    let layers = model
        .weights()
        .enumerate()
        .map(|(layer, w)| {
            let m = moments(w.data())?;
            Ok(LayerStats {
                layer,
                count: w.len(),
                std: m.std,
                skewness: m.skewness,
                kurtosis: m.kurtosis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_std = layers.iter().map(|l| l.std).sum::<f64>() / layers.len().max(1) as f64;
    Ok(WeightStats {
        mean_skewness: mean_of(layers.iter().map(|l| l.skewness)),
        mean_kurtosis: mean_of(layers.iter().map(|l| l.kurtosis)),
        mean_std,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub mac_cost: f64,
    pub power_eval_cost: f64,
    pub overhead_fraction: f64,
}

/// Bit-weighted cost of `macs` multiply-accumulates against `activations`
/// integer power evaluations. A model without MACs reports fraction 1.
pub fn overhead_from_counts(
    macs: u64,
    activations: u64,
    bits_w: BitWidth,
    bits_a: BitWidth,
    intpow: IntPowConfig,
) -> Overhead {
    let ba = f64::from(bits_a.bits());
    let mac_cost = macs as f64 * f64::from(bits_w.bits()) * ba;
    let per_eval = f64::from(intpow.iterations * intpow.fraction_bits) * ba * ba;
    let power_eval_cost = activations as f64 * per_eval;
    let overhead_fraction = if mac_cost == 0.0 {
        1.0
    } else {
        power_eval_cost / (mac_cost + power_eval_cost)
    };
    Overhead {
        mac_cost,
        power_eval_cost,
        overhead_fraction,
    }
}

/// MAC and activation counts from layer shapes; no inference is run.
pub fn layer_counts(model: &Model) -> Result<(u64, u64)> {
    let shapes = model.layer_shapes()?;
    let (mut macs, mut acts) = (0u64, 0u64);
    for (i, layer) in model.layers().iter().enumerate() {
        let input: u64 = shapes[i].iter().product::<usize>() as u64;
        let output: u64 = shapes[i + 1].iter().product::<usize>() as u64;
        match &layer.kind {
            LayerKind::Dense { .. } => {
                macs += input * output;
                acts += input;
            }
            LayerKind::Conv2d { kernel, .. } => {
                let taps: u64 = kernel.shape()[1..].iter().product::<usize>() as u64;
                macs += output * taps;
                acts += input;
            }
            LayerKind::BatchNorm(_) => {}
        }
    }
    Ok((macs, acts))
}

pub fn overhead_estimate(
    model: &Model,
    bits_w: BitWidth,
    bits_a: BitWidth,
    intpow: IntPowConfig,
) -> Result<Overhead> {
    intpow.validate()?;
    let (macs, acts) = layer_counts(model)?;
    if macs == 0 && acts == 0 {
        return Err(Error::structure("model has no dense or conv layer"));
    }
    Ok(overhead_from_counts(macs, acts, bits_w, bits_a, intpow))
}
