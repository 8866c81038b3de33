#![allow(dead_code)]

use powfit::inference::{QuantOp, QuantizedModel};
use powfit::model::{
    generate_dataset, train_fixture, ActivationKind, BatchNorm, Dataset, DatasetKind, Layer, Model,
    TrainConfig,
};
use powfit::quant::{BitWidth, QuantScheme};
use powfit::tensor::{Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bits(b: u32) -> BitWidth {
    BitWidth::new(b).unwrap()
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

pub fn random_bn(c: usize, rng: &mut ChaCha8Rng) -> BatchNorm {
    let sign = |r: &mut ChaCha8Rng| if r.gen_bool(0.2) { -1.0 } else { 1.0 };
    BatchNorm {
        gamma: Tensor::vector(
            (0..c)
                .map(|_| sign(rng) * rng.gen_range(0.5..1.5))
                .collect(),
        )
        .unwrap(),
        beta: Tensor::vector((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        mean: Tensor::vector((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap(),
        var: Tensor::vector((0..c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap(),
    }
}

/// `[4] → dense 8 → bn(relu) → dense 6 (silu) → dense 3`.
pub fn random_dense_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let layers = vec![
        Layer::dense(
            gaussian(&[8, 4], 0.7, &mut r),
            gaussian(&[8], 0.1, &mut r),
            ActivationKind::Identity,
        ),
        Layer::batchnorm(random_bn(8, &mut r), ActivationKind::Relu),
        Layer::dense(
            gaussian(&[6, 8], 0.5, &mut r),
            gaussian(&[6], 0.1, &mut r),
            ActivationKind::Silu,
        ),
        Layer::dense(
            gaussian(&[3, 6], 0.5, &mut r),
            gaussian(&[3], 0.1, &mut r),
            ActivationKind::Identity,
        ),
    ];
    Model::new(vec![4], layers).unwrap()
}

/// `[2,6,6] → conv 3×3 same → bn(gelu) → conv 3×3 stride 2 valid (relu) → dense 3`.
pub fn random_conv_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let layers = vec![
        Layer::conv2d(
            gaussian(&[3, 2, 3, 3], 0.4, &mut r),
            gaussian(&[3], 0.1, &mut r),
            1,
            Padding::Same,
            ActivationKind::Identity,
        ),
        Layer::batchnorm(random_bn(3, &mut r), ActivationKind::Gelu),
        Layer::conv2d(
            gaussian(&[4, 3, 3, 3], 0.3, &mut r),
            gaussian(&[4], 0.1, &mut r),
            2,
            Padding::Valid,
            ActivationKind::Relu,
        ),
        Layer::dense(
            gaussian(&[3, 16], 0.4, &mut r),
            gaussian(&[3], 0.1, &mut r),
            ActivationKind::Identity,
        ),
    ];
    Model::new(vec![2, 6, 6], layers).unwrap()
}

pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| gaussian(shape, 1.0, &mut r)).collect()
}

/// Dataset whose rows are random inputs for `model` with arbitrary labels.
pub fn random_dataset(model: &Model, n: usize, seed: u64) -> Dataset {
    let d: usize = model.input_shape().iter().product();
    let rows = random_inputs(&[d], n, seed);
    let data = rows.iter().flat_map(|t| t.data().to_vec()).collect();
    let classes: usize = model.output_shape().iter().product();
    Dataset::new(
        Tensor::matrix(n, d, data).unwrap(),
        (0..n).map(|i| i % classes).collect(),
        classes,
    )
    .unwrap()
}

/// The standard blobs fixture: `[2,16,3]`, 600 rows, default trainer.
pub fn blobs_fixture(seed: u64) -> (Model, Dataset) {
    let ds = generate_dataset(DatasetKind::blobs(), 600, seed).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    (train_fixture(&[2, 16, 3], &ds, &cfg).unwrap(), ds)
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Dequantized weight computed from raw codes and scales.
pub fn oracle_weight(qm: &QuantizedModel, layer: usize) -> Vec<f64> {
    let l = &qm.layers[layer];
    let q = &l.weights;
    let codes = q.codes.to_vec();
    let groups = q.scales.len();
    let per = codes.len() / groups;
    let b = f64::from(q.bits.signed_max());
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = q.scales[i / per];
            let c = f64::from(c);
            match q.scheme {
                QuantScheme::Uniform => c * s,
                QuantScheme::Power { a } => sign(c) * (c.abs() * s).powf(1.0 / a),
                QuantScheme::Log => {
                    if c == 0.0 {
                        0.0
                    } else {
                        sign(c) * s * 2f64.powf(c.abs() - b)
                    }
                }
            }
        })
        .collect()
}

/// Dequantize-then-float reference of the simulated quantized forward pass:
/// every input element is shifted, snapped to its unsigned code level,
/// mapped back and unshifted, then the dequantized weights are applied in
/// plain float arithmetic.
pub fn oracle_forward(qm: &QuantizedModel, input: &Tensor) -> Vec<f64> {
    let mut shape = qm.input_shape.clone();
    let mut x = input.data().to_vec();
    let full = f64::from(qm.bits_a.unsigned_max());
    for (li, l) in qm.layers.iter().enumerate() {
        let a = l.exponent;
        let c = l.input.zero_point;
        let s = l.input.scale;
        let snap = |v: f64| {
            let shifted = (v + c).max(0.0);
            let code = (shifted.powf(a) / s).round().clamp(0.0, full);
            (code * s).powf(1.0 / a) - c
        };
        let w = oracle_weight(qm, li);
        let wshape = &l.weights.shape;
        let out_ch = wshape[0];
        let pre: Vec<f64> = match l.op {
            QuantOp::Dense => {
                let xs: Vec<f64> = x.iter().map(|&v| snap(v)).collect();
                (0..out_ch)
                    .map(|o| (0..xs.len()).map(|j| w[o * xs.len() + j] * xs[j]).sum())
                    .collect()
            }
            QuantOp::Conv2d { stride, padding } => {
                let (ci, h, wd) = (shape[0], shape[1], shape[2]);
                let (kh, kw) = (wshape[2], wshape[3]);
                let (pt, pl, hp, wp) = match padding {
                    Padding::Valid => (0, 0, h, wd),
                    Padding::Same => {
                        let tot = |n: usize, k: usize| {
                            ((n.div_ceil(stride) - 1) * stride + k).saturating_sub(n)
                        };
                        let (th, tw) = (tot(h, kh), tot(wd, kw));
                        (th / 2, tw / 2, h + th, wd + tw)
                    }
                };
                let at = |ch: usize, y: usize, xx: usize| -> f64 {
                    let (yy, xw) = (y as isize - pt as isize, xx as isize - pl as isize);
                    let raw = if yy < 0 || xw < 0 || yy >= h as isize || xw >= wd as isize {
                        0.0
                    } else {
                        x[(ch * h + yy as usize) * wd + xw as usize]
                    };
                    snap(raw)
                };
                let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
                let mut out = vec![0.0; out_ch * oh * ow];
                for o in 0..out_ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ch in 0..ci {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        acc += w[((o * ci + ch) * kh + dy) * kw + dx]
                                            * at(ch, y * stride + dy, xx * stride + dx);
                                    }
                                }
                            }
                            out[(o * oh + y) * ow + xx] = acc;
                        }
                    }
                }
                shape = vec![out_ch, oh, ow];
                out
            }
        };
        if matches!(l.op, QuantOp::Dense) {
            shape = vec![out_ch];
        }
        let per = pre.len() / out_ch;
        x = pre
            .iter()
            .enumerate()
            .map(|(i, &v)| l.activation.apply(v + l.bias.data()[i / per]))
            .collect();
    }
    x
}

#[derive(Debug, Clone, Copy)]
pub enum Prior {
    Gaussian,
    Laplace,
    Uniform,
}

pub fn sample(prior: Prior, r: &mut ChaCha8Rng) -> f64 {
    match prior {
        Prior::Gaussian => Normal::new(0.0, 1.0).unwrap().sample(r),
        Prior::Laplace => {
            let u: f64 = r.gen_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
        Prior::Uniform => r.gen_range(-1.0..1.0),
    }
}

pub fn single_layer(prior: Prior, rows: usize, cols: usize, seed: u64) -> Model {
    let mut r = rng(seed);
    let w = Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| sample(prior, &mut r)).collect(),
    )
    .unwrap();
    let b = Tensor::vector(vec![0.0; rows]).unwrap();
    Model::new(
        vec![cols],
        vec![Layer::dense(w, b, ActivationKind::Identity)],
    )
    .unwrap()
}

pub fn weight_sets() -> Vec<(Prior, u32, u64)> {
    let mut sets = Vec::new();
    for prior in [Prior::Gaussian, Prior::Laplace, Prior::Uniform] {
        for b in [3, 4, 6, 8] {
            for seed in [11, 12] {
                sets.push((prior, b, seed));
            }
        }
    }
    sets
}
