//! Deterministic full-batch gradient descent for small MLP fixtures.
//!
//! The first hidden layer is followed by a batch-norm (batch statistics in
//! training, final full-batch statistics stored in the returned model), so
//! every fixture carries the statistics needed for data-free activation
//! ranges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ActivationKind, BatchNorm, Dataset, Layer, Model, BN_EPSILON};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Activation of every hidden layer.
    pub activation: ActivationKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            seed: 0,
            activation: ActivationKind::Relu,
        }
    }
}

#[derive(Clone)]
struct DenseParams {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

struct Params {
    dense: Vec<DenseParams>,
    // (gamma, beta) of the batch-norm after the first dense layer
    bn: Option<(Vec<f64>, Vec<f64>)>,
}

struct BnCache {
    xhat: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct Pass {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    bn: Option<BnCache>,
    logits: Vec<f64>,
}

fn validate_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::validation(
            "arch",
            "need at least input and output sizes, all positive",
        ));
    }
    Ok(())
}

fn init_params(arch: &[usize], seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = arch
        .windows(2)
        .map(|pair| {
            let (n_in, n_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive std");
            DenseParams {
                w: (0..n_in * n_out).map(|_| normal.sample(&mut rng)).collect(),
                b: vec![0.0; n_out],
                n_in,
                n_out,
            }
        })
        .collect();
    let bn = (arch.len() >= 3).then(|| (vec![1.0; arch[1]], vec![0.0; arch[1]]));
    Params { dense, bn }
}

fn affine(input: &[f64], rows: usize, p: &DenseParams) -> Vec<f64> {
    let mut out = vec![0.0; rows * p.n_out];
    for r in 0..rows {
        let x = &input[r * p.n_in..(r + 1) * p.n_in];
        for o in 0..p.n_out {
            let w = &p.w[o * p.n_in..(o + 1) * p.n_in];
            out[r * p.n_out + o] = p.b[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn forward(params: &Params, x: &[f64], rows: usize, act: ActivationKind) -> Pass {
    let last = params.dense.len() - 1;
    let mut inputs = Vec::with_capacity(params.dense.len());
    let mut pre_all = Vec::with_capacity(params.dense.len());
    let mut bn_cache = None;
    let mut a = x.to_vec();
    for (l, p) in params.dense.iter().enumerate() {
        let mut z = affine(&a, rows, p);
        if l == 0 {
            if let Some((gamma, beta)) = &params.bn {
                let c = p.n_out;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += z[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for j in 0..c {
                        let d = z[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let mut xhat = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        let h = (z[r * c + j] - mean[j]) / (var[j] + BN_EPSILON).sqrt();
                        xhat[r * c + j] = h;
                        z[r * c + j] = gamma[j] * h + beta[j];
                    }
                }
                bn_cache = Some(BnCache { xhat, mean, var });
            }
        }
        inputs.push(a);
        if l < last {
            a = z.iter().map(|&v| act.apply(v)).collect();
        } else {
            a = z.clone();
        }
        pre_all.push(z);
    }
    Pass {
        inputs,
        pre: pre_all,
        bn: bn_cache,
        logits: a,
    }
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let rows = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[label];
        for k in 0..classes {
            let p = (row[k] - log_sum).exp();
            grad[r * classes + k] = (p - f64::from(u8::from(k == label))) / rows as f64;
        }
    }
    (loss / rows as f64, grad)
}

fn step(
    params: &mut Params,
    pass: &Pass,
    mut grad: Vec<f64>,
    rows: usize,
    lr: f64,
    act: ActivationKind,
) {
    for l in (0..params.dense.len()).rev() {
        let p = &params.dense[l];
        let input = &pass.inputs[l];
        if l == 0 {
            if let (Some((gamma, beta)), Some(cache)) = (&mut params.bn, &pass.bn) {
                let c = p.n_out;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let g = grad[r * c + j];
                        let h = cache.xhat[r * c + j];
                        dgamma[j] += g * h;
                        dbeta[j] += g;
                        sum_dxhat[j] += g * gamma[j];
                        sum_dxhat_xhat[j] += g * gamma[j] * h;
                    }
                }
                let n = rows as f64;
                for r in 0..rows {
                    for j in 0..c {
                        let dxhat = grad[r * c + j] * gamma[j];
                        let h = cache.xhat[r * c + j];
                        let inv_std = 1.0 / (cache.var[j] + BN_EPSILON).sqrt();
                        grad[r * c + j] =
                            inv_std / n * (n * dxhat - sum_dxhat[j] - h * sum_dxhat_xhat[j]);
                    }
                }
                for j in 0..c {
                    gamma[j] -= lr * dgamma[j];
                    beta[j] -= lr * dbeta[j];
                }
            }
        }
        let mut dw = vec![0.0; p.w.len()];
        let mut db = vec![0.0; p.n_out];
        for r in 0..rows {
            let x = &input[r * p.n_in..(r + 1) * p.n_in];
            for o in 0..p.n_out {
                let g = grad[r * p.n_out + o];
                db[o] += g;
                for (dwi, &xi) in dw[o * p.n_in..(o + 1) * p.n_in].iter_mut().zip(x) {
                    *dwi += g * xi;
                }
            }
        }
        if l > 0 {
            let prev_pre = &pass.pre[l - 1];
            let mut next = vec![0.0; rows * p.n_in];
            for r in 0..rows {
                for o in 0..p.n_out {
                    let g = grad[r * p.n_out + o];
                    let w = &p.w[o * p.n_in..(o + 1) * p.n_in];
                    for (i, &wi) in w.iter().enumerate() {
                        next[r * p.n_in + i] += g * wi;
                    }
                }
            }
            for (g, &z) in next.iter_mut().zip(prev_pre) {
                *g *= act.derivative(z);
            }
            grad = next;
        }
        let p = &mut params.dense[l];
        p.w.iter_mut().zip(&dw).for_each(|(w, d)| *w -= lr * d);
        p.b.iter_mut().zip(&db).for_each(|(b, d)| *b -= lr * d);
    }
}

/// Stored parameters are rounded to `f32`, the on-disk precision.
fn stored(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

fn to_model(params: &Params, x: &[f64], rows: usize, act: ActivationKind) -> Result<Model> {
    let pass = forward(params, x, rows, act);
    let last = params.dense.len() - 1;
    let mut layers = Vec::new();
    for (l, p) in params.dense.iter().enumerate() {
        let weight = Tensor::matrix(p.n_out, p.n_in, stored(&p.w))?;
        let bias = Tensor::vector(stored(&p.b))?;
        let layer_act = if l == last {
            ActivationKind::Identity
        } else {
            act
        };
        match (l, &params.bn, &pass.bn) {
            (0, Some((gamma, beta)), Some(cache)) => {
                layers.push(Layer::dense(weight, bias, ActivationKind::Identity));
                layers.push(Layer::batchnorm(
                    BatchNorm {
                        gamma: Tensor::vector(stored(gamma))?,
                        beta: Tensor::vector(stored(beta))?,
                        mean: Tensor::vector(stored(&cache.mean))?,
                        var: Tensor::vector(stored(&cache.var))?,
                    },
                    layer_act,
                ));
            }
            _ => layers.push(Layer::dense(weight, bias, layer_act)),
        }
    }
    Model::new(vec![params.dense[0].n_in], layers)
}

/// The untrained model `train_fixture` starts from.
pub fn init_fixture(arch: &[usize], dataset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    train_fixture(arch, dataset, &TrainConfig { epochs: 0, ..*cfg })
}

/// Trains an MLP with layer sizes `arch` (input first, classes last).
pub fn train_fixture(arch: &[usize], dataset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    validate_arch(arch)?;
    if dataset.is_empty() {
        return Err(Error::validation(
            "dataset",
            "cannot train on an empty dataset",
        ));
    }
    if arch[0] != dataset.dims() || arch[arch.len() - 1] != dataset.class_count() {
        return Err(Error::dim(format!(
            "arch {:?} does not match dataset ({} dims, {} classes)",
            arch,
            dataset.dims(),
            dataset.class_count()
        )));
    }
    let rows = dataset.len();
    let x = dataset.features().data();
    let mut params = init_params(arch, cfg.seed);
    for epoch in 0..cfg.epochs {
        let pass = forward(&params, x, rows, cfg.activation);
        let (loss, grad) = softmax_xent(&pass.logits, dataset.labels(), dataset.class_count());
        if !loss.is_finite() {
            return Err(Error::Training { epoch, loss });
        }
        step(&mut params, &pass, grad, rows, cfg.lr, cfg.activation);
    }
    to_model(&params, x, rows, cfg.activation).map_err(|e| match e {
        Error::NonFinite { value, .. } => Error::Training {
            epoch: cfg.epochs,
            loss: value,
        },
        other => other,
    })
}
