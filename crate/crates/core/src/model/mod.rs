//! Feed-forward models: layer definitions, float inference and batch-norm
//! folding.

mod dataset;
mod train;

pub use dataset::{generate_dataset, Dataset, DatasetKind};
pub use train::{init_fixture, train_fixture, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, matvec, Padding, Tensor};

/// Stabilizer added to the running variance inside batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Silu,
    Gelu,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Gelu => x * normal_cdf(x),
            ActivationKind::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Gelu => normal_cdf(x) + x * normal_pdf(x),
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Identity => "identity",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "silu" => Ok(ActivationKind::Silu),
            "gelu" => Ok(ActivationKind::Gelu),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::validation(
                "activation",
                format!("unknown kind `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    /// Per-channel `(multiplier, offset)` such that `bn(x) = x * m + o`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        self.gamma
            .data()
            .iter()
            .zip(self.beta.data())
            .zip(self.mean.data().iter().zip(self.var.data()))
            .map(|((&g, &b), (&m, &v))| {
                let mul = g / (v + BN_EPSILON).sqrt();
                (mul, b - m * mul)
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    },
    BatchNorm(BatchNorm),
}

/// One layer followed by its activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: ActivationKind,
}

impl Layer {
    pub fn dense(weight: Tensor, bias: Tensor, activation: ActivationKind) -> Self {
        Self {
            kind: LayerKind::Dense { weight, bias },
            activation,
        }
    }

    pub fn conv2d(
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
        activation: ActivationKind,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            },
            activation,
        }
    }

    pub fn batchnorm(bn: BatchNorm, activation: ActivationKind) -> Self {
        Self {
            kind: LayerKind::BatchNorm(bn),
            activation,
        }
    }

    /// The weight tensor of a dense or conv layer.
    pub fn weight(&self) -> Option<&Tensor> {
        match &self.kind {
            LayerKind::Dense { weight, .. } => Some(weight),
            LayerKind::Conv2d { kernel, .. } => Some(kernel),
            LayerKind::BatchNorm(_) => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match &self.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => Some(bias),
            LayerKind::BatchNorm(_) => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        self.weight().is_some()
    }

    /// Output shape for `input`, validating compatibility.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense { weight, bias } => {
                let n_in: usize = input.iter().product();
                if weight.rank() != 2 || weight.shape()[1] != n_in {
                    return Err(Error::dim(format!(
                        "dense weight {:?} cannot consume input {:?}",
                        weight.shape(),
                        input
                    )));
                }
                if bias.shape() != [weight.shape()[0]] {
                    return Err(Error::dim(format!(
                        "dense bias {:?} does not match {} outputs",
                        bias.shape(),
                        weight.shape()[0]
                    )));
                }
                Ok(vec![weight.shape()[0]])
            }
            LayerKind::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                if kernel.rank() != 4 || input.len() != 3 || input[0] != kernel.shape()[1] {
                    return Err(Error::dim(format!(
                        "conv kernel {:?} cannot consume input {:?}",
                        kernel.shape(),
                        input
                    )));
                }
                if bias.shape() != [kernel.shape()[0]] {
                    return Err(Error::dim("conv bias extent differs from output channels"));
                }
                if *stride == 0 {
                    return Err(Error::dim("conv stride must be positive"));
                }
                let (kh, kw) = (kernel.shape()[2], kernel.shape()[3]);
                let (t, b, l, r) =
                    crate::tensor::padding_amounts(input[1], input[2], kh, kw, *stride, *padding);
                let (hp, wp) = (input[1] + t + b, input[2] + l + r);
                if kh > hp || kw > wp {
                    return Err(Error::dim("conv kernel larger than padded input"));
                }
                Ok(vec![
                    kernel.shape()[0],
                    (hp - kh) / stride + 1,
                    (wp - kw) / stride + 1,
                ])
            }
            LayerKind::BatchNorm(bn) => {
                let c = bn.channels();
                if [&bn.beta, &bn.mean, &bn.var]
                    .iter()
                    .any(|t| t.shape() != [c])
                {
                    return Err(Error::dim("batchnorm parameter extents differ"));
                }
                if bn.var.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::validation("var", "batchnorm variance must be >= 0"));
                }
                if input.first().copied() != Some(c) {
                    return Err(Error::dim(format!(
                        "batchnorm over {} channels cannot consume input {:?}",
                        c, input
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Layer output before the activation.
    pub fn pre_activation(&self, input: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Dense { weight, bias } => {
                let mut out = matvec(weight, input.data())?;
                for (o, b) in out.iter_mut().zip(bias.data()) {
                    *o += b;
                }
                Tensor::vector(out)
            }
            LayerKind::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let y = conv2d(input, kernel, *stride, *padding)?;
                add_channel_bias(y, bias.data())
            }
            LayerKind::BatchNorm(bn) => {
                let shape = input.shape().to_vec();
                if shape.first().copied() != Some(bn.channels()) {
                    return Err(Error::dim("batchnorm channel mismatch"));
                }
                let affine = bn.affine();
                let per = input.len() / bn.channels().max(1);
                let data = input
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let (m, o) = affine[i / per.max(1)];
                        x * m + o
                    })
                    .collect();
                Tensor::new(shape, data)
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let act = self.activation;
        self.pre_activation(input)?.map(|v| act.apply(v))
    }
}

/// Adds `bias[c]` to every element of channel `c` of a `C×…` tensor.
pub(crate) fn add_channel_bias(t: Tensor, bias: &[f64]) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    let per = t.len() / bias.len().max(1);
    let mut data = t.into_data();
    for (i, v) in data.iter_mut().enumerate() {
        *v += bias[i / per.max(1)];
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
        };
        model.layer_shapes()?;
        if model.weighted_count() == 0 {
            return Err(Error::structure(
                "model needs at least one dense or conv layer",
            ));
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of each layer followed by the final output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .ok()
            .and_then(|mut s| s.pop())
            .unwrap_or_default()
    }

    /// Number of dense/conv layers.
    pub fn weighted_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().filter_map(Layer::weight)
    }

    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let n: usize = self.input_shape.iter().product();
        if input.shape() != self.input_shape.as_slice() && !(input.rank() == 1 && input.len() == n)
        {
            return Err(Error::dim(format!(
                "input {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward_float(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.reshape(self.input_shape.clone())?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Float forward pass recording the input of every dense/conv layer.
    pub fn weighted_layer_inputs(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        let mut x = input.reshape(self.input_shape.clone())?;
        let mut seen = Vec::with_capacity(self.weighted_count());
        for layer in &self.layers {
            if layer.is_weighted() {
                seen.push(x.clone());
            }
            x = layer.forward(&x)?;
        }
        Ok(seen)
    }

    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        Model::new(self.input_shape.clone(), layers)
    }

    pub fn fold_batchnorm(&self) -> Result<Model> {
        self.fold_batchnorm_with_stats().map(|(m, _)| m)
    }

    /// Folds every batch-norm into its preceding dense/conv layer.
    ///
    /// Alongside the folded model, returns for each dense/conv layer of the
    /// folded model the batch-norm (and the activation applied after it)
    /// that produced that layer's input, if any.
    pub fn fold_batchnorm_with_stats(&self) -> Result<(Model, Vec<Option<InputStats>>)> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut feeding_bn: Vec<Option<InputStats>> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::BatchNorm(bn) => {
                    let prev = layers
                        .last_mut()
                        .filter(|p| p.is_weighted() && p.activation == ActivationKind::Identity);
                    let Some(prev) = prev else {
                        return Err(Error::structure(format!(
                            "batchnorm at layer {idx} has no dense/conv predecessor with identity activation"
                        )));
                    };
                    fold_into(prev, bn)?;
                    prev.activation = layer.activation;
                    let last = feeding_bn.len() - 1;
                    feeding_bn[last] = Some(InputStats {
                        bn: bn.clone(),
                        activation: layer.activation,
                    });
                }
                _ => {
                    layers.push(layer.clone());
                    if layer.is_weighted() {
                        feeding_bn.push(None);
                    }
                }
            }
        }
        // feeding_bn[i] currently describes the BN after weighted layer i;
        // shift by one so entry i describes the BN before weighted layer i.
        let mut before = vec![None];
        before.extend(
            feeding_bn
                .into_iter()
                .take(layers.iter().filter(|l| l.is_weighted()).count() - 1),
        );
        let model = self.with_layers(layers)?;
        Ok((model, before))
    }
}

/// Batch-norm statistics describing the distribution of a layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStats {
    pub bn: BatchNorm,
    /// Activation applied to the batch-norm output.
    pub activation: ActivationKind,
}

fn fold_into(layer: &mut Layer, bn: &BatchNorm) -> Result<()> {
    let affine = bn.affine();
    let (weight, bias) = match &mut layer.kind {
        LayerKind::Dense { weight, bias } => (weight, bias),
        LayerKind::Conv2d { kernel, bias, .. } => (kernel, bias),
        LayerKind::BatchNorm(_) => unreachable!("filtered by caller"),
    };
    let out_ch = weight.shape()[0];
    if out_ch != affine.len() {
        return Err(Error::dim(format!(
            "batchnorm over {} channels follows a layer with {} outputs",
            affine.len(),
            out_ch
        )));
    }
    let per = weight.len() / out_ch.max(1);
    let w: Vec<f64> = weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * affine[i / per].0)
        .collect();
    let b: Vec<f64> = bias
        .data()
        .iter()
        .zip(&affine)
        .map(|(&b, &(m, o))| b * m + o)
        .collect();
    *weight = Tensor::new(weight.shape().to_vec(), w)?;
    *bias = Tensor::new(bias.shape().to_vec(), b)?;
    Ok(())
}

/// Index of the largest logit, ties toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy_with<F>(dataset: &Dataset, mut predict: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut correct = 0usize;
    for (row, &label) in dataset.rows().zip(dataset.labels()) {
        let out = predict(&row)?;
        if out.len() != dataset.class_count() {
            return Err(Error::dim(format!(
                "model emits {} logits for {} classes",
                out.len(),
                dataset.class_count()
            )));
        }
        if argmax(out.data()) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}

pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    accuracy_with(dataset, |x| model.forward_float(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_dense(w: f64, b: f64, act: ActivationKind) -> Model {
        Model::new(
            vec![1],
            vec![Layer::dense(
                Tensor::matrix(1, 1, vec![w]).unwrap(),
                Tensor::vector(vec![b]).unwrap(),
                act,
            )],
        )
        .unwrap()
    }

    fn bn(gamma: f64, beta: f64, mean: f64, var: f64) -> BatchNorm {
        let v = |x| Tensor::vector(vec![x]).unwrap();
        BatchNorm {
            gamma: v(gamma),
            beta: v(beta),
            mean: v(mean),
            var: v(var),
        }
    }

    #[test]
    fn single_dense_forward() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let m = scalar_dense(1.0, 0.0, ActivationKind::Identity);
        assert_eq!(m.forward_float(&x).unwrap().data(), &[3.0]);
        let m = scalar_dense(1.0, 0.0, ActivationKind::Relu);
        let x = Tensor::vector(vec![-2.0]).unwrap();
        assert_eq!(m.forward_float(&x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn activations() {
        assert!((ActivationKind::Silu.apply(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        // exact erf form: gelu(1) = Φ(1)
        assert!((ActivationKind::Gelu.apply(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        for kind in [ActivationKind::Silu, ActivationKind::Gelu] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                let h = 1e-6;
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                assert!((fd - kind.derivative(x)).abs() < 1e-7, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn fold_identity_bn_is_noop() {
        let m = Model::new(
            vec![1],
            vec![
                Layer::dense(
                    Tensor::matrix(1, 1, vec![0.75]).unwrap(),
                    Tensor::vector(vec![-0.5]).unwrap(),
                    ActivationKind::Identity,
                ),
                Layer::batchnorm(
                    bn(1.0, 0.0, 0.0, 1.0 - BN_EPSILON),
                    ActivationKind::Identity,
                ),
            ],
        )
        .unwrap();
        let folded = m.fold_batchnorm().unwrap();
        assert_eq!(folded.layers().len(), 1);
        assert_eq!(folded.layers()[0], m.layers()[0]);
    }

    #[test]
    fn fold_hand_example() {
        // W=[[1]], b=[0], BN(γ=2, β=1, mean=0.5, var=1) with ε_bn removed
        let m = Model::new(
            vec![1],
            vec![
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    Tensor::vector(vec![0.0]).unwrap(),
                    ActivationKind::Identity,
                ),
                Layer::batchnorm(bn(2.0, 1.0, 0.5, 1.0 - BN_EPSILON), ActivationKind::Relu),
            ],
        )
        .unwrap();
        let (folded, stats) = m.fold_batchnorm_with_stats().unwrap();
        let layer = &folded.layers()[0];
        assert!((layer.weight().unwrap().data()[0] - 2.0).abs() < 1e-12);
        assert!(layer.bias().unwrap().data()[0].abs() < 1e-12);
        assert_eq!(layer.activation, ActivationKind::Relu);
        assert_eq!(stats, vec![None]);
    }

    #[test]
    fn fold_rejects_orphan_bn() {
        let m = Model::new(
            vec![1],
            vec![
                Layer::batchnorm(bn(1.0, 0.0, 0.0, 1.0), ActivationKind::Identity),
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    Tensor::vector(vec![0.0]).unwrap(),
                    ActivationKind::Identity,
                ),
            ],
        )
        .unwrap();
        assert!(matches!(m.fold_batchnorm(), Err(Error::Structure(_))));

        let m = Model::new(
            vec![1],
            vec![
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    Tensor::vector(vec![0.0]).unwrap(),
                    ActivationKind::Relu,
                ),
                Layer::batchnorm(bn(1.0, 0.0, 0.0, 1.0), ActivationKind::Identity),
            ],
        )
        .unwrap();
        assert!(matches!(m.fold_batchnorm(), Err(Error::Structure(_))));
    }

    #[test]
    fn model_validation() {
        let bad = Model::new(
            vec![2],
            vec![Layer::dense(
                Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(),
                Tensor::vector(vec![0.0]).unwrap(),
                ActivationKind::Identity,
            )],
        );
        assert!(matches!(bad, Err(Error::Dimension(_))));
        let empty = Model::new(vec![1], vec![]);
        assert!(matches!(empty, Err(Error::Structure(_))));
        let neg_var = Model::new(
            vec![1],
            vec![
                Layer::dense(
                    Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                    Tensor::vector(vec![0.0]).unwrap(),
                    ActivationKind::Identity,
                ),
                Layer::batchnorm(bn(1.0, 0.0, 0.0, -1.0), ActivationKind::Identity),
            ],
        );
        assert!(neg_var.is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
