//! Power-function, uniform and logarithmic quantizers.
//!
//! A power quantizer with exponent `a` maps each weight `w` to
//! `sign(w)·|w|^a`, scales the group so its largest magnitude lands on the
//! signed full-scale code `B = 2^(b-1) - 1`, and rounds half away from zero.
//! De-quantization applies the inverse power to `code·scale`. Uniform
//! quantization is the `a = 1` member of the family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Largest exponent accepted by the power quantizer.
pub const MAX_EXPONENT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u32);

impl BitWidth {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::validation("bits", format!("{bits} outside [2, 16]")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// Signed full scale `2^(b-1) - 1`.
    pub fn signed_max(self) -> i32 {
        (1 << (self.0 - 1)) - 1
    }

    /// Unsigned full scale `2^b - 1`.
    pub fn unsigned_max(self) -> i32 {
        (1 << self.0) - 1
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        BitWidth::new(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum QuantScheme {
    Uniform,
    Power { a: f64 },
    Log,
}

impl QuantScheme {
    /// Exponent of the power map; uniform is `a = 1`, log has none.
    pub fn exponent(self) -> Option<f64> {
        match self {
            QuantScheme::Uniform => Some(1.0),
            QuantScheme::Power { a } => Some(a),
            QuantScheme::Log => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Uniform => "uniform",
            QuantScheme::Power { .. } => "power",
            QuantScheme::Log => "log",
        }
    }

    fn validate(self) -> Result<()> {
        if let QuantScheme::Power { a } = self {
            check_exponent(a)?;
        }
        Ok(())
    }
}

pub(crate) fn check_exponent(a: f64) -> Result<()> {
    if !(a > 0.0 && a <= MAX_EXPONENT) {
        return Err(Error::domain(format!(
            "exponent {a} outside (0, {MAX_EXPONENT}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per index of `axis` (the output-channel axis, 0 for every
    /// layer kind here).
    PerChannel {
        axis: usize,
    },
}

impl Granularity {
    pub fn per_channel() -> Self {
        Granularity::PerChannel { axis: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signedness {
    Signed,
    Unsigned,
}

/// Integer code storage, sized by bit width and signedness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Codes {
    I8(Vec<i8>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl Codes {
    fn pack(values: Vec<i32>, bits: BitWidth, signedness: Signedness) -> Self {
        match (signedness, bits.bits() <= 8) {
            (Signedness::Signed, true) => Codes::I8(values.into_iter().map(|v| v as i8).collect()),
            (Signedness::Unsigned, true) => {
                Codes::U8(values.into_iter().map(|v| v as u8).collect())
            }
            _ => Codes::I32(values),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Codes::I8(v) => v.len(),
            Codes::U8(v) => v.len(),
            Codes::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> i32 {
        match self {
            Codes::I8(v) => i32::from(v[i]),
            Codes::U8(v) => i32::from(v[i]),
            Codes::I32(v) => v[i],
        }
    }

    pub fn to_vec(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Codes,
    /// One positive scale per group. For power schemes, powered magnitude
    /// per code unit; for the log scheme, the group's largest magnitude.
    pub scales: Vec<f64>,
    pub scheme: QuantScheme,
    pub bits: BitWidth,
    pub signedness: Signedness,
    pub granularity: Granularity,
}

impl QuantizedTensor {
    /// Scale-group index of each flat element.
    pub fn groups(&self) -> Vec<usize> {
        group_index(&self.shape, self.granularity)
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    /// Rebuilds a quantized tensor from stored parts, checking invariants.
    pub fn from_parts(
        shape: Vec<usize>,
        codes: Vec<i32>,
        scales: Vec<f64>,
        scheme: QuantScheme,
        bits: BitWidth,
        signedness: Signedness,
        granularity: Granularity,
    ) -> Result<Self> {
        scheme.validate()?;
        let n: usize = shape.iter().product();
        if codes.len() != n {
            return Err(Error::dim(format!(
                "{} codes for shape {:?}",
                codes.len(),
                shape
            )));
        }
        let expected_groups = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { axis } => *shape
                .get(axis)
                .ok_or_else(|| Error::dim("per-channel axis outside tensor rank"))?,
        };
        if scales.len() != expected_groups {
            return Err(Error::validation(
                "scales",
                format!("expected {expected_groups} scales, got {}", scales.len()),
            ));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::validation("scales", "every scale must be positive"));
        }
        let (lo, hi) = match signedness {
            Signedness::Signed => (-bits.signed_max(), bits.signed_max()),
            Signedness::Unsigned => (0, bits.unsigned_max()),
        };
        if let Some(bad) = codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(Error::validation(
                "codes",
                format!("code {bad} outside [{lo}, {hi}]"),
            ));
        }
        Ok(Self {
            shape,
            codes: Codes::pack(codes, bits, signedness),
            scales,
            scheme,
            bits,
            signedness,
            granularity,
        })
    }
}

pub(crate) fn group_index(shape: &[usize], granularity: Granularity) -> Vec<usize> {
    let n: usize = shape.iter().product();
    match granularity {
        Granularity::PerTensor => vec![0; n],
        Granularity::PerChannel { axis } => {
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[axis];
            (0..n).map(|i| (i / inner.max(1)) % extent.max(1)).collect()
        }
    }
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `sign(x)·|x|^a`.
pub fn signed_pow(x: f64, a: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(a)
    }
}

/// The continuous power automorphism `x ↦ x^a` of the positive reals.
pub fn continuous_power(x: f64, a: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("power map needs x > 0, got {x}")));
    }
    check_exponent(a)?;
    Ok(x.powf(a))
}

pub fn quantize_tensor(
    w: &Tensor,
    scheme: QuantScheme,
    bits: BitWidth,
    granularity: Granularity,
) -> Result<QuantizedTensor> {
    if w.is_empty() {
        return Err(Error::domain("cannot quantize an empty tensor"));
    }
    scheme.validate()?;
    if let Granularity::PerChannel { axis } = granularity {
        if axis >= w.rank() {
            return Err(Error::dim(format!(
                "per-channel axis {axis} outside rank {}",
                w.rank()
            )));
        }
    }
    let groups = group_index(w.shape(), granularity);
    let group_count = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => w.shape()[axis],
    };
    let full = bits.signed_max();
    let full_f = f64::from(full);
    let mut max_abs = vec![0.0_f64; group_count];
    for (&v, &g) in w.data().iter().zip(&groups) {
        max_abs[g] = max_abs[g].max(v.abs());
    }

    let (codes, scales) = match scheme {
        QuantScheme::Uniform | QuantScheme::Power { .. } => {
            let a = scheme.exponent().expect("power family");
            let peak: Vec<f64> = max_abs.iter().map(|&m| m.powf(a)).collect();
            let codes = w
                .data()
                .iter()
                .zip(&groups)
                .map(|(&v, &g)| {
                    if peak[g] == 0.0 {
                        return 0;
                    }
                    let q = round_half_away(signed_pow(v, a) / peak[g] * full_f);
                    q.clamp(-full_f, full_f) as i32
                })
                .collect();
            let scales = peak
                .iter()
                .map(|&p| if p > 0.0 { p / full_f } else { 1.0 })
                .collect();
            (codes, scales)
        }
        QuantScheme::Log => {
            let codes = w
                .data()
                .iter()
                .zip(&groups)
                .map(|(&v, &g)| {
                    if v == 0.0 || max_abs[g] == 0.0 {
                        return 0;
                    }
                    let e = round_half_away((max_abs[g] / v.abs()).log2()).clamp(0.0, full_f);
                    let magnitude = full - e as i32;
                    if v < 0.0 {
                        -magnitude
                    } else {
                        magnitude
                    }
                })
                .collect();
            let scales = max_abs
                .iter()
                .map(|&m| if m > 0.0 { m } else { 1.0 })
                .collect();
            (codes, scales)
        }
    };
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        codes: Codes::pack(codes, bits, Signedness::Signed),
        scales,
        scheme,
        bits,
        signedness: Signedness::Signed,
        granularity,
    })
}

/// Reconstruction of a single code within a group of scale `scale`.
pub fn dequantize_code(code: i32, scale: f64, scheme: QuantScheme, bits: BitWidth) -> f64 {
    if code == 0 {
        return 0.0;
    }
    match scheme {
        QuantScheme::Uniform => f64::from(code) * scale,
        QuantScheme::Power { a } => signed_pow(f64::from(code) * scale, 1.0 / a),
        QuantScheme::Log => {
            let magnitude = code.abs() - bits.signed_max();
            f64::from(code.signum()) * scale * 2f64.powi(magnitude)
        }
    }
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Tensor {
    let groups = q.groups();
    let data = groups
        .iter()
        .enumerate()
        .map(|(i, &g)| dequantize_code(q.codes.get(i), q.scales[g], q.scheme, q.bits))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("finite reconstruction")
}

/// Unsigned power quantization of non-negative activations over `[0, range]`.
pub fn quantize_unsigned(
    x: &Tensor,
    a: f64,
    bits: BitWidth,
    range: f64,
) -> Result<QuantizedTensor> {
    check_exponent(a)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::domain(format!(
            "activation range must be > 0, got {range}"
        )));
    }
    if let Some(index) = x.data().iter().position(|&v| v < 0.0) {
        return Err(Error::domain(format!(
            "negative activation {} at index {index}",
            x.data()[index]
        )));
    }
    let full = f64::from(bits.unsigned_max());
    let scale = unsigned_scale(range, a, bits);
    let codes = x
        .data()
        .iter()
        .map(|&v| round_half_away(v.powf(a) / scale).clamp(0.0, full) as i32)
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes: Codes::pack(codes, bits, Signedness::Unsigned),
        scales: vec![scale],
        scheme: if a == 1.0 {
            QuantScheme::Uniform
        } else {
            QuantScheme::Power { a }
        },
        bits,
        signedness: Signedness::Unsigned,
        granularity: Granularity::PerTensor,
    })
}

/// `range^a / (2^b - 1)`: powered activation units per unsigned code.
pub fn unsigned_scale(range: f64, a: f64, bits: BitWidth) -> f64 {
    range.powf(a) / f64::from(bits.unsigned_max())
}

/// `‖x‖_p` for p ∈ {1, 2}.
pub fn lp_norm(values: impl Iterator<Item = f64>, p: Norm) -> f64 {
    match p {
        Norm::L1 => values.map(f64::abs).sum(),
        Norm::L2 => values.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[default]
    #[serde(rename = "2")]
    L2,
}

impl Norm {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(Error::validation(
                "p",
                format!("norm must be 1 or 2, got {other}"),
            )),
        }
    }

    pub fn p(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

/// `‖W − Q⁻¹(Q(W))‖_p` for one tensor.
pub fn tensor_error(
    w: &Tensor,
    scheme: QuantScheme,
    bits: BitWidth,
    gran: Granularity,
    p: Norm,
) -> Result<f64> {
    let q = quantize_tensor(w, scheme, bits, gran)?;
    let rec = dequantize_tensor(&q);
    Ok(lp_norm(
        w.data().iter().zip(rec.data()).map(|(a, b)| a - b),
        p,
    ))
}

/// Per-layer reconstruction errors of every dense/conv weight.
pub fn layer_errors(
    model: &Model,
    scheme: QuantScheme,
    bits: BitWidth,
    gran: Granularity,
    p: Norm,
) -> Result<Vec<f64>> {
    model
        .weights()
        .map(|w| tensor_error(w, scheme, bits, gran, p))
        .collect()
}

/// Weight reconstruction error summed over all dense/conv layers.
pub fn reconstruction_error(
    model: &Model,
    scheme: QuantScheme,
    bits: BitWidth,
    gran: Granularity,
    p: Norm,
) -> Result<f64> {
    Ok(layer_errors(model, scheme, bits, gran, p)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(bits: u32) -> BitWidth {
        BitWidth::new(bits).unwrap()
    }

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn bit_width_bounds() {
        assert!(BitWidth::new(1).is_err());
        assert!(BitWidth::new(17).is_err());
        assert_eq!(b(3).signed_max(), 3);
        assert_eq!(b(8).signed_max(), 127);
        assert_eq!(b(8).unsigned_max(), 255);
        assert_eq!(b(2).signed_max(), 1);
    }

    #[test]
    fn continuous_power_cases() {
        assert_eq!(continuous_power(3.7, 1.0).unwrap(), 3.7);
        let lhs = continuous_power(2.0, 0.7).unwrap() * continuous_power(3.0, 0.7).unwrap();
        let rhs = continuous_power(6.0, 0.7).unwrap();
        assert!((lhs - rhs).abs() / rhs < 1e-12);
        assert!(continuous_power(0.0, 0.5).is_err());
        assert!(continuous_power(-1.0, 0.5).is_err());
        assert!(continuous_power(1.0, 0.0).is_err());
        assert!(continuous_power(1.0, 4.5).is_err());
    }

    #[test]
    fn uniform_hand_example() {
        let q = quantize_tensor(
            &v(&[0.5, -1.0, 0.25]),
            QuantScheme::Uniform,
            b(3),
            Granularity::PerTensor,
        )
        .unwrap();
        assert_eq!(q.codes.to_vec(), vec![2, -3, 1]);
        assert_eq!(q.scales, vec![1.0 / 3.0]);
        assert!(matches!(q.codes, Codes::I8(_)));
    }

    #[test]
    fn power_hand_example() {
        let q = quantize_tensor(
            &v(&[0.25, -1.0]),
            QuantScheme::Power { a: 0.5 },
            b(3),
            Granularity::PerTensor,
        )
        .unwrap();
        assert_eq!(q.codes.to_vec(), vec![2, -3]);
        assert_eq!(q.scales, vec![1.0 / 3.0]);
        let r = dequantize_tensor(&q);
        assert!((r.data()[0] - 4.0 / 9.0).abs() < 1e-12);
        assert!((r.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dequantize_uniform_hand_example() {
        let q = QuantizedTensor::from_parts(
            vec![3],
            vec![2, -3, 1],
            vec![1.0 / 3.0],
            QuantScheme::Power { a: 1.0 },
            b(3),
            Signedness::Signed,
            Granularity::PerTensor,
        )
        .unwrap();
        let r = dequantize_tensor(&q);
        let expect = [2.0 / 3.0, -1.0, 1.0 / 3.0];
        for (x, y) in r.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn max_element_hits_full_scale() {
        for a in [0.3, 0.5, 1.0, 1.7, 4.0] {
            let q = quantize_tensor(
                &v(&[0.01, -0.73, 0.2]),
                QuantScheme::Power { a },
                b(5),
                Granularity::PerTensor,
            )
            .unwrap();
            assert_eq!(q.codes.get(1), -15);
        }
    }

    #[test]
    fn zero_code_is_exact_zero() {
        for scheme in [
            QuantScheme::Uniform,
            QuantScheme::Power { a: 0.6 },
            QuantScheme::Log,
        ] {
            assert_eq!(dequantize_code(0, 0.37, scheme, b(4)), 0.0);
        }
    }

    #[test]
    fn all_zero_group_sentinel() {
        let w = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, -0.5]).unwrap();
        for scheme in [QuantScheme::Power { a: 0.7 }, QuantScheme::Log] {
            let q = quantize_tensor(&w, scheme, b(4), Granularity::per_channel()).unwrap();
            assert_eq!(q.scales[0], 1.0);
            assert_eq!(&q.codes.to_vec()[..2], &[0, 0]);
            assert_eq!(&dequantize_tensor(&q).data()[..2], &[0.0, 0.0]);
        }
    }

    #[test]
    fn rejects_bad_exponent_and_empty() {
        let w = v(&[1.0]);
        assert!(quantize_tensor(
            &w,
            QuantScheme::Power { a: 0.0 },
            b(4),
            Granularity::PerTensor
        )
        .is_err());
        assert!(quantize_tensor(
            &w,
            QuantScheme::Power { a: -1.0 },
            b(4),
            Granularity::PerTensor
        )
        .is_err());
        let e = Tensor::zeros(vec![0]);
        assert!(quantize_tensor(&e, QuantScheme::Uniform, b(4), Granularity::PerTensor).is_err());
    }

    #[test]
    fn log_scheme_codes() {
        // B = 7; magnitudes 1, 1/2, 1/8, 1/300 → exponents 0, 1, 3, 7 (clamped)
        let w = v(&[1.0, -0.5, 0.125, 1.0 / 300.0, 0.0]);
        let q = quantize_tensor(&w, QuantScheme::Log, b(4), Granularity::PerTensor).unwrap();
        assert_eq!(q.codes.to_vec(), vec![7, -6, 4, 0, 0]);
        let r = dequantize_tensor(&q);
        assert_eq!(r.data(), &[1.0, -0.5, 0.125, 0.0, 0.0]);
    }

    #[test]
    fn unsigned_cases() {
        let q = quantize_unsigned(&v(&[0.5]), 1.0, b(4), 1.0).unwrap();
        assert_eq!(q.codes.to_vec(), vec![8]);
        let r = dequantize_tensor(&q);
        assert!((r.data()[0] - 8.0 / 15.0).abs() < 1e-12);
        let q = quantize_unsigned(&v(&[0.0, 2.5]), 0.6, b(8), 2.5).unwrap();
        assert_eq!(q.codes.to_vec(), vec![0, 255]);
        assert!(matches!(q.codes, Codes::U8(_)));
        match quantize_unsigned(&v(&[0.1, -0.2]), 1.0, b(4), 1.0) {
            Err(Error::Domain(msg)) => assert!(msg.contains("index 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reconstruction_error_hand_example() {
        use crate::model::{ActivationKind, Layer};
        let m = Model::new(
            vec![3],
            vec![Layer::dense(
                Tensor::matrix(1, 3, vec![0.5, -1.0, 0.25]).unwrap(),
                v(&[0.0]),
                ActivationKind::Identity,
            )],
        )
        .unwrap();
        let e = reconstruction_error(
            &m,
            QuantScheme::Uniform,
            b(3),
            Granularity::PerTensor,
            Norm::L2,
        )
        .unwrap();
        let expect = ((1.0f64 / 6.0).powi(2) + (1.0f64 / 12.0).powi(2)).sqrt();
        assert!((e - expect).abs() < 1e-12, "{e} vs {expect}");
        assert!((e - 0.18634).abs() < 1e-5);
    }

    #[test]
    fn from_parts_rejects_out_of_range() {
        assert!(QuantizedTensor::from_parts(
            vec![1],
            vec![4],
            vec![1.0],
            QuantScheme::Uniform,
            b(3),
            Signedness::Signed,
            Granularity::PerTensor
        )
        .is_err());
        assert!(QuantizedTensor::from_parts(
            vec![1],
            vec![1],
            vec![0.0],
            QuantScheme::Uniform,
            b(3),
            Signedness::Signed,
            Granularity::PerTensor
        )
        .is_err());
    }
}
