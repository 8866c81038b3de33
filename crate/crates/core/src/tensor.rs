//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate needs: matrix product, 2-D cross-correlation, elementwise maps,
//! magnitude maxima and distribution moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction granularity for [`Tensor::abs_max`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    PerTensor,
    PerAxis(usize),
}

/// Spatial padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Population moments of a flattened tensor. Skewness and kurtosis are
/// `None` when the variance is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Elementwise `f`, failing on the first non-finite output.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map<F: Fn(f64, f64) -> f64>(&self, other: &Tensor, f: F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Maximum magnitude over the whole tensor or along `axis` (one value
    /// per index of that axis).
    pub fn abs_max(&self, granularity: Reduction) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(Error::domain("abs_max of an empty tensor"));
        }
        match granularity {
            Reduction::PerTensor => {
                let m = self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
                Ok(Tensor {
                    shape: vec![1],
                    data: vec![m],
                })
            }
            Reduction::PerAxis(axis) => {
                let groups = self.axis_groups(axis)?;
                let mut out = vec![0.0_f64; self.shape[axis]];
                for (i, &g) in groups.iter().enumerate() {
                    out[g] = out[g].max(self.data[i].abs());
                }
                Ok(Tensor {
                    shape: vec![out.len()],
                    data: out,
                })
            }
        }
    }

    /// Index along `axis` for every flat element, in row-major order.
    pub fn axis_groups(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.shape.len() {
            return Err(Error::dim(format!(
                "axis {} out of range for rank {}",
                axis,
                self.shape.len()
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        Ok((0..self.data.len())
            .map(|i| (i / inner.max(1)) % extent.max(1))
            .collect())
    }

    pub fn moments(&self) -> Result<Moments> {
        moments(&self.data)
    }
}

/// Population mean, standard deviation, skewness and (non-excess) kurtosis.
pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.len() < 2 {
        return Err(Error::domain("moments need at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let (skewness, kurtosis) = if m2 > 0.0 {
        (Some(m3 / (m2 * std)), Some(m4 / (m2 * m2)))
    } else {
        (None, None)
    };
    Ok(Moments {
        mean,
        std,
        skewness,
        kurtosis,
    })
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!("matmul {:?} x {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `w[out×in] · x` where `x` is flattened to length `in`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape[1] != x.len() {
        return Err(Error::dim(format!("matvec {:?} x [{}]", w.shape, x.len())));
    }
    let cols = w.shape[1];
    Ok(w.data
        .chunks_exact(cols.max(1))
        .take(w.shape[0])
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Zero padding `(top, bottom, left, right)` that `mode` applies to an
/// `h×w` input for a `kh×kw` kernel at `stride`.
pub fn padding_amounts(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    mode: Padding,
) -> (usize, usize, usize, usize) {
    match mode {
        Padding::Valid => (0, 0, 0, 0),
        Padding::Same => {
            let total = |n: usize, k: usize| {
                let out = n.div_ceil(stride);
                ((out.saturating_sub(1)) * stride + k).saturating_sub(n)
            };
            let ph = total(h, kh);
            let pw = total(w, kw);
            (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
        }
    }
}

/// Pads a `C×H×W` tensor with `fill` on the spatial borders.
pub fn pad_spatial(
    input: &Tensor,
    pads: (usize, usize, usize, usize),
    fill: f64,
) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::dim(format!("expected C×H×W, got {:?}", input.shape)));
    }
    let (top, bottom, left, right) = pads;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (hp, wp) = (h + top + bottom, w + left + right);
    let mut out = vec![fill; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &input.data[(ch * h + y) * w..(ch * h + y + 1) * w];
            let start = (ch * hp + y + top) * wp + left;
            out[start..start + w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, hp, wp], out)
}

/// 2-D cross-correlation (no kernel flip) of a `C_in×H×W` input with a
/// `C_out×C_in×kh×kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects C×H×W input and 4-d kernel, got {:?} and {:?}",
            input.shape, kernel.shape
        )));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d stride must be positive"));
    }
    let (c_out, c_in, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if input.shape[0] != c_in {
        return Err(Error::dim(format!(
            "conv2d input has {} channels, kernel expects {}",
            input.shape[0], c_in
        )));
    }
    let pads = padding_amounts(input.shape[1], input.shape[2], kh, kw, stride, padding);
    let padded = if pads == (0, 0, 0, 0) {
        input.clone()
    } else {
        pad_spatial(input, pads, 0.0)?
    };
    let (hp, wp) = (padded.shape[1], padded.shape[2]);
    if kh > hp || kw > wp {
        return Err(Error::dim(format!(
            "kernel {}×{} larger than padded input {}×{}",
            kh, kw, hp, wp
        )));
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let irow = (ci * hp + oy * stride + ky) * wp + ox * stride;
                        let krow = ((co * c_in + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += padded.data[irow + kx] * kernel.data[krow + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);

        let r = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(vec![5, 7], &mut rng);
        let b = random(vec![7, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel_and_sum() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, Padding::Valid).unwrap(), x);

        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(vec![2, 3, 3]);
        let k = Tensor::zeros(vec![1, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &k, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn same_padding_keeps_extent_at_stride_one() {
        let x = Tensor::zeros(vec![1, 5, 4]);
        let k = Tensor::zeros(vec![2, 1, 3, 2]);
        let y = conv2d(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4]);
        let y = conv2d(&x, &k, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
    }

    #[test]
    fn map_cases() {
        let t = Tensor::vector(vec![-1.0, 2.0]).unwrap();
        assert_eq!(t.map(f64::abs).unwrap().data(), &[1.0, 2.0]);
        let t = Tensor::vector(vec![4.0]).unwrap();
        assert_eq!(t.map(f64::sqrt).unwrap().data(), &[2.0]);
        let t = Tensor::vector(vec![0.1, -3.5, 7.25]).unwrap();
        assert_eq!(t.map(|v| v).unwrap(), t);
    }

    #[test]
    fn map_reports_offending_index() {
        let t = Tensor::vector(vec![1.0, 0.0, 2.0]).unwrap();
        match t.map(|v| 1.0 / v) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn abs_max_cases() {
        let t = Tensor::vector(vec![0.5, -1.0, 0.25]).unwrap();
        assert_eq!(t.abs_max(Reduction::PerTensor).unwrap().data(), &[1.0]);
        let m = Tensor::matrix(2, 2, vec![1.0, -3.0, 2.0, 0.0]).unwrap();
        assert_eq!(
            m.abs_max(Reduction::PerAxis(0)).unwrap().data(),
            &[3.0, 2.0]
        );
        assert_eq!(
            m.abs_max(Reduction::PerAxis(1)).unwrap().data(),
            &[2.0, 3.0]
        );
        let z = Tensor::zeros(vec![4]);
        assert_eq!(z.abs_max(Reduction::PerTensor).unwrap().data(), &[0.0]);
        let e = Tensor::zeros(vec![0]);
        assert!(matches!(
            e.abs_max(Reduction::PerTensor),
            Err(Error::Domain(_))
        ));
        assert!(m.abs_max(Reduction::PerAxis(2)).is_err());
    }

    #[test]
    fn moments_cases() {
        let m = moments(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.skewness, Some(0.0));
        let c = moments(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(c.std, 0.0);
        assert!(c.skewness.is_none() && c.kurtosis.is_none());
        assert!(moments(&[1.0]).is_err());
    }

    #[test]
    fn gaussian_kurtosis_is_three() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let m = moments(&xs).unwrap();
        assert!((m.kurtosis.unwrap() - 3.0).abs() < 0.1, "{m:?}");
    }
}
