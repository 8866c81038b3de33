use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled feature matrix: one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim("dataset features must be n×d"));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::validation(
                "label",
                format!("{bad} outside [0, {class_count})"),
            ));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dims();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Rows as rank-1 tensors.
    pub fn rows(&self) -> impl Iterator<Item = Tensor> + '_ {
        (0..self.len()).map(|i| Tensor::vector(self.row(i).to_vec()).expect("finite row"))
    }
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    /// Unit-variance Gaussian clusters whose centres sit on a circle in the
    /// first two dimensions, adjacent centres `separation` apart.
    Blobs {
        classes: usize,
        dims: usize,
        separation: f64,
    },
    /// Two noisy concentric circles (radius 1 and 2), label 0 inside.
    Rings { noise: f64 },
}

impl DatasetKind {
    pub fn blobs() -> Self {
        DatasetKind::Blobs {
            classes: 3,
            dims: 2,
            separation: 6.0,
        }
    }

    pub fn rings() -> Self {
        DatasetKind::Rings { noise: 0.15 }
    }
}

pub fn generate_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::validation("n", "datasets need at least 10 rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        DatasetKind::Blobs {
            classes,
            dims,
            separation,
        } => {
            if !(2..=8).contains(&dims) || classes < 2 {
                return Err(Error::validation(
                    "blobs",
                    "need 2-8 dimensions and at least two classes",
                ));
            }
            let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
            let mut data = Vec::with_capacity(n * dims);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % classes;
                let angle = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
                for d in 0..dims {
                    let centre = match d {
                        0 => radius * angle.cos(),
                        1 => radius * angle.sin(),
                        _ => 0.0,
                    };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push(centre + noise);
                }
                labels.push(label);
            }
            Dataset::new(Tensor::matrix(n, dims, data)?, labels, classes)
        }
        DatasetKind::Rings { noise } => {
            let mut data = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % 2;
                let radius = 1.0 + label as f64;
                let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                data.push(radius * angle.cos() + noise * nx);
                data.push(radius * angle.sin() + noise * ny);
                labels.push(label);
            }
            Dataset::new(Tensor::matrix(n, 2, data)?, labels, 2)
        }
    }
}
