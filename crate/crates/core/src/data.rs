//! In-memory datasets and synthetic generators.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::prob::{SeededRng, Stream};

/// Samples as rows of an `n × d` matrix, with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        x.as_matrix("Dataset")?;
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::DimensionMismatch {
                    what: "label count",
                    expected: x.rows(),
                    got: l.len(),
                });
            }
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n_train` rows and the remainder.
    pub fn split_at(&self, n_train: usize) -> (Self, Self) {
        let n_train = n_train.min(self.len());
        let a: Vec<usize> = (0..n_train).collect();
        let b: Vec<usize> = (n_train..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Second moment `E[x xᵀ]` of the rows, which is the covariance of
    /// zero-mean data.
    pub fn second_moment(&self) -> nalgebra::DMatrix<f64> {
        let d = self.dim();
        let mut m = nalgebra::DMatrix::zeros(d, d);
        for r in 0..self.len() {
            let row = self.x.row(r);
            for i in 0..d {
                for j in 0..=i {
                    m[(i, j)] += row[i] * row[j];
                }
            }
        }
        let n = self.len() as f64;
        for i in 0..d {
            for j in 0..=i {
                m[(i, j)] /= n;
                m[(j, i)] = m[(i, j)];
            }
        }
        m
    }
}

/// Kinds of synthetic data the CLI and tests can generate.
#[derive(Clone, Debug, PartialEq)]
pub enum SynthKind {
    /// `x ~ N(0, I_dim)`.
    IsotropicGaussian { dim: usize },
    /// Two labelled Gaussian blobs at `±separation/2` along the first axis.
    TwoGaussianLabeled { dim: usize, separation: f64 },
    /// `x = B u` with `u ~ N(0, I_rank)` and `B` having orthonormal columns,
    /// so the covariance has exactly `rank` nonzero eigenvalues.
    LowRankGaussian { dim: usize, rank: usize },
    /// Isotropic data labelled by `argmax(0, x₁, x₂)`: three classes decided
    /// by two independent directions.
    ThreeClassTwoDirections { dim: usize },
}

impl SynthKind {
    pub fn parse(kind: &str, dim: usize, rank: usize, separation: f64) -> Result<Self> {
        Ok(match kind {
            "isotropic-gaussian" => Self::IsotropicGaussian { dim },
            "two-gaussian-labeled" => Self::TwoGaussianLabeled { dim, separation },
            "low-rank-gaussian" => Self::LowRankGaussian { dim, rank },
            "three-class-two-directions" => Self::ThreeClassTwoDirections { dim },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown synthetic dataset kind `{other}`"
                )))
            }
        })
    }
}

pub fn synth_dataset(kind: &SynthKind, n: usize, rng: &SeededRng) -> Result<Dataset> {
    let mut rng = rng.substream(Stream::Data, 0);
    match *kind {
        SynthKind::IsotropicGaussian { dim } => {
            let x = Tensor::matrix(n, dim, rng.standard_normals(n * dim))?;
            Dataset::new(x, None)
        }
        SynthKind::TwoGaussianLabeled { dim, separation } => {
            let mut data = rng.standard_normals(n * dim);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            for (i, &l) in labels.iter().enumerate() {
                data[i * dim] += if l == 1 {
                    separation / 2.0
                } else {
                    -separation / 2.0
                };
            }
            Dataset::new(Tensor::matrix(n, dim, data)?, Some(labels))
        }
        SynthKind::LowRankGaussian { dim, rank } => {
            if rank == 0 || rank > dim {
                return Err(Error::InvalidArgument(format!(
                    "rank {rank} not in 1..={dim}"
                )));
            }
            let basis = random_orthonormal(dim, rank, &mut rng);
            let u = Tensor::matrix(n, rank, rng.standard_normals(n * rank))?;
            Dataset::new(u.matmul(&basis.transpose()?)?, None)
        }
        SynthKind::ThreeClassTwoDirections { dim } => {
            if dim < 2 {
                return Err(Error::InvalidArgument(
                    "three-class data needs dim >= 2".into(),
                ));
            }
            let x = Tensor::matrix(n, dim, rng.standard_normals(n * dim))?;
            let labels = (0..n)
                .map(|i| {
                    let r = x.row(i);
                    crate::prob::argmax(&[0.0, r[0], r[1]])
                })
                .collect();
            Dataset::new(x, Some(labels))
        }
    }
}

/// `dim × k` matrix with orthonormal columns (Gram–Schmidt on Gaussian draws).
pub(crate) fn random_orthonormal(dim: usize, k: usize, rng: &mut SeededRng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = rng.standard_normals(dim);
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut t = Tensor::zeros(&[dim, k]);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            t.set2(i, j, v);
        }
    }
    t
}
