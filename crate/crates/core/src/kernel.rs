//! Gaussian kernel `k(u, v) = exp(−‖u − v‖² / h)` and the quantities built on it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Bandwidth of the Gaussian kernel, expressed as a squared-distance scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if bandwidth.is_finite() && bandwidth > 0.0 {
            Ok(Self { bandwidth })
        } else {
            Err(Error::InvalidParameter(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )))
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Kernel value from an already computed squared distance.
    #[inline]
    pub fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        (-sq_dist / self.bandwidth).exp()
    }
}

/// A collection of equal-length column vectors, stored as a `dim × count` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    columns: DMatrix<f64>,
}

impl SampleSet {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.nrows() == 0 || columns.ncols() == 0 {
            return Err(Error::InvalidParameter(format!(
                "sample set needs dim ≥ 1 and count ≥ 1, got {}×{}",
                columns.nrows(),
                columns.ncols()
            )));
        }
        Ok(Self { columns })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors.first().ok_or(Error::EmptyDataset)?;
        let dim = first.len();
        for v in vectors {
            check_len("sample set vectors", dim, v.len())?;
        }
        Self::new(DMatrix::from_fn(dim, vectors.len(), |r, c| vectors[c][r]))
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn count(&self) -> usize {
        self.columns.ncols()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let dim = self.dim();
        &self.columns.as_slice()[i * dim..(i + 1) * dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.columns.as_slice().chunks_exact(self.dim())
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.columns
    }
}

/// Squared Euclidean distance, summed in index order.
#[inline]
pub fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn gaussian_kernel(u: &[f64], v: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_len("gaussian_kernel", u.len(), v.len())?;
    Ok(spec.eval_sq_dist(sq_dist(u, v)))
}

/// Gradient of `k(y, u)` with respect to `y`: `−(2/h)·k(y, u)·(y − u)`.
pub fn kernel_grad_first(y: &[f64], u: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    check_len("kernel_grad_first", y.len(), u.len())?;
    let scale = -2.0 / spec.bandwidth() * spec.eval_sq_dist(sq_dist(y, u));
    Ok(y.iter().zip(u).map(|(a, b)| scale * (a - b)).collect())
}

/// Instantaneous loss sample `k(y1, y2) − k(y1, x) − k(y2, x)`.
pub fn triple_loss(y1: &[f64], y2: &[f64], x: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_len("triple_loss", y1.len(), y2.len())?;
    check_len("triple_loss", y1.len(), x.len())?;
    Ok(spec.eval_sq_dist(sq_dist(y1, y2))
        - spec.eval_sq_dist(sq_dist(y1, x))
        - spec.eval_sq_dist(sq_dist(y2, x)))
}

fn mean_cross_kernel(a: &SampleSet, b: &SampleSet, spec: &KernelSpec) -> f64 {
    let mut total = 0.0;
    for u in a.columns() {
        let mut row = 0.0;
        for v in b.columns() {
            row += spec.eval_sq_dist(sq_dist(u, v));
        }
        total += row;
    }
    total / (a.count() as f64 * b.count() as f64)
}

/// Biased (V-statistic) estimate of the squared MMD between two sample sets.
///
/// Lower is better when `b` is a reference set and `a` is generated.
pub fn mmd_score(a: &SampleSet, b: &SampleSet, spec: &KernelSpec) -> Result<f64> {
    check_len("mmd_score", a.dim(), b.dim())?;
    let kaa = mean_cross_kernel(a, a, spec);
    let kbb = mean_cross_kernel(b, b, spec);
    // Average both cross orders so the score is exactly symmetric in (a, b).
    let kab = 0.5 * (mean_cross_kernel(a, b, spec) + mean_cross_kernel(b, a, spec));
    Ok(kaa + kbb - 2.0 * kab)
}

/// Symmetric `count × count` Gram matrix with unit diagonal.
pub fn gram_matrix(s: &SampleSet, spec: &KernelSpec) -> DMatrix<f64> {
    let n = s.count();
    let mut gram = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = spec.eval_sq_dist(sq_dist(s.column(i), s.column(j)));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}
