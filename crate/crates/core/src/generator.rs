//! Two-layer fully connected generator and its rank-one kernel gradients.
//!
//! The network computes
//!
//! ```text
//! W = A Z + a,   S = relu(W)
//! T = B S + b,   Y = sigmoid(T)
//! ```
//!
//! Parameters are kept in augmented form, `[A a]` (`m × (n+1)`) and `[B b]`
//! (`k × (m+1)`), which is also the layout of the gradients: for one input,
//! with `V = g'(T) ⊙ r` and `U = d'(W) ⊙ (Bᵀ V)`,
//!
//! ```text
//! ∇[B b] = V [Sᵀ 1],   ∇[A a] = U [Zᵀ 1]
//! ```
//!
//! both rank one.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Layer geometry: latent `n`, hidden `m`, output `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub latent: usize,
    pub hidden: usize,
    pub output: usize,
}

impl NetShape {
    pub fn new(latent: usize, hidden: usize, output: usize) -> Result<Self> {
        let shape = Self {
            latent,
            hidden,
            output,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::InvalidParameter(format!(
                "network dimensions must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for NetShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.latent, self.hidden, self.output)
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// ReLU derivative; zero at the kink.
#[inline]
fn relu_step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trainable arrays of the generator in augmented layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `[A a]`, `m × (n+1)`.
    hidden: DMatrix<f64>,
    /// `[B b]`, `k × (m+1)`.
    output: DMatrix<f64>,
}

impl GeneratorParams {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            hidden: DMatrix::zeros(shape.hidden, shape.latent + 1),
            output: DMatrix::zeros(shape.output, shape.hidden + 1),
        }
    }

    /// Builds parameters from `A` (`m × n`), `a` (`m`), `B` (`k × m`), `b` (`k`).
    pub fn from_parts(
        a_mat: DMatrix<f64>,
        a_bias: DVector<f64>,
        b_mat: DMatrix<f64>,
        b_bias: DVector<f64>,
    ) -> Result<Self> {
        let (m, n) = a_mat.shape();
        let (k, m2) = b_mat.shape();
        check_len("hidden bias", m, a_bias.len())?;
        check_len("output weights columns", m, m2)?;
        check_len("output bias", k, b_bias.len())?;
        NetShape::new(n, m, k)?;
        let mut hidden = a_mat.insert_column(n, 0.0);
        hidden.set_column(n, &a_bias);
        let mut output = b_mat.insert_column(m, 0.0);
        output.set_column(m, &b_bias);
        Ok(Self { hidden, output })
    }

    /// Builds parameters from the augmented matrices `[A a]` and `[B b]`.
    pub fn from_augmented(hidden: DMatrix<f64>, output: DMatrix<f64>) -> Result<Self> {
        if hidden.ncols() < 2 || output.ncols() < 2 {
            return Err(Error::InvalidParameter(
                "augmented matrices need at least one weight column".into(),
            ));
        }
        check_len("output weights columns", hidden.nrows() + 1, output.ncols())?;
        NetShape::new(hidden.ncols() - 1, hidden.nrows(), output.nrows())?;
        Ok(Self { hidden, output })
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            latent: self.hidden.ncols() - 1,
            hidden: self.hidden.nrows(),
            output: self.output.nrows(),
        }
    }

    pub fn hidden(&self) -> &DMatrix<f64> {
        &self.hidden
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn hidden_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.hidden
    }

    pub fn output_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.output
    }

    /// `A` as an owned `m × n` matrix.
    pub fn hidden_weights(&self) -> DMatrix<f64> {
        self.hidden.columns(0, self.shape().latent).into_owned()
    }

    pub fn hidden_bias(&self) -> DVector<f64> {
        self.hidden.column(self.shape().latent).into_owned()
    }

    /// `B` as an owned `k × m` matrix.
    pub fn output_weights(&self) -> DMatrix<f64> {
        self.output.columns(0, self.shape().hidden).into_owned()
    }

    pub fn output_bias(&self) -> DVector<f64> {
        self.output.column(self.shape().hidden).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.hidden
            .iter()
            .chain(self.output.iter())
            .all(|x| x.is_finite())
    }
}

/// Glorot-style initialization: `A ~ N(0, 2/m)`, `B ~ N(0, 4/(k+m))`, zero biases.
///
/// `A` is drawn first, then `B`, each in column-major order.
pub fn init_params(shape: NetShape, seed: u64) -> GeneratorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let NetShape {
        latent: n,
        hidden: m,
        output: k,
    } = shape;
    let a_scale = (m as f64 / 2.0).sqrt();
    let b_scale = ((k + m) as f64 / 4.0).sqrt();
    let mut params = GeneratorParams::zeros(shape);
    for c in 0..n {
        for r in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.hidden[(r, c)] = z / a_scale;
        }
    }
    for c in 0..m {
        for r in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.output[(r, c)] = z / b_scale;
        }
    }
    params
}

/// Forward-pass intermediates for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub s: DVector<f64>,
    pub t: DVector<f64>,
    pub y: DVector<f64>,
}

impl LayerCache {
    /// The all-zero cache used before the first training iteration.
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            z: DVector::zeros(shape.latent),
            w: DVector::zeros(shape.hidden),
            s: DVector::zeros(shape.hidden),
            t: DVector::zeros(shape.output),
            y: DVector::zeros(shape.output),
        }
    }

    /// Checks that `S = relu(W)` and `Y = sigmoid(T)` hold.
    pub fn is_consistent(&self) -> bool {
        self.s
            .iter()
            .zip(self.w.iter())
            .all(|(s, w)| *s == relu(*w))
            && self
                .y
                .iter()
                .zip(self.t.iter())
                .all(|(y, t)| *y == sigmoid(*t))
    }
}

/// The backpropagated vectors `V` (output layer) and `U` (hidden layer).
#[derive(Debug, Clone, PartialEq)]
pub struct BackpropPair {
    pub v: DVector<f64>,
    pub u: DVector<f64>,
}

impl BackpropPair {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            v: DVector::zeros(shape.output),
            u: DVector::zeros(shape.hidden),
        }
    }
}

pub fn forward(params: &GeneratorParams, z: &[f64]) -> Result<LayerCache> {
    let NetShape {
        latent: n,
        hidden: m,
        ..
    } = params.shape();
    check_len("forward latent", n, z.len())?;
    let z = DVector::from_column_slice(z);
    let w = params.hidden.columns(0, n) * &z + params.hidden.column(n);
    let s = w.map(relu);
    let t = params.output.columns(0, m) * &s + params.output.column(m);
    let y = t.map(sigmoid);
    Ok(LayerCache { z, w, s, t, y })
}

/// Computes `V = (Y − Y²) ⊙ r` and `U = step(W) ⊙ (Bᵀ V)`.
///
/// `r` is the output-space direction being backpropagated: a kernel gradient
/// `∇_Y k(Y, u)` or a training residual.
pub fn backprop_pair(
    params: &GeneratorParams,
    cache: &LayerCache,
    r: &[f64],
) -> Result<BackpropPair> {
    let shape = params.shape();
    check_len("backprop residual", shape.output, r.len())?;
    check_len("backprop cache output", shape.output, cache.y.len())?;
    check_len("backprop cache hidden", shape.hidden, cache.w.len())?;
    let v = DVector::from_iterator(
        shape.output,
        cache.y.iter().zip(r).map(|(y, r)| (y - y * y) * r),
    );
    let bt_v = params.output.columns(0, shape.hidden).tr_mul(&v);
    let u = bt_v.zip_map(&cache.w, |bv, w| relu_step(w) * bv);
    Ok(BackpropPair { v, u })
}

/// Adds `col [rowᵀ 1]` into `acc`.
pub(crate) fn add_outer_augmented(acc: &mut DMatrix<f64>, col: &DVector<f64>, row: &DVector<f64>) {
    let last = row.len();
    for (j, r) in row.iter().enumerate() {
        for (i, c) in col.iter().enumerate() {
            acc[(i, j)] += c * r;
        }
    }
    for (i, c) in col.iter().enumerate() {
        acc[(i, last)] += c;
    }
}

/// Layer gradients `G = V [Sᵀ 1]` (`k × (m+1)`) and `D = U [Zᵀ 1]` (`m × (n+1)`).
pub fn layer_gradients(
    pair: &BackpropPair,
    cache: &LayerCache,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_len("layer_gradients output", pair.v.len(), cache.y.len())?;
    check_len("layer_gradients hidden", pair.u.len(), cache.s.len())?;
    let mut g = DMatrix::zeros(pair.v.len(), cache.s.len() + 1);
    let mut d = DMatrix::zeros(pair.u.len(), cache.z.len() + 1);
    add_outer_augmented(&mut g, &pair.v, &cache.s);
    add_outer_augmented(&mut d, &pair.u, &cache.z);
    Ok((g, d))
}

/// Forward-pass intermediates for a block of inputs, one column per input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCache {
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl BatchCache {
    pub fn zeros(shape: NetShape, cols: usize) -> Self {
        Self {
            z: DMatrix::zeros(shape.latent, cols),
            w: DMatrix::zeros(shape.hidden, cols),
            s: DMatrix::zeros(shape.hidden, cols),
            t: DMatrix::zeros(shape.output, cols),
            y: DMatrix::zeros(shape.output, cols),
        }
    }

    pub fn cols(&self) -> usize {
        self.z.ncols()
    }
}

/// Block version of [`BackpropPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub v: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl BatchPair {
    pub fn zeros(shape: NetShape, cols: usize) -> Self {
        Self {
            v: DMatrix::zeros(shape.output, cols),
            u: DMatrix::zeros(shape.hidden, cols),
        }
    }
}

pub fn forward_batch(params: &GeneratorParams, z: &DMatrix<f64>) -> Result<BatchCache> {
    let NetShape {
        latent: n,
        hidden: m,
        ..
    } = params.shape();
    check_len("forward_batch latent", n, z.nrows())?;
    let mut w = params.hidden.columns(0, n) * z;
    for mut col in w.column_iter_mut() {
        col += params.hidden.column(n);
    }
    let s = w.map(relu);
    let mut t = params.output.columns(0, m) * &s;
    for mut col in t.column_iter_mut() {
        col += params.output.column(m);
    }
    let y = t.map(sigmoid);
    Ok(BatchCache {
        z: z.clone(),
        w,
        s,
        t,
        y,
    })
}

pub fn backprop_batch(
    params: &GeneratorParams,
    cache: &BatchCache,
    r: &DMatrix<f64>,
) -> Result<BatchPair> {
    let shape = params.shape();
    check_len("backprop_batch residual rows", shape.output, r.nrows())?;
    check_len("backprop_batch residual cols", cache.cols(), r.ncols())?;
    let v = cache.y.zip_map(r, |y, r| (y - y * y) * r);
    let bt_v = params.output.columns(0, shape.hidden).tr_mul(&v);
    let u = bt_v.zip_map(&cache.w, |bv, w| relu_step(w) * bv);
    Ok(BatchPair { v, u })
}

/// Adds `V [Sᵀ 1]` (summed over the block's columns) into `acc`.
pub(crate) fn add_block_augmented(
    acc: &mut DMatrix<f64>,
    cols: &DMatrix<f64>,
    rows: &DMatrix<f64>,
) {
    let last = rows.nrows();
    let mut weights = acc.columns_mut(0, last);
    weights.gemm(1.0, cols, &rows.transpose(), 1.0);
    let sums = cols.column_sum();
    let mut bias = acc.column_mut(last);
    bias += sums;
}

/// Gradients summed over a block: `G = V [Sᵀ 1]`, `D = U [Zᵀ 1]`.
pub fn layer_gradients_batch(
    pair: &BatchPair,
    cache: &BatchCache,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_len("layer_gradients_batch cols", pair.v.ncols(), cache.cols())?;
    let mut g = DMatrix::zeros(pair.v.nrows(), cache.s.nrows() + 1);
    let mut d = DMatrix::zeros(pair.u.nrows(), cache.z.nrows() + 1);
    add_block_augmented(&mut g, &pair.v, &cache.s);
    add_block_augmented(&mut d, &pair.u, &cache.z);
    Ok((g, d))
}
