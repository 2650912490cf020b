//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls the library's forward or gradient code; the network is
//! re-evaluated with plain loops over the augmented parameter matrices.

#![allow(dead_code)]

use kerngen::generator::GeneratorParams;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller, independent of the library's sampler.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `Y = sigmoid([B b]·[relu([A a]·[z; 1]); 1])` with explicit loops.
pub fn naive_output(hidden: &DMatrix<f64>, output: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let m = hidden.nrows();
    let s: Vec<f64> = (0..m)
        .map(|i| {
            let mut w = hidden[(i, n)];
            for j in 0..n {
                w += hidden[(i, j)] * z[j];
            }
            if w > 0.0 {
                w
            } else {
                0.0
            }
        })
        .collect();
    (0..output.nrows())
        .map(|i| {
            let mut t = output[(i, m)];
            for j in 0..m {
                t += output[(i, j)] * s[j];
            }
            1.0 / (1.0 + (-t).exp())
        })
        .collect()
}

/// Hidden pre-activations, used to keep finite differences away from the ReLU kink.
pub fn naive_preactivation(hidden: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    (0..hidden.nrows())
        .map(|i| hidden[(i, n)] + (0..n).map(|j| hidden[(i, j)] * z[j]).sum::<f64>())
        .collect()
}

pub fn naive_kernel(a: &[f64], b: &[f64], h: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d / h).exp()
}

/// Central finite differences of `f(params)` over every entry of `[A a]` and `[B b]`.
/// Returns `(d/d[B b], d/d[A a])`.
pub fn fd_param_grad(
    params: &GeneratorParams,
    step: f64,
    f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let hidden = params.hidden().clone();
    let output = params.output().clone();
    let mut g_out = DMatrix::zeros(output.nrows(), output.ncols());
    for idx in 0..output.len() {
        let mut p = output.clone();
        let mut m = output.clone();
        p[idx] += step;
        m[idx] -= step;
        g_out[idx] = (f(&hidden, &p) - f(&hidden, &m)) / (2.0 * step);
    }
    let mut g_hid = DMatrix::zeros(hidden.nrows(), hidden.ncols());
    for idx in 0..hidden.len() {
        let mut p = hidden.clone();
        let mut m = hidden.clone();
        p[idx] += step;
        m[idx] -= step;
        g_hid[idx] = (f(&p, &output) - f(&m, &output)) / (2.0 * step);
    }
    (g_out, g_hid)
}

/// Largest entrywise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_params(rng: &mut impl Rng, n: usize, m: usize, k: usize) -> GeneratorParams {
    let hidden = DMatrix::from_fn(m, n + 1, |_, _| normal(rng));
    let output = DMatrix::from_fn(k, m + 1, |_, _| normal(rng));
    GeneratorParams::from_augmented(hidden, output).unwrap()
}

/// Four-mode Gaussian mixture in `[0, 1]²` (modes at 0.25/0.75, std 0.05, clipped).
pub fn mixture_2d(rng: &mut impl Rng, count: usize) -> DMatrix<f64> {
    const MODES: [(f64, f64); 4] = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)];
    let mut out = DMatrix::zeros(2, count);
    for c in 0..count {
        let (mx, my) = MODES[rng.random_range(0..4)];
        out[(0, c)] = (mx + 0.05 * normal(rng)).clamp(0.0, 1.0);
        out[(1, c)] = (my + 0.05 * normal(rng)).clamp(0.0, 1.0);
    }
    out
}
