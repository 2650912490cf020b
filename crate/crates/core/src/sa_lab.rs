//! Stochastic-approximation experiments.
//!
//! Four SGD variants driven by the same stream of samples `W_t`:
//!
//! ```text
//! classical  θ_t = θ_{t−1} − μ H(W_t, θ_{t−1})
//! batch      θ_{nK} = θ_{(n−1)K} − (μ'/K) Σ_j H(W_{nK−j}, θ_{(n−1)K})
//! smoothed   H̃_t = ρ H̃_{t−1} + (1−ρ) H(W_t, θ_{t−1}),  θ_t = θ_{t−1} − μ H̃_t
//! delayed    θ_t = θ_{t−1} − μ H(W_t, θ_{t−k})
//! ```
//!
//! Progress is always counted in consumed samples, so one batch update
//! advances the clock by `K`. The steady-state fluctuation of the classical
//! rule is predicted by `μ·trace(Q)` with `C Q + Q Cᵀ = E[H Hᵀ]` at the minimizer.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A stochastic objective `E_W[h(W, θ)]` accessed through its gradient `H(W, θ)`.
pub trait StochasticObjective {
    type Sample;

    fn dim(&self) -> usize;

    fn sample(&self, rng: &mut dyn RngCore) -> Self::Sample;

    fn grad(&self, w: &Self::Sample, theta: &DVector<f64>) -> DVector<f64>;

    fn mean_grad(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        None
    }

    /// Jacobian `C` of the mean gradient at the minimizer.
    fn hessian_at_min(&self) -> Option<DMatrix<f64>> {
        None
    }

    /// `E[H(W, θ*) H(W, θ*)ᵀ]`.
    fn grad_cov_at_min(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Linear model `y = θ*ᵀX + w` with `X ~ N(0, I)` and `w ~ N(0, σ²)`.
///
/// The gradient is that of the squared error, `H = −2(y − θᵀX)X`, so
/// `C = 2I` and `E[HHᵀ] = 4σ²I`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    theta_star: DVector<f64>,
    noise_var: f64,
}

impl RegressionModel {
    pub fn new(theta_star: DVector<f64>, noise_var: f64) -> Result<Self> {
        if theta_star.is_empty() {
            return Err(Error::InvalidParameter("regression needs dim ≥ 1".into()));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be non-negative, got {noise_var}"
            )));
        }
        Ok(Self {
            theta_star,
            noise_var,
        })
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

/// One regression observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub x: DVector<f64>,
    pub y: f64,
}

impl StochasticObjective for RegressionModel {
    type Sample = RegressionSample;

    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    /// Draws the `d` entries of `X`, then the noise.
    fn sample(&self, rng: &mut dyn RngCore) -> RegressionSample {
        let x = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let n: f64 = StandardNormal.sample(rng);
        let y = self.theta_star.dot(&x) + self.noise_var.sqrt() * n;
        RegressionSample { x, y }
    }

    fn grad(&self, w: &RegressionSample, theta: &DVector<f64>) -> DVector<f64> {
        let err = w.y - theta.dot(&w.x);
        &w.x * (-2.0 * err)
    }

    fn mean_grad(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some((theta - &self.theta_star) * 2.0)
    }

    fn minimizer(&self) -> Option<DVector<f64>> {
        Some(self.theta_star.clone())
    }

    fn hessian_at_min(&self) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim(), self.dim()) * 2.0)
    }

    fn grad_cov_at_min(&self) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim(), self.dim()) * (4.0 * self.noise_var))
    }
}

/// One of the four update rules with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SaVariant {
    Classical {
        mu: f64,
    },
    /// `mu` is the per-update rate `μ'`, applied to the block average.
    Batch {
        mu: f64,
        k: usize,
    },
    Smoothed {
        mu: f64,
        rho: f64,
    },
    Delayed {
        mu: f64,
        delay: usize,
    },
}

impl SaVariant {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let mu = self.mu();
        if !(mu.is_finite() && mu >= 0.0) {
            return bad(format!("learning rate must be non-negative, got {mu}"));
        }
        match *self {
            SaVariant::Batch { k: 0, .. } => bad("batch size must be ≥ 1".into()),
            SaVariant::Smoothed { rho, .. } if !(0.0..1.0).contains(&rho) => {
                bad(format!("smoothing factor must lie in [0, 1), got {rho}"))
            }
            SaVariant::Delayed { delay: 0, .. } => bad("delay must be ≥ 1".into()),
            _ => Ok(()),
        }
    }

    pub fn mu(&self) -> f64 {
        match *self {
            SaVariant::Classical { mu }
            | SaVariant::Batch { mu, .. }
            | SaVariant::Smoothed { mu, .. }
            | SaVariant::Delayed { mu, .. } => mu,
        }
    }

    /// Short label such as `batch:10`.
    pub fn label(&self) -> String {
        match *self {
            SaVariant::Classical { .. } => "classical".into(),
            SaVariant::Batch { k, .. } => format!("batch:{k}"),
            SaVariant::Smoothed { rho, .. } => format!("smooth:{rho}"),
            SaVariant::Delayed { delay, .. } => format!("delay:{delay}"),
        }
    }
}

/// Incremental state of one variant, fed one sample at a time.
#[derive(Debug, Clone)]
pub struct VariantRunner {
    variant: SaVariant,
    theta: DVector<f64>,
    /// Batch: gradient sum over the current block. Smoothed: `H̃`.
    acc: DVector<f64>,
    /// Batch: parameter at which the current block is evaluated.
    anchor: DVector<f64>,
    in_block: usize,
    /// Delayed: `θ_{t−k}, …, θ_{t−1}` (front is oldest).
    history: VecDeque<DVector<f64>>,
    grad_evals: u64,
    consumed: u64,
    last_grad: DVector<f64>,
}

impl VariantRunner {
    pub fn new(variant: SaVariant, theta0: DVector<f64>) -> Result<Self> {
        variant.validate()?;
        let d = theta0.len();
        let history = match variant {
            SaVariant::Delayed { delay, .. } => {
                std::iter::repeat_n(theta0.clone(), delay).collect()
            }
            _ => VecDeque::new(),
        };
        Ok(Self {
            variant,
            acc: DVector::zeros(d),
            anchor: theta0.clone(),
            theta: theta0,
            in_block: 0,
            history,
            grad_evals: 0,
            consumed: 0,
            last_grad: DVector::zeros(d),
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Number of gradient evaluations so far.
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// The smoothed gradient `H̃_t` (smoothed variant only, zero otherwise).
    pub fn smoothed_gradient(&self) -> &DVector<f64> {
        &self.acc
    }

    /// The raw gradient computed for the last consumed sample.
    pub fn last_gradient(&self) -> &DVector<f64> {
        &self.last_grad
    }

    fn eval<O: StochasticObjective + ?Sized>(
        &mut self,
        obj: &O,
        w: &O::Sample,
        at: &DVector<f64>,
    ) -> DVector<f64> {
        self.grad_evals += 1;
        obj.grad(w, at)
    }

    /// Consumes one sample and returns the parameter after it.
    pub fn consume<O: StochasticObjective + ?Sized>(
        &mut self,
        obj: &O,
        w: &O::Sample,
    ) -> &DVector<f64> {
        self.consumed += 1;
        match self.variant {
            SaVariant::Classical { mu } => {
                let theta = self.theta.clone();
                let h = self.eval(obj, w, &theta);
                self.theta.axpy(-mu, &h, 1.0);
                self.last_grad = h;
            }
            SaVariant::Batch { mu, k } => {
                let anchor = self.anchor.clone();
                let h = self.eval(obj, w, &anchor);
                self.acc += &h;
                self.last_grad = h;
                self.in_block += 1;
                if self.in_block == k {
                    self.theta.axpy(-mu / k as f64, &self.acc, 1.0);
                    self.acc.fill(0.0);
                    self.in_block = 0;
                    self.anchor.copy_from(&self.theta);
                }
            }
            SaVariant::Smoothed { mu, rho } => {
                let theta = self.theta.clone();
                let h = self.eval(obj, w, &theta);
                self.acc *= rho;
                self.acc.axpy(1.0 - rho, &h, 1.0);
                self.theta.axpy(-mu, &self.acc, 1.0);
                self.last_grad = h;
            }
            SaVariant::Delayed { mu, .. } => {
                let stale = self.history.pop_front().expect("delay ≥ 1");
                let h = self.eval(obj, w, &stale);
                self.theta.axpy(-mu, &h, 1.0);
                self.history.push_back(self.theta.clone());
                self.last_grad = h;
            }
        }
        &self.theta
    }
}

/// Sample-stream generator used by all runs: ChaCha8 seeded from `seed`.
pub fn sample_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs one variant from `θ₀ = 0` and returns `θ` after every consumed sample.
pub fn run_variant<O: StochasticObjective + ?Sized>(
    obj: &O,
    variant: SaVariant,
    samples: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    run_variant_from(obj, variant, samples, seed, DVector::zeros(obj.dim()))
}

pub fn run_variant_from<O: StochasticObjective + ?Sized>(
    obj: &O,
    variant: SaVariant,
    samples: usize,
    seed: u64,
    theta0: DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_len("initial parameter", obj.dim(), theta0.len())?;
    let mut rng = sample_rng(seed);
    let mut runner = VariantRunner::new(variant, theta0)?;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let w = obj.sample(&mut rng);
        out.push(runner.consume(obj, &w).clone());
    }
    Ok(out)
}

/// `2‖a − b‖² / (‖a − θ*‖² + ‖b − θ*‖²)`, in `[0, 4]`.
pub fn relative_diff_power(
    a: &DVector<f64>,
    b: &DVector<f64>,
    theta_star: &DVector<f64>,
) -> Result<f64> {
    check_len("relative_diff_power", a.len(), b.len())?;
    check_len("relative_diff_power", a.len(), theta_star.len())?;
    let denom = (a - theta_star).norm_squared() + (b - theta_star).norm_squared();
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(2.0 * (a - b).norm_squared() / denom)
}

/// Mean-gradient recursion `θ̄_t = θ̄_{t−1} − μ E[H(W, θ̄_{t−1})]`; returns
/// `θ̄_1 … θ̄_steps`.
pub fn average_trajectory<O: StochasticObjective + ?Sized>(
    obj: &O,
    mu: f64,
    steps: usize,
    theta0: DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_len("initial parameter", obj.dim(), theta0.len())?;
    let mut theta = theta0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = obj
            .mean_grad(&theta)
            .ok_or(Error::Unavailable("mean gradient"))?;
        theta.axpy(-mu, &g, 1.0);
        out.push(theta.clone());
    }
    Ok(out)
}

/// Solves `C Q + Q Cᵀ = R` by vectorization: `(I ⊗ C + C ⊗ I) vec(Q) = vec(R)`.
///
/// `C` must have all eigenvalues in the open right half plane.
pub fn solve_lyapunov(c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = c.nrows();
    if !c.is_square() || d == 0 {
        return Err(Error::Lyapunov(format!(
            "C must be square, got {:?}",
            c.shape()
        )));
    }
    if r.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "solve_lyapunov R",
            left: d,
            right: r.nrows(),
        });
    }
    if let Some(bad) = c
        .complex_eigenvalues()
        .iter()
        .find(|e| !e.re.is_finite() || e.re <= 0.0)
    {
        return Err(Error::Lyapunov(format!(
            "C is not stable: eigenvalue {bad} has non-positive real part"
        )));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let op = eye.kronecker(c) + c.kronecker(&eye);
    let rhs = DVector::from_column_slice(r.as_slice());
    let vec_q = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Lyapunov("singular Kronecker operator".into()))?;
    let q = DMatrix::from_column_slice(d, d, vec_q.as_slice());
    // R symmetric implies Q symmetric; remove rounding asymmetry.
    Ok((&q + q.transpose()) * 0.5)
}

/// Predicted steady-state `E‖θ − θ*‖² ≈ μ·trace(Q)`.
pub fn predicted_steady_state(mu: f64, q: &DMatrix<f64>) -> f64 {
    mu * q.trace()
}

/// Lyapunov prediction straight from an objective's `C` and `E[HHᵀ]`.
pub fn lyapunov_prediction<O: StochasticObjective + ?Sized>(obj: &O, mu: f64) -> Result<f64> {
    let c = obj
        .hessian_at_min()
        .ok_or(Error::Unavailable("Hessian at the minimizer"))?;
    let r = obj
        .grad_cov_at_min()
        .ok_or(Error::Unavailable("gradient covariance at the minimizer"))?;
    Ok(predicted_steady_state(mu, &solve_lyapunov(&c, &r)?))
}

/// Samples until the mean-trajectory contraction `max_i |1 − μλ_i(C)|^t`
/// drops below `threshold`.
pub fn transient_samples<O: StochasticObjective + ?Sized>(
    obj: &O,
    mu: f64,
    threshold: f64,
) -> Result<usize> {
    let c = obj
        .hessian_at_min()
        .ok_or(Error::Unavailable("Hessian at the minimizer"))?;
    let rate = c
        .complex_eigenvalues()
        .iter()
        .map(|e| ((1.0 - mu * e.re).powi(2) + (mu * e.im).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if rate.is_nan() || rate >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "mean trajectory does not contract (rate {rate})"
        )));
    }
    if rate == 0.0 {
        return Ok(1);
    }
    Ok((threshold.ln() / rate.ln()).ceil() as usize)
}

/// Per-sample series produced by [`compare_variants`].
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSeries {
    pub variant: SaVariant,
    /// `‖θ_t − θ*‖²` for each consumed sample.
    pub err_power: Vec<f64>,
    /// Relative difference power against the reference run (empty for the reference).
    pub rel_diff_power: Vec<f64>,
    pub grad_evals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub samples: usize,
    pub series: Vec<VariantSeries>,
}

impl ComparisonReport {
    /// Mean of a series over `[from, samples)`.
    pub fn tail_mean(values: &[f64], from: usize) -> f64 {
        let tail = &values[from.min(values.len())..];
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Runs every variant in lockstep on one shared sample stream starting from
/// `θ₀ = 0`. The first variant is the reference for the difference series.
pub fn compare_variants<O: StochasticObjective + ?Sized>(
    obj: &O,
    variants: &[SaVariant],
    samples: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    if variants.is_empty() {
        return Err(Error::InvalidParameter("no variants given".into()));
    }
    let theta_star = obj.minimizer().ok_or(Error::Unavailable("minimizer"))?;
    let mut runners = variants
        .iter()
        .map(|v| VariantRunner::new(*v, DVector::zeros(obj.dim())))
        .collect::<Result<Vec<_>>>()?;
    let mut series: Vec<VariantSeries> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| VariantSeries {
            variant: *v,
            err_power: Vec::with_capacity(samples),
            rel_diff_power: if i == 0 {
                Vec::new()
            } else {
                Vec::with_capacity(samples)
            },
            grad_evals: 0,
        })
        .collect();
    let mut rng = sample_rng(seed);
    for _ in 0..samples {
        let w = obj.sample(&mut rng);
        for r in runners.iter_mut() {
            r.consume(obj, &w);
        }
        let reference = runners[0].theta();
        for (i, r) in runners.iter().enumerate() {
            series[i]
                .err_power
                .push((r.theta() - &theta_star).norm_squared());
            if i > 0 {
                series[i]
                    .rel_diff_power
                    .push(relative_diff_power(reference, r.theta(), &theta_star).unwrap_or(0.0));
            }
        }
    }
    for (s, r) in series.iter_mut().zip(&runners) {
        s.grad_evals = r.grad_evals();
    }
    Ok(ComparisonReport { samples, series })
}

/// Random `θ*` with i.i.d. standard normal entries, drawn from its own stream.
pub fn random_theta_star<R: Rng>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}
