//! Training loops for the kernel-distance generator.
//!
//! Three update rules are provided:
//!
//! - [`TrainerState::step_preliminary`]: two fresh latents per iteration and a
//!   plain gradient step.
//! - [`TrainerState::step_final`]: one fresh latent per iteration; the second
//!   sample of the loss is the previous iteration's latent, reused together
//!   with its forward and backward quantities. Updates are normalized by a
//!   running per-entry gradient power.
//! - [`TrainerState::step_batched`]: the same delayed-sample rule applied to
//!   blocks of `K` columns, pairing column `j` of the current block with
//!   column `j` of the previous block.
//!
//! The residual that is backpropagated is
//! `R = (Y − X)·k(Y, X) − (Y − Y')·k(Y, Y')`, which is the loss gradient with
//! respect to `Y` scaled by `h/2`; the factor is absorbed into the learning rate.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::generator::{
    add_block_augmented, add_outer_augmented, backprop_batch, backprop_pair, forward,
    forward_batch, init_params, GeneratorParams, LayerCache, NetShape,
};
use crate::io::{latent_batch, Dataset};
use crate::kernel::{mmd_score, sq_dist, KernelSpec, SampleSet};

// Independent ChaCha streams derived from the one user seed.
const LATENT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Preliminary,
    Final,
    Batched,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preliminary" => Ok(Self::Preliminary),
            "final" => Ok(Self::Final),
            "batched" => Ok(Self::Batched),
            other => Err(Error::InvalidParameter(format!(
                "unknown algorithm {other:?}"
            ))),
        }
    }
}

/// How the gradient power is seeded on the very first update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerInit {
    /// `M = G²`, `N = D²` on the first update, then the exponential recursion.
    #[default]
    FirstGradient,
    /// Start the recursion from `M = N = 0`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shape: NetShape,
    pub kernel: KernelSpec,
    pub mu: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub batch: usize,
    pub rounds: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub power_init: PowerInit,
    /// Apply power normalization to the preliminary rule as well.
    #[serde(default)]
    pub normalize_preliminary: bool,
    /// Visit the dataset in a seeded random order each sweep.
    #[serde(default)]
    pub shuffle: bool,
    /// Iterations between trace points; 0 records only the start and the end.
    #[serde(default)]
    pub trace_every: u64,
    /// Number of evaluation pairs used for the loss trace.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    256
}

impl TrainConfig {
    /// The MNIST setting: 10×128×784, h = 36, K = 32, λ = 0.999, μ = 1e-3.
    pub fn mnist_defaults() -> Self {
        Self {
            shape: NetShape {
                latent: 10,
                hidden: 128,
                output: 784,
            },
            kernel: KernelSpec::new(36.0).expect("positive bandwidth"),
            mu: 1e-3,
            lambda: 0.999,
            epsilon: 1e-8,
            batch: 32,
            rounds: 1,
            seed: 0,
            algorithm: Algorithm::Batched,
            power_init: PowerInit::FirstGradient,
            normalize_preliminary: false,
            shuffle: false,
            trace_every: 0,
            eval_samples: default_eval_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        KernelSpec::new(self.kernel.bandwidth())?;
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Running per-entry power of the gradients: `M` for `[B b]`, `N` for `[A a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPower {
    pub output: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
}

impl GradPower {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            output: DMatrix::zeros(shape.output, shape.hidden + 1),
            hidden: DMatrix::zeros(shape.hidden, shape.latent + 1),
        }
    }

    /// `P ← λP + (1−λ)G²`, or `P ← G²` when `seed_from_gradient` is set.
    pub fn update(
        &mut self,
        g: &DMatrix<f64>,
        d: &DMatrix<f64>,
        lambda: f64,
        seed_from_gradient: bool,
    ) {
        fn one(p: &mut DMatrix<f64>, g: &DMatrix<f64>, lambda: f64, seed: bool) {
            if seed {
                p.zip_apply(g, |p, g| *p = g * g);
            } else {
                p.zip_apply(g, |p, g| *p = lambda * *p + (1.0 - lambda) * g * g);
            }
        }
        one(&mut self.output, g, lambda, seed_from_gradient);
        one(&mut self.hidden, d, lambda, seed_from_gradient);
    }
}

/// `θ ← θ − μ·G / sqrt(P + ε)` entrywise.
pub fn apply_normalized(
    theta: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    power: &DMatrix<f64>,
    mu: f64,
    epsilon: f64,
) {
    for ((t, g), p) in theta.iter_mut().zip(grad.iter()).zip(power.iter()) {
        *t -= mu * g / (p + epsilon).sqrt();
    }
}

/// Quantities retained from the previous iteration, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevSamples {
    pub z: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl PrevSamples {
    pub fn zeros(shape: NetShape, cols: usize) -> Self {
        Self {
            z: DMatrix::zeros(shape.latent, cols),
            s: DMatrix::zeros(shape.hidden, cols),
            y: DMatrix::zeros(shape.output, cols),
            v: DMatrix::zeros(shape.output, cols),
            u: DMatrix::zeros(shape.hidden, cols),
        }
    }

    pub fn cols(&self) -> usize {
        self.z.ncols()
    }
}

/// Gradients used by the most recent step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// `G`, gradient for `[B b]`.
    pub output_grad: DMatrix<f64>,
    /// `D`, gradient for `[A a]`.
    pub hidden_grad: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: GeneratorParams,
    pub power: GradPower,
    pub prev: PrevSamples,
    /// Number of completed steps.
    pub iteration: u64,
    rng: ChaCha8Rng,
}

fn latent_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LATENT_STREAM);
    rng
}

/// Residual `(Y − X)·k(Y, X) − (Y − Y')·k(Y, Y')` for one column.
fn residual(y: &[f64], x: &[f64], other: &[f64], kernel: &KernelSpec) -> DVector<f64> {
    let kx = kernel.eval_sq_dist(sq_dist(y, x));
    let ko = kernel.eval_sq_dist(sq_dist(y, other));
    DVector::from_iterator(
        y.len(),
        y.iter()
            .zip(x)
            .zip(other)
            .map(|((y, x), o)| (y - x) * kx - (y - o) * ko),
    )
}

fn column(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    v.reshape_generic(nalgebra::Dyn(n), nalgebra::Dyn(1))
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

impl TrainerState {
    /// Initial state: Glorot-style parameters, zero power, zero previous samples.
    ///
    /// `prev` has `config.batch` columns for the batched rule and one otherwise.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let cols = match config.algorithm {
            Algorithm::Batched => config.batch,
            _ => 1,
        };
        Ok(Self::from_params(
            init_params(config.shape, config.seed),
            cols,
            config.seed,
        ))
    }

    /// Starts from given parameters with zero power and zero previous samples.
    pub fn from_params(params: GeneratorParams, prev_cols: usize, seed: u64) -> Self {
        let shape = params.shape();
        Self {
            power: GradPower::zeros(shape),
            prev: PrevSamples::zeros(shape, prev_cols),
            params,
            iteration: 0,
            rng: latent_rng(seed),
        }
    }

    pub fn shape(&self) -> NetShape {
        self.params.shape()
    }

    /// The latent generator; exposed so callers can replay the draws a step will make.
    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn normalized_update(&mut self, g: &DMatrix<f64>, d: &DMatrix<f64>, config: &TrainConfig) {
        let seed = self.iteration == 0 && config.power_init == PowerInit::FirstGradient;
        self.power.update(g, d, config.lambda, seed);
        apply_normalized(
            self.params.output_mut(),
            g,
            &self.power.output,
            config.mu,
            config.epsilon,
        );
        apply_normalized(
            self.params.hidden_mut(),
            d,
            &self.power.hidden,
            config.mu,
            config.epsilon,
        );
    }

    fn check_finite(&self, g: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<()> {
        if all_finite(g) && all_finite(d) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                iteration: self.iteration + 1,
            })
        }
    }

    fn finish_step(&mut self) -> Result<()> {
        self.iteration += 1;
        if self.params.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                iteration: self.iteration,
            })
        }
    }

    /// One iteration with two fresh latents and an unnormalized update
    /// (normalized when `config.normalize_preliminary` is set).
    pub fn step_preliminary(&mut self, config: &TrainConfig, x: &[f64]) -> Result<StepReport> {
        let shape = self.shape();
        check_len("training vector", shape.output, x.len())?;
        let z = latent_batch(&mut self.rng, shape.latent, 2);
        let c1 = forward(&self.params, z.column(0).as_slice())?;
        let c2 = forward(&self.params, z.column(1).as_slice())?;
        let r1 = residual(c1.y.as_slice(), x, c2.y.as_slice(), &config.kernel);
        let r2 = residual(c2.y.as_slice(), x, c1.y.as_slice(), &config.kernel);
        let p1 = backprop_pair(&self.params, &c1, r1.as_slice())?;
        let p2 = backprop_pair(&self.params, &c2, r2.as_slice())?;

        let mut g = DMatrix::zeros(shape.output, shape.hidden + 1);
        let mut d = DMatrix::zeros(shape.hidden, shape.latent + 1);
        add_outer_augmented(&mut g, &p1.v, &c1.s);
        add_outer_augmented(&mut g, &p2.v, &c2.s);
        add_outer_augmented(&mut d, &p1.u, &c1.z);
        add_outer_augmented(&mut d, &p2.u, &c2.z);
        self.check_finite(&g, &d)?;

        if config.normalize_preliminary {
            self.normalized_update(&g, &d, config);
        } else {
            *self.params.output_mut() -= config.mu * &g;
            *self.params.hidden_mut() -= config.mu * &d;
        }
        self.finish_step()?;
        Ok(StepReport {
            output_grad: g,
            hidden_grad: d,
        })
    }

    /// One delayed-sample iteration: a single fresh latent, paired with the
    /// previous iteration's sample, followed by a power-normalized update.
    pub fn step_final(&mut self, config: &TrainConfig, x: &[f64]) -> Result<StepReport> {
        let shape = self.shape();
        check_len("training vector", shape.output, x.len())?;
        check_len("previous sample columns", 1, self.prev.cols())?;
        let z = latent_batch(&mut self.rng, shape.latent, 1);
        let cache = forward(&self.params, z.as_slice())?;
        let y_prev = self.prev.y.column(0).into_owned();
        let r = residual(cache.y.as_slice(), x, y_prev.as_slice(), &config.kernel);
        let pair = backprop_pair(&self.params, &cache, r.as_slice())?;

        let mut g = DMatrix::zeros(shape.output, shape.hidden + 1);
        let mut d = DMatrix::zeros(shape.hidden, shape.latent + 1);
        add_outer_augmented(&mut g, &pair.v, &cache.s);
        add_outer_augmented(
            &mut g,
            &self.prev.v.column(0).into_owned(),
            &self.prev.s.column(0).into_owned(),
        );
        add_outer_augmented(&mut d, &pair.u, &cache.z);
        add_outer_augmented(
            &mut d,
            &self.prev.u.column(0).into_owned(),
            &self.prev.z.column(0).into_owned(),
        );
        self.check_finite(&g, &d)?;

        self.normalized_update(&g, &d, config);
        let LayerCache { z, s, y, .. } = cache;
        self.prev = PrevSamples {
            z: column(z),
            s: column(s),
            y: column(y),
            v: column(pair.v),
            u: column(pair.u),
        };
        self.finish_step()?;
        Ok(StepReport {
            output_grad: g,
            hidden_grad: d,
        })
    }

    /// Delayed-sample iteration over a `k × K` block of training vectors.
    pub fn step_batched(
        &mut self,
        config: &TrainConfig,
        x_batch: &DMatrix<f64>,
    ) -> Result<StepReport> {
        let shape = self.shape();
        let cols = x_batch.ncols();
        check_len("training block rows", shape.output, x_batch.nrows())?;
        check_len("previous block columns", self.prev.cols(), cols)?;
        let z = latent_batch(&mut self.rng, shape.latent, cols);
        let cache = forward_batch(&self.params, &z)?;

        let mut r = DMatrix::zeros(shape.output, cols);
        for j in 0..cols {
            let rj = residual(
                cache.y.column(j).as_slice(),
                x_batch.column(j).as_slice(),
                self.prev.y.column(j).as_slice(),
                &config.kernel,
            );
            r.set_column(j, &rj);
        }
        let pair = backprop_batch(&self.params, &cache, &r)?;

        let mut g = DMatrix::zeros(shape.output, shape.hidden + 1);
        let mut d = DMatrix::zeros(shape.hidden, shape.latent + 1);
        add_block_augmented(&mut g, &pair.v, &cache.s);
        add_block_augmented(&mut g, &self.prev.v, &self.prev.s);
        add_block_augmented(&mut d, &pair.u, &cache.z);
        add_block_augmented(&mut d, &self.prev.u, &self.prev.z);
        self.check_finite(&g, &d)?;

        self.normalized_update(&g, &d, config);
        self.prev = PrevSamples {
            z: cache.z,
            s: cache.s,
            y: cache.y,
            v: pair.v,
            u: pair.u,
        };
        self.finish_step()?;
        Ok(StepReport {
            output_grad: g,
            hidden_grad: d,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub empirical_loss: f64,
    pub mmd_score: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub points: Vec<TracePoint>,
}

impl LossTrace {
    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }

    /// Writes the trace as CSV; `comment` (if any) goes in a leading `#` line.
    pub fn write_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let mut out = Vec::new();
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "iteration,empirical_loss,mmd_score,wall_ms")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{:e},{:e},{}",
                p.iteration, p.empirical_loss, p.mmd_score, p.wall_ms
            )?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Fixed evaluation material for the loss trace.
struct Evaluator {
    z1: DMatrix<f64>,
    z2: DMatrix<f64>,
    x: DMatrix<f64>,
    x_set: SampleSet,
}

impl Evaluator {
    fn new(config: &TrainConfig, data: &Dataset) -> Self {
        let count = config.eval_samples.min(data.count());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(EVAL_STREAM);
        let z1 = latent_batch(&mut rng, config.shape.latent, count);
        let z2 = latent_batch(&mut rng, config.shape.latent, count);
        // Evenly strided slice of the data.
        let x = DMatrix::from_fn(data.dim(), count, |r, c| {
            data.column(c * data.count() / count)[r]
        });
        let x_set = SampleSet::new(x.clone()).expect("non-empty evaluation slice");
        Self { z1, z2, x, x_set }
    }

    fn evaluate(&self, params: &GeneratorParams, kernel: &KernelSpec) -> Result<(f64, f64)> {
        let y1 = forward_batch(params, &self.z1)?.y;
        let y2 = forward_batch(params, &self.z2)?.y;
        let count = self.x.ncols();
        let mut loss = 0.0;
        for j in 0..count {
            let (a, b, x) = (y1.column(j), y2.column(j), self.x.column(j));
            loss += kernel.eval_sq_dist(sq_dist(a.as_slice(), b.as_slice()))
                - kernel.eval_sq_dist(sq_dist(a.as_slice(), x.as_slice()))
                - kernel.eval_sq_dist(sq_dist(b.as_slice(), x.as_slice()));
        }
        let score = mmd_score(&SampleSet::new(y1)?, &self.x_set, kernel)?;
        Ok((loss / count as f64, score))
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub trace: LossTrace,
}

impl TrainOutcome {
    pub fn params(&self) -> &GeneratorParams {
        &self.state.params
    }
}

/// Runs `config.rounds` sweeps over the dataset with the configured rule.
///
/// The batched rule consumes whole blocks only; a trailing partial block of
/// each sweep is skipped.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_len("dataset dimension", config.shape.output, data.dim())?;
    if data.count() == 0 {
        return Err(Error::EmptyDataset);
    }
    if config.algorithm == Algorithm::Batched && data.count() < config.batch {
        return Err(Error::InvalidParameter(format!(
            "dataset has {} vectors, fewer than one batch of {}",
            data.count(),
            config.batch
        )));
    }
    let started = Instant::now();
    let mut state = TrainerState::new(config)?;
    let evaluator = Evaluator::new(config, data);
    let mut trace = LossTrace::default();
    let record = |state: &TrainerState, trace: &mut LossTrace| -> Result<()> {
        let (empirical_loss, mmd) = evaluator.evaluate(&state.params, &config.kernel)?;
        trace.points.push(TracePoint {
            iteration: state.iteration,
            empirical_loss,
            mmd_score: mmd,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        Ok(())
    };
    record(&state, &mut trace)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.count()).collect();
    for _ in 0..config.rounds {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        match config.algorithm {
            Algorithm::Preliminary | Algorithm::Final => {
                for &i in &order {
                    let x = data.column(i);
                    if config.algorithm == Algorithm::Final {
                        state.step_final(config, x)?;
                    } else {
                        state.step_preliminary(config, x)?;
                    }
                    if config.trace_every > 0 && state.iteration % config.trace_every == 0 {
                        record(&state, &mut trace)?;
                    }
                }
            }
            Algorithm::Batched => {
                for block in order.chunks_exact(config.batch) {
                    let x =
                        DMatrix::from_fn(data.dim(), block.len(), |r, c| data.column(block[c])[r]);
                    state.step_batched(config, &x)?;
                    if config.trace_every > 0 && state.iteration % config.trace_every == 0 {
                        record(&state, &mut trace)?;
                    }
                }
            }
        }
    }
    if trace.last().map(|p| p.iteration) != Some(state.iteration) {
        record(&state, &mut trace)?;
    }
    Ok(TrainOutcome { state, trace })
}

/// Draws `count` generator outputs from i.i.d. standard normal latents.
pub fn generate(params: &GeneratorParams, count: usize, seed: u64) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = latent_batch(&mut rng, params.shape().latent, count);
    SampleSet::new(forward_batch(params, &z)?.y)
}
