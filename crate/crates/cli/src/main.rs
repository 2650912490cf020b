//! `kerngen` command-line tool: train, generate, score and the SGD variant bench.
//!
//! Machine-readable results go to standard output (one JSON line) or to files;
//! diagnostics go to standard error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kerngen::io::{
    load_checkpoint, load_dataset, save_checkpoint, sidecar_path, write_csv, write_rawf64,
    DataFormat, ScaleMode, Sidecar,
};
use kerngen::kernel::{mmd_score, KernelSpec};
use kerngen::sa_lab::{
    compare_variants, lyapunov_prediction, random_theta_star, sample_rng, transient_samples,
    ComparisonReport, RegressionModel, SaVariant,
};
use kerngen::trainer::{generate, train, Algorithm, TrainConfig};
use kerngen::NetShape;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "kerngen",
    version,
    about = "Kernel-distance training of two-layer generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Draw samples from a trained generator.
    Generate(GenerateArgs),
    /// Kernel distance between two sample files (smaller is better).
    #[command(
        long_about = "Prints the biased MMD score between two sample files as JSON.\n\n\
                      Smaller values mean the two sets are closer: better-quality generated \
                      samples produce smaller scores against held-out data."
    )]
    Score(ScoreArgs),
    /// Compare classical, batched, smoothed and delayed SGD on linear regression.
    SaBench(SaBenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_parser = DataFormat::from_str)]
    format: Option<DataFormat>,
    /// Rescaling applied after loading.
    #[arg(long, value_parser = ScaleMode::from_str, default_value = "none")]
    scale: ScaleMode,
    /// CSV only: one vector per row instead of per column.
    #[arg(long)]
    transpose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    data_opts: DataArgs,
    /// JSON file with (partial) training configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_parser = Algorithm::from_str)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations between trace points (0: first and last only).
    #[arg(long)]
    trace_every: Option<u64>,
    #[arg(long)]
    shuffle: bool,
    /// Checkpoint path; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, `.csv` or raw f64 otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    bandwidth: f64,
    #[command(flatten)]
    data_opts: DataArgs,
}

#[derive(Args)]
struct SaBenchArgs {
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    /// Classical step size; the batch variant uses K times this.
    #[arg(long, default_value_t = 1e-3)]
    mu: f64,
    /// Comma-separated list; the first entry is the reference.
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_variant,
        default_value = "classical,batch:10,smooth:0.9,delay:5"
    )]
    variants: Vec<VariantSpec>,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-sample comparison CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
enum VariantSpec {
    Classical,
    Batch(usize),
    Smooth(f64),
    Delay(usize),
}

impl VariantSpec {
    fn with_step(self, mu: f64) -> SaVariant {
        match self {
            Self::Classical => SaVariant::Classical { mu },
            Self::Batch(k) => SaVariant::Batch {
                mu: mu * k as f64,
                k,
            },
            Self::Smooth(rho) => SaVariant::Smoothed { mu, rho },
            Self::Delay(delay) => SaVariant::Delayed { mu, delay },
        }
    }
}

fn parse_variant(s: &str) -> std::result::Result<VariantSpec, String> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let spec = match (kind, arg) {
        ("classical", None) => VariantSpec::Classical,
        ("batch", Some(a)) => {
            VariantSpec::Batch(a.parse().map_err(|e| format!("batch size {a:?}: {e}"))?)
        }
        ("smooth", Some(a)) => {
            VariantSpec::Smooth(a.parse().map_err(|e| format!("smoothing {a:?}: {e}"))?)
        }
        ("delay", Some(a)) => {
            VariantSpec::Delay(a.parse().map_err(|e| format!("delay {a:?}: {e}"))?)
        }
        _ => {
            return Err(format!(
                "unknown variant {s:?} (classical, batch:K, smooth:RHO, delay:K)"
            ))
        }
    };
    spec.with_step(1.0).validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Score(args) => cmd_score(args),
        Command::SaBench(args) => cmd_sa_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn print_json(value: Value) {
    println!("{value}");
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn effective_config(args: &TrainArgs, data_dim: usize) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::mnist_defaults())?;
    if let Some(path) = &args.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, overlay);
    }
    let mut config: TrainConfig = serde_json::from_value(value).context("invalid configuration")?;
    config.shape = NetShape {
        latent: args.latent.unwrap_or(config.shape.latent),
        hidden: args.hidden.unwrap_or(config.shape.hidden),
        output: data_dim,
    };
    if let Some(h) = args.bandwidth {
        config.kernel = KernelSpec::new(h)?;
    }
    macro_rules! flag {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    flag!(
        mu,
        lambda,
        epsilon,
        batch,
        rounds,
        algorithm,
        seed,
        trace_every
    );
    config.shuffle |= args.shuffle;
    config.validate()?;
    Ok(config)
}

fn data_format(path: &Path, explicit: Option<DataFormat>) -> DataFormat {
    explicit.unwrap_or_else(|| DataFormat::infer(path))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let opts = &args.data_opts;
    let data = load_dataset(
        &args.data,
        data_format(&args.data, opts.format),
        opts.scale,
        opts.transpose,
    )
    .with_context(|| format!("loading {}", args.data.display()))?;
    let config = effective_config(&args, data.dim())?;
    eprintln!(
        "training {} on {} vectors ({:?}, {} rounds)",
        config.shape,
        data.count(),
        config.algorithm,
        config.rounds
    );
    let outcome = train(&config, &data)?;
    let sidecar = Sidecar {
        config: config.clone(),
        data_scale: opts.scale,
        iteration: outcome.state.iteration,
    };
    save_checkpoint(
        &args.out,
        outcome.params(),
        &outcome.state.power,
        outcome.state.iteration,
        Some(&sidecar),
    )?;
    if let Some(trace) = &args.trace {
        outcome
            .trace
            .write_csv(trace, Some(&serde_json::to_string(&config)?))?;
    }
    let last = outcome.trace.last().context("empty loss trace")?;
    print_json(json!({
        "iteration": outcome.state.iteration,
        "empirical_loss": last.empirical_loss,
        "mmd_score": last.mmd_score,
        "checkpoint": args.out,
        "sidecar": sidecar_path(&args.out),
    }));
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let samples = generate(&ckpt.params, args.count, args.seed)?;
    if let Some(bad) = samples
        .as_matrix()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        bail!("generated value {bad} outside [0, 1]");
    }
    match DataFormat::infer(&args.out) {
        DataFormat::Csv => write_csv(&args.out, samples.as_matrix())?,
        DataFormat::Rawf64 => write_rawf64(&args.out, samples.as_matrix())?,
        DataFormat::Idx => bail!("IDX output is not supported; use .csv or a raw f64 file"),
    }
    print_json(json!({
        "count": samples.count(),
        "dim": samples.dim(),
        "out": args.out,
    }));
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let opts = &args.data_opts;
    let load = |path: &Path| {
        load_dataset(
            path,
            data_format(path, opts.format),
            opts.scale,
            opts.transpose,
        )
        .with_context(|| format!("loading {}", path.display()))
    };
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let kernel = KernelSpec::new(args.bandwidth)?;
    let score = mmd_score(&a.to_sample_set(), &b.to_sample_set(), &kernel)?;
    print_json(json!({
        "mmd_score": score,
        "bandwidth": args.bandwidth,
        "count_a": a.count(),
        "count_b": b.count(),
    }));
    Ok(())
}

fn cmd_sa_bench(args: SaBenchArgs) -> Result<()> {
    let theta_star = random_theta_star(&mut sample_rng(args.seed.wrapping_add(1)), args.dim);
    let model = RegressionModel::new(theta_star, args.noise_var)?;
    let variants: Vec<SaVariant> = args.variants.iter().map(|v| v.with_step(args.mu)).collect();
    let report = compare_variants(&model, &variants, args.samples, args.seed)?;
    write_bench_csv(&args.out, &report)?;

    let prediction = lyapunov_prediction(&model, args.mu)?;
    let transient = transient_samples(&model, args.mu, 1e-3)?;
    if transient >= args.samples {
        eprintln!(
            "note: {} samples do not reach the {transient}-sample transient",
            args.samples
        );
    }
    let series: Vec<Value> = report
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "variant": s.variant.label(),
                "mu": s.variant.mu(),
                "grad_evals": s.grad_evals,
                "final_err_power": s.err_power.last(),
                "steady_err_power": ComparisonReport::tail_mean(&s.err_power, transient),
                "steady_rel_diff_power": (i > 0).then(|| ComparisonReport::tail_mean(&s.rel_diff_power, transient)),
            })
        })
        .collect();
    print_json(json!({
        "dim": args.dim,
        "noise_var": args.noise_var,
        "mu": args.mu,
        "samples": args.samples,
        "seed": args.seed,
        "lyapunov_prediction": prediction,
        "transient_samples": transient,
        "variants": series,
    }));
    Ok(())
}

fn write_bench_csv(path: &Path, report: &ComparisonReport) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "sample_index,variant,err_power,rel_diff_power")?;
    for s in &report.series {
        let label = s.variant.label();
        for (t, err) in s.err_power.iter().enumerate() {
            match s.rel_diff_power.get(t) {
                Some(rd) => writeln!(out, "{},{label},{err:e},{rd:e}", t + 1)?,
                None => writeln!(out, "{},{label},{err:e},", t + 1)?,
            }
        }
    }
    out.flush()?;
    Ok(())
}
