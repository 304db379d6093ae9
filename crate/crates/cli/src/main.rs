//! `sanm`: noise injection, training, ablation grids, evaluation, and plots.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.

mod ablate;
mod experiment;
mod plot;
mod svg;
mod train;
mod visual;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sanm::data::store;
use sanm::noise::{noise_report, NoiseKind};
use sanm::trainer::apply_toggles;
use sanm::{Exec, SanmError};

use experiment::{parse_noise_setting, DataSection, Experiment, Source};

/// Errors the user fixes by changing arguments; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "sanm", version, about = "Adversarial noisy masking for learning with noisy labels")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Corrupt a dataset's training labels and store it with a noise report.
    Inject(InjectArgs),
    /// Train one configuration into a fresh run directory.
    Train(TrainArgs),
    /// Score a run's checkpoint on the clean test split.
    Evaluate(EvaluateArgs),
    /// Run a configuration grid over noise settings and seeds.
    Ablate(AblateArgs),
    /// Charts and image galleries from run or ablation directories.
    Plot(PlotArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    source: Source,
    /// CIFAR batch directory or a stored dataset.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Synthetic sizes as train,test,side.
    #[arg(long, default_value = "600,200,32")]
    synthetic: String,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "symmetric")]
    kind: NoiseKind,
    #[arg(long)]
    rate: f64,
    /// Class transition table (TOML) for asymmetric noise.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (flat TOML: data keys plus training config keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mu=0.3`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Component switches, e.g. `amg=on,nlr=off,smr=off`.
    #[arg(long)]
    toggles: Option<String>,
    /// Training seed; also the noise seed unless the file pins `noise_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Root under which the run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Also write the run summary to this path.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Activation-map heatmaps with peak markers for the first N training samples.
    #[arg(long, default_value_t = 0)]
    dump_cams: usize,
    /// Original/masked pairs for these training sample indices (comma separated).
    #[arg(long, value_delimiter = ',')]
    dump_masks: Vec<usize>,
    /// Original/masked/reconstructed triptychs for the first N training samples.
    #[arg(long, default_value_t = 0)]
    dump_triptychs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "final")]
    checkpoint: String,
    /// Score on the test split of this stored dataset instead.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "components")]
    grid: ablate::Grid,
    /// Mask ratios for the mu grid.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.5,0.8")]
    mus: Vec<f64>,
    /// Noise settings as columns, e.g. `sym-20,sym-50,asym-40`. Defaults to the file's.
    #[arg(long, value_delimiter = ',')]
    noise: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Number of child processes; 1 runs the grid in this process.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories and/or ablation directories.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
    /// (original, masked, activation map, reconstruction) rows per run.
    #[arg(long, default_value_t = 0)]
    gallery: usize,
    #[arg(long, default_value = "final")]
    checkpoint: String,
}

/// Compute device from `SANM_DEVICE`: `cpu` (rayon) or `cpu-seq`.
fn device() -> Result<Option<bool>> {
    match std::env::var("SANM_DEVICE") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim() {
            "" => Ok(None),
            "cpu" => Ok(Some(true)),
            "cpu-seq" => Ok(Some(false)),
            other => Err(usage(format!(
                "SANM_DEVICE={other} is not available; this build supports `cpu` and `cpu-seq`"
            ))),
        },
    }
}

fn resolve_experiment(args: &ConfigArgs) -> Result<Experiment> {
    let mut exp = match &args.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            Experiment::load(p)?
        }
        None => Experiment::default(),
    };
    let pairs = args
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set {kv}: expected KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    exp = exp.with_overrides(&pairs)?;
    if let Some(t) = &args.toggles {
        exp.train = apply_toggles(&exp.train, t)?;
    }
    if let Some(s) = args.seed {
        exp.train.seed = s;
    }
    if let Some(par) = device()? {
        exp.train.parallel = par;
    }
    exp.validate()?;
    Ok(exp)
}

fn parse_synthetic(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--synthetic {s}: expected train,test,side")))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(usage(format!("--synthetic {s}: expected train,test,side"))),
    }
}

fn cmd_inject(a: InjectArgs) -> Result<()> {
    let (synthetic_train, synthetic_test, synthetic_side) = parse_synthetic(&a.data.synthetic)?;
    let section = DataSection {
        data: a.data.source,
        data_dir: a.data.data_dir,
        train_per_class: a.data.train_per_class,
        test_per_class: a.data.test_per_class,
        synthetic_train,
        synthetic_test,
        synthetic_side,
        synthetic_seed: a.seed,
        noise_kind: Some(a.kind),
        noise_rate: a.rate,
        noise_seed: Some(a.seed),
        noise_map: a.map,
    };
    section.validate()?;
    if a.out.exists() && fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(usage(format!("{} already exists and is not empty", a.out.display())));
    }
    let exec = device()?.map_or(Exec::default(), Exec::from_flag);
    let loaded = section.load(a.seed, exec)?;
    let report = noise_report(&loaded.splits.train);
    store::save(&a.out, &loaded.splits, loaded.noise.as_ref(), Some(&report))?;
    println!(
        "{}: {} of {} training labels flipped ({:.4})",
        a.out.display(),
        report.flipped,
        report.samples,
        report.flip_fraction
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let exp = resolve_experiment(&a.config)?;
    let dumps = train::Dumps {
        cams: a.dump_cams,
        masks: a.dump_masks,
        triptychs: a.dump_triptychs,
    };
    let summary = train::train_experiment(&exp, &a.out, &dumps)?;
    if let Some(p) = &a.summary {
        fs::write(p, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    let pct = |v: Option<f64>| v.map_or("-".into(), |x| format!("{:.2}%", 100.0 * x));
    eprintln!("best {} / last {}", pct(summary.best_acc), pct(summary.last_acc));
    println!("{}", summary.run_dir.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if !a.run.join("manifest.json").is_file() {
        return Err(usage(format!("{} is not a run directory", a.run.display())));
    }
    let ev = train::evaluate_run(&a.run, &a.checkpoint, a.data.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&ev)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = resolve_experiment(&a.config)?;
    let columns = if a.noise.is_empty() {
        vec![base.data.noise_setting().unwrap_or(sanm::trainer::NoiseSetting {
            kind: NoiseKind::Symmetric,
            rate: 0.0,
        })]
    } else {
        a.noise.iter().map(|s| parse_noise_setting(s)).collect::<sanm::Result<_>>()?
    };
    if a.seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    let (dir, rec) = ablate::run_ablation(ablate::AblateArgs {
        base: &base,
        grid: a.grid,
        mus: &a.mus,
        columns: &columns,
        seeds: &a.seeds,
        parallel: a.parallel.max(1),
        out_root: &a.out,
    })?;
    print!("{}", rec.table.to_markdown());
    eprintln!("wrote {}", dir.display());
    let failures: usize = rec.table.cells.iter().map(|c| c.failures()).sum();
    if failures > 0 {
        anyhow::bail!("{failures} grid runs failed; see {}", dir.join("jobs").display());
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let report = plot::plot(&a.paths, &a.out, a.gallery, &a.checkpoint)?;
    for p in &report.skipped {
        eprintln!("skipping {}: not a run or ablation directory", p.display());
    }
    if report.written.is_empty() {
        return Err(usage("none of the given paths is a run or ablation directory"));
    }
    for p in &report.written {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(s) = cause.downcast_ref::<SanmError>() {
            return if s.is_config() { 2 } else { 3 };
        }
    }
    3
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Cmd::Inject(a) => cmd_inject(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
