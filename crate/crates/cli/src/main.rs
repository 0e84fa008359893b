//! `drf`: generate data, train, evaluate, benchmark the gate and run the
//! full reproduction pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drf_core::experiment::{self, OutputDir, Profile, ReproConfig};
use drf_core::gate::{self, Direction, FallbackRule, GateMode, GatePolicy};
use drf_core::metrics::{self, SweepOptions};
use drf_core::model::Arch;
use drf_core::par::Exec;
use drf_core::pendulum::{self, DatasetConfig, DEFAULT_DT};
use drf_core::trainer::{self, TrainConfig};
use drf_core::DrfError;

const EXIT_IO: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "drf", version, about = "Deep recursive filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a noisy pendulum dataset.
    Generate(GenerateArgs),
    /// Train one architecture.
    Train(TrainArgs),
    /// Interval metrics across dropout rates.
    Eval(EvalArgs),
    /// Compare gating policies.
    GateBench(GateBenchArgs),
    /// Run every stage end to end.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    n_seq: usize,
    #[arg(long, default_value_t = 75)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.5)]
    r_max: f64,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<Arch>,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Expected architecture; a different checkpoint is a mismatch.
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.05,0.1,0.2,0.3,0.4,0.5"
    )]
    dropout_rates: Vec<f64>,
    #[arg(long, default_value_t = metrics::DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_PASSES)]
    n_passes: usize,
    /// Frames timed per rate; 0 skips timing.
    #[arg(long, default_value_t = 200)]
    timed_frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GateBenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Data used to pick the threshold; defaults to `--data`.
    #[arg(long)]
    calibration_data: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "never,random,kalman_threshold,always"
    )]
    policies: Vec<GateMode>,
    #[arg(long, default_value_t = 50.0)]
    tau_percentile: f64,
    #[arg(long, value_enum, default_value_t = DirectionArg::Below)]
    direction: DirectionArg,
    #[arg(long, default_value_t = 0.5)]
    p_random: f64,
    #[arg(long, value_enum, default_value_t = FallbackArg::Median)]
    fallback: FallbackArg,
    #[arg(long, default_value_t = metrics::DEFAULT_PASSES)]
    n_passes: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum DirectionArg {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FallbackArg {
    Median,
    NonFiringMedian,
}

#[derive(Debug, Args)]
struct ReproArgs {
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// TOML overrides applied on top of the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<DrfError> for Failure {
    fn from(e: DrfError) -> Self {
        let code = match e.root() {
            DrfError::Io(_) | DrfError::Format(_) | DrfError::Json(_) => EXIT_IO,
            DrfError::Divergence { .. } => EXIT_DIVERGED,
            DrfError::ConfigMismatch(_) => EXIT_MISMATCH,
            DrfError::Parameter(_) => EXIT_USAGE,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

/// Overlay `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with a TOML file. Unknown keys are rejected.
fn resolve<T>(defaults: &T, path: Option<&Path>) -> CliResult<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut value = toml::Value::try_from(defaults).map_err(|e| usage(format!("config: {e}")))?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(DrfError::from)?;
        let over: toml::Table =
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let known = value.as_table().expect("config serializes to a table");
        if let Some(k) = over.keys().find(|k| !known.contains_key(*k)) {
            return Err(usage(format!("{}: unknown key {k:?}", p.display())));
        }
        merge(&mut value, toml::Value::Table(over));
    }
    value.try_into().map_err(|e| usage(format!("config: {e}")))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> CliResult<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(v).map_err(DrfError::from)?,
    )
    .map_err(DrfError::from)?;
    Ok(())
}

fn check_free(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(DrfError::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass --force to overwrite", path.display()),
        ))
        .into());
    }
    Ok(())
}

fn load_model(path: &Path, arch: Option<Arch>) -> CliResult<drf_core::model::Model> {
    let model = trainer::load_checkpoint(path)?;
    if let Some(a) = arch {
        if a != model.config.arch {
            return Err(DrfError::ConfigMismatch(format!(
                "checkpoint holds {} but {a} was requested",
                model.config.arch
            ))
            .into());
        }
    }
    Ok(model)
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    check_free(&a.out, a.force)?;
    let cfg = DatasetConfig {
        dt: a.dt,
        ..DatasetConfig::new(a.n_seq, a.seq_len, a.r_max, a.seed)
    };
    let data = pendulum::generate_dataset(&cfg, Exec::default())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(DrfError::from)?;
    }
    pendulum::save_dataset(&a.out, &data, &cfg)?;
    println!(
        "wrote {} sequences, {} frames, mean noise {:.4} to {}",
        data.len(),
        data.n_frames(),
        data.mean_noise(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&TrainConfig::default(), a.config.as_deref())?;
    if let Some(arch) = a.arch {
        cfg.arch = arch;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let (data, _) = pendulum::load_dataset(&a.data)?;
    let out = OutputDir::prepare(&a.out, a.force)?;
    write_json(&out.join("config.json")?, &cfg)?;
    let (model, log) = trainer::train_with(&cfg, &data, |r| {
        eprintln!(
            "epoch {:>4}  train nll {:>9.4}  val nll {:>9.4}  val mae {:.4}  {:.1}s",
            r.epoch, r.train_nll, r.val_nll, r.val_mae, r.seconds
        );
    })?;
    trainer::save_checkpoint(
        &model,
        &out.join(&format!("model.{}", trainer::CHECKPOINT_EXT))?,
    )?;
    fs::write(out.join("train_log.csv")?, log.to_csv()).map_err(DrfError::from)?;
    let dir = out.commit()?;
    println!(
        "trained {} for {} epochs, best val mae {:.4}; wrote {}",
        cfg.arch,
        cfg.epochs,
        log.best_val_mae().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint, a.arch)?;
    let (data, dcfg) = pendulum::load_dataset(&a.data)?;
    let r_max = dcfg.map_or(f64::NAN, |c| c.r_max);
    let out = OutputDir::prepare(&a.out, a.force)?;
    let opts = SweepOptions {
        n_passes: a.n_passes,
        level: a.level,
        seed: a.seed,
        timed_frames: a.timed_frames,
    };
    write_json(
        &out.join("config.json")?,
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "dropout_rates": a.dropout_rates,
            "level": a.level,
            "n_passes": a.n_passes,
            "timed_frames": a.timed_frames,
            "seed": a.seed,
            "hardware": metrics::hardware_descriptor(),
        }),
    )?;
    let reports = metrics::sweep_tradeoff(&model, &data, r_max, &a.dropout_rates, &opts)?;
    fs::write(out.join("eval.csv")?, metrics::reports_csv(&reports)).map_err(DrfError::from)?;
    fs::write(out.join("curve.csv")?, metrics::curve_csv(&reports)).map_err(DrfError::from)?;
    let dir = out.commit()?;
    print!("{}", metrics::reports_csv(&reports));
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_gate_bench(a: GateBenchArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint, a.arch)?;
    if model.config.arch != Arch::Drf {
        return Err(DrfError::ConfigMismatch(format!(
            "gating needs a drf checkpoint, got {}",
            model.config.arch
        ))
        .into());
    }
    let (data, _) = pendulum::load_dataset(&a.data)?;
    let calib = match &a.calibration_data {
        Some(p) => pendulum::load_dataset(p)?.0,
        None => data.clone(),
    };
    let out = OutputDir::prepare(&a.out, a.force)?;
    let direction = match a.direction {
        DirectionArg::Below => Direction::Below,
        DirectionArg::Above => Direction::Above,
    };
    let fallback = match a.fallback {
        FallbackArg::Median => FallbackRule::Median,
        FallbackArg::NonFiringMedian => FallbackRule::NonFiringMedian,
    };
    let calib_inputs = metrics::collect_decoder_inputs(&model, &calib, 64)?;
    let c = gate::calibrate(
        &model,
        &calib_inputs,
        a.tau_percentile,
        direction,
        fallback,
        a.n_passes,
        a.seed,
    )?;
    let policies: Vec<GatePolicy> = a
        .policies
        .iter()
        .map(|&mode| GatePolicy {
            mode,
            p_random: a.p_random,
            tau: c.tau,
            direction,
            fallback_var: c.fallback_var,
        })
        .collect();
    write_json(
        &out.join("config.json")?,
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "calibration": c,
            "policies": policies,
            "n_passes": a.n_passes,
            "level": a.level,
            "seed": a.seed,
            "hardware": metrics::hardware_descriptor(),
        }),
    )?;
    let inputs = metrics::collect_decoder_inputs(&model, &data, 64)?;
    let report = gate::gate_benchmark(&model, &inputs, &policies, a.n_passes, a.level, a.seed)?;
    fs::write(out.join("gate_bench.csv")?, report.table_csv()).map_err(DrfError::from)?;
    fs::write(out.join("gate_log.csv")?, report.frames_csv()).map_err(DrfError::from)?;
    let dir = out.commit()?;
    print!("{}", report.table_csv());
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_repro(a: ReproArgs) -> CliResult<()> {
    let mut cfg = resolve(&ReproConfig::new(a.profile), a.config.as_deref())?;
    cfg.profile = a.profile;
    if let Some(seed) = a.seed {
        cfg.data_seed = seed;
    }
    cfg.validate()?;
    let out = OutputDir::prepare(&a.out, a.force)?;
    let res = experiment::run_repro(&cfg, out, &mut |line| eprintln!("{line}"))?;
    for (name, ok) in &res.summary.criteria {
        println!("{:<26} {}", name, if *ok { "pass" } else { "fail" });
    }
    println!(
        "{:<26} {}",
        "gate_time_ordering",
        if res.timing.gate_time_ordering {
            "pass"
        } else {
            "fail"
        }
    );
    println!("ood mae ordering: {}", res.summary.mae_ordering);
    eprintln!("wrote {}", res.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GateBench(a) => cmd_gate_bench(a),
        Command::Repro(a) => cmd_repro(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
