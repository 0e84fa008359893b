//! One-shot reproduction pipeline: generate, train every architecture over
//! several seeds, evaluate out of distribution, sweep dropout rates,
//! calibrate and benchmark the gate, and write a summary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DrfError, Result};
use crate::gate::{self, Direction, FallbackRule, GateMode, GatePolicy};
use crate::metrics::{self, DecoderInputs, EvalReport, SweepOptions};
use crate::model::{Arch, Model};
use crate::par::Exec;
use crate::pendulum::{self, DatasetConfig};
use crate::trainer::{self, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = DrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(DrfError::Parameter(format!("unknown profile {s:?}"))),
        }
    }
}

pub const STAGES: [&str; 7] = [
    "generate",
    "train",
    "evaluate",
    "sweep",
    "calibrate",
    "gate",
    "summarize",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproConfig {
    pub profile: Profile,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_ood: usize,
    pub seq_len: usize,
    pub r_max_train: f64,
    pub r_max_ood: f64,
    pub train: TrainConfig,
    pub dropout_rates: Vec<f64>,
    pub n_passes: usize,
    pub level: f64,
    pub tau_percentile: f64,
    pub direction: Direction,
    pub fallback: FallbackRule,
    pub p_random: f64,
}

impl ReproConfig {
    pub fn new(profile: Profile) -> Self {
        let (n_train, n_ood, epochs, lr) = match profile {
            Profile::Desk => (500, 100, 100, 1e-3),
            Profile::Paper => (2000, 200, 200, 1e-4),
        };
        ReproConfig {
            profile,
            data_seed: 7,
            seeds: vec![0, 1, 2],
            n_train,
            n_ood,
            seq_len: 75,
            r_max_train: 0.5,
            r_max_ood: 0.75,
            train: TrainConfig {
                epochs,
                lr,
                ..TrainConfig::default()
            },
            dropout_rates: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            n_passes: metrics::DEFAULT_PASSES,
            level: metrics::DEFAULT_LEVEL,
            tau_percentile: 50.0,
            direction: Direction::Below,
            fallback: FallbackRule::Median,
            p_random: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() || self.n_train < 2 || self.n_ood == 0 {
            return Err(DrfError::Parameter(
                "need at least one seed and non-empty datasets".into(),
            ));
        }
        if self.dropout_rates.len() < 2
            || self.dropout_rates.iter().any(|r| !(0.0..1.0).contains(r))
        {
            return Err(DrfError::Parameter(
                "need at least two dropout rates in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn train_data(&self) -> DatasetConfig {
        DatasetConfig::new(self.n_train, self.seq_len, self.r_max_train, self.data_seed)
    }

    fn ood_data(&self) -> DatasetConfig {
        DatasetConfig::new(
            self.n_ood,
            self.seq_len,
            self.r_max_ood,
            pendulum::sub_seed(self.data_seed, 1),
        )
    }
}

/// Output directory staged under a sibling path and renamed into place on
/// success, so a finished directory is never half-written.
#[derive(Debug)]
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
}

impl OutputDir {
    pub fn prepare(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(DrfError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists; pass --force to overwrite", target.display()),
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| DrfError::Parameter(format!("bad output path {}", target.display())))?;
        let mut staged = name.to_os_string();
        staged.push(".partial");
        let staging = target.with_file_name(staged);
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(OutputDir {
            target: target.to_path_buf(),
            staging,
            force,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn join(&self, rel: &str) -> Result<PathBuf> {
        let p = self.staging.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(DrfError::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!("{} appeared while running", self.target.display()),
                )));
            }
            if self.target.is_dir() {
                fs::remove_dir_all(&self.target)?;
            } else {
                fs::remove_file(&self.target)?;
            }
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRowSummary {
    pub policy: String,
    pub picp: f64,
    pub mpiw: f64,
    pub firing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub model_seed: u64,
    pub tau: f64,
    pub fallback_var: f64,
    pub calibration_firing_rate: f64,
    pub rows: Vec<GateRowSummary>,
}

/// Deterministic results of a run. Wall-clock measurements live in
/// [`TimingSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ReproConfig,
    pub stages: Vec<String>,
    pub param_counts: BTreeMap<String, usize>,
    pub temporal_param_counts: BTreeMap<String, usize>,
    pub ood_mae: BTreeMap<String, Vec<f64>>,
    pub median_ood_mae: BTreeMap<String, f64>,
    pub mae_ordering: String,
    pub dominance_fractions: Vec<Option<f64>>,
    pub median_dominance: Option<f64>,
    pub gate: GateSummary,
    pub competency_spearman: f64,
    pub criteria: BTreeMap<String, bool>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub hardware: String,
    pub stage_seconds: BTreeMap<String, f64>,
    pub train_seconds: BTreeMap<String, f64>,
    pub gate_avg_ms: BTreeMap<String, f64>,
    pub gate_time_ordering: bool,
}

pub struct ReproOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub timing: TimingSummary,
}

fn median(v: &[f64]) -> f64 {
    gate::interpolated_percentile(v, 50.0).unwrap_or(f64::NAN)
}

fn model_key(arch: Arch, seed: u64) -> String {
    format!("{arch}-s{seed}")
}

struct Run<'a> {
    cfg: &'a ReproConfig,
    out: &'a OutputDir,
    artifacts: BTreeMap<String, String>,
    stage_seconds: BTreeMap<String, f64>,
    log: &'a mut dyn FnMut(&str),
}

impl Run<'_> {
    fn write(&mut self, rel: &str, contents: &str, hashed: bool) -> Result<()> {
        let p = self.out.join(rel)?;
        fs::write(&p, contents)?;
        if hashed {
            self.record(rel)?;
        }
        Ok(())
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let hash = sha256_file(&self.out.path().join(rel))?;
        self.artifacts.insert(rel.to_string(), hash);
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        (self.log)(&format!("stage {name}"));
        let start = Instant::now();
        let r = f(self).map_err(|e| e.in_stage(name));
        self.stage_seconds
            .insert(name.to_string(), start.elapsed().as_secs_f64());
        r
    }
}

/// Run every stage into `out`. `log` receives progress lines.
pub fn run_repro(
    cfg: &ReproConfig,
    out: OutputDir,
    log: &mut dyn FnMut(&str),
) -> Result<ReproOutcome> {
    cfg.validate()?;
    fs::write(out.join("config.json")?, serde_json::to_string_pretty(cfg)?)?;
    let mut run = Run {
        cfg,
        out: &out,
        artifacts: BTreeMap::new(),
        stage_seconds: BTreeMap::new(),
        log,
    };

    let (train_data, ood_data) = run.stage("generate", |r| {
        let mut sets = Vec::new();
        for (name, dc) in [("train", r.cfg.train_data()), ("ood", r.cfg.ood_data())] {
            let data = pendulum::generate_dataset(&dc, Exec::default())?;
            let rel = format!("data/{name}.drfd");
            pendulum::save_dataset(&r.out.join(&rel)?, &data, &dc)?;
            r.record(&rel)?;
            (r.log)(&format!(
                "  {name}: {} frames, mean noise {:.4}",
                data.n_frames(),
                data.mean_noise()
            ));
            sets.push(data);
        }
        let ood = sets.pop().expect("two datasets");
        Ok((sets.pop().expect("two datasets"), ood))
    })?;

    let mut train_seconds = BTreeMap::new();
    let models: BTreeMap<String, Model> = run.stage("train", |r| {
        let mut models = BTreeMap::new();
        for &seed in &r.cfg.seeds {
            for arch in Arch::ALL {
                let key = model_key(arch, seed);
                let tc = TrainConfig {
                    arch,
                    seed,
                    seq_len: r.cfg.seq_len,
                    r_max_train: r.cfg.r_max_train,
                    ..r.cfg.train
                };
                let start = Instant::now();
                let (model, tlog): (Model, TrainLog) = trainer::train(&tc, &train_data)?;
                train_seconds.insert(key.clone(), start.elapsed().as_secs_f64());
                (r.log)(&format!(
                    "  {key}: best val mae {:.4}",
                    tlog.best_val_mae().unwrap_or(f64::NAN)
                ));
                let rel = format!("models/{key}.{}", trainer::CHECKPOINT_EXT);
                trainer::save_checkpoint(&model, &r.out.join(&rel)?)?;
                r.record(&rel)?;
                r.write(&format!("logs/{key}.csv"), &tlog.deterministic_csv(), true)?;
                models.insert(key, model);
            }
        }
        Ok(models)
    })?;

    let inputs: BTreeMap<String, DecoderInputs> = run.stage("evaluate", |r| {
        let mut inputs = BTreeMap::new();
        let mut reports = Vec::new();
        for (key, model) in &models {
            let di = metrics::collect_decoder_inputs(model, &ood_data, 64)?;
            let opts = SweepOptions {
                n_passes: 2,
                level: r.cfg.level,
                seed: r.cfg.data_seed,
                timed_frames: 0,
            };
            reports.extend(metrics::sweep_inputs(
                model,
                &di,
                r.cfg.r_max_ood,
                &[0.0],
                &opts,
            )?);
            inputs.insert(key.clone(), di);
        }
        r.write("eval/ood.csv", &metrics::reports_csv(&reports), true)?;
        Ok(inputs)
    })?;
    let mut ood_mae: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for arch in Arch::ALL {
            let key = model_key(arch, seed);
            let y: Vec<f64> = {
                let m = &models[&key];
                let preds = metrics::deterministic_predict(m, &inputs[&key].rows, 0.0, cfg.level)?;
                preds.iter().map(|p| p.y_hat).collect()
            };
            let mae = metrics::mae(&y, &inputs[&key].targets.data)?;
            ood_mae.entry(arch.to_string()).or_default().push(mae);
        }
    }
    let median_ood_mae: BTreeMap<String, f64> = ood_mae
        .iter()
        .map(|(k, v)| (k.clone(), median(v)))
        .collect();

    let curves: BTreeMap<String, Vec<EvalReport>> = run.stage("sweep", |r| {
        let mut curves = BTreeMap::new();
        for (key, model) in &models {
            let opts = SweepOptions {
                n_passes: r.cfg.n_passes,
                level: r.cfg.level,
                seed: r.cfg.data_seed,
                timed_frames: 0,
            };
            let reports = metrics::sweep_inputs(
                model,
                &inputs[key],
                r.cfg.r_max_ood,
                &r.cfg.dropout_rates,
                &opts,
            )?;
            r.write(
                &format!("sweep/{key}.csv"),
                &metrics::curve_csv(&reports),
                true,
            )?;
            curves.insert(key.clone(), reports);
        }
        Ok(curves)
    })?;
    let points =
        |key: &str| -> Vec<(f64, f64)> { curves[key].iter().map(|e| (e.mpiw, e.picp)).collect() };
    let dominance_fractions: Vec<Option<f64>> = cfg
        .seeds
        .iter()
        .map(|&s| {
            metrics::dominance_fraction(
                &points(&model_key(Arch::Drf, s)),
                &points(&model_key(Arch::NoDynamics, s)),
                1001,
            )
        })
        .collect();
    let median_dominance = {
        let v: Vec<f64> = dominance_fractions
            .iter()
            .map(|d| d.unwrap_or(0.0))
            .collect();
        Some(median(&v))
    };

    // Gate experiments use the DRF whose OOD error is the median over seeds.
    let gate_seed = {
        let maes = &ood_mae[Arch::Drf.as_str()];
        let mut idx: Vec<usize> = (0..maes.len()).collect();
        idx.sort_by(|&a, &b| maes[a].total_cmp(&maes[b]));
        cfg.seeds[idx[idx.len() / 2]]
    };
    let gate_key = model_key(Arch::Drf, gate_seed);
    let gate_model = &models[&gate_key];

    let calibration = run.stage("calibrate", |r| {
        let (_, val) = train_data.split_tail(r.cfg.train.val_fraction);
        let di = metrics::collect_decoder_inputs(gate_model, &val, 64)?;
        let c = gate::calibrate(
            gate_model,
            &di,
            r.cfg.tau_percentile,
            r.cfg.direction,
            r.cfg.fallback,
            r.cfg.n_passes,
            pendulum::sub_seed(r.cfg.data_seed, 2),
        )?;
        r.write(
            "gate/calibration.json",
            &serde_json::to_string_pretty(&c)?,
            true,
        )?;
        Ok(c)
    })?;

    let gate_report = run.stage("gate", |r| {
        let policies: Vec<GatePolicy> = GateMode::ALL
            .iter()
            .map(|&mode| GatePolicy {
                mode,
                p_random: r.cfg.p_random,
                tau: calibration.tau,
                direction: r.cfg.direction,
                fallback_var: calibration.fallback_var,
            })
            .collect();
        let rep = gate::gate_benchmark(
            gate_model,
            &inputs[&gate_key],
            &policies,
            r.cfg.n_passes,
            r.cfg.level,
            pendulum::sub_seed(r.cfg.data_seed, 3),
        )?;
        r.write("gate/bench.csv", &rep.table_csv(), false)?;
        r.write("gate/frames.csv", &rep.frames_csv(), true)?;
        Ok(rep)
    })?;

    let summary = run.stage("summarize", |r| {
        let di = &inputs[&gate_key];
        let competency_spearman = metrics::spearman(&di.noise, &di.gain_scores)?;
        let row = |mode: GateMode| {
            gate_report
                .rows
                .iter()
                .find(|g| g.policy == mode.as_str())
                .expect("every policy benchmarked")
        };
        let (thr, always) = (row(GateMode::KalmanThreshold), row(GateMode::Always));

        let m = &median_ood_mae;
        let (drf, lstm, nd) = (m["drf"], m["lstm"], m["no_dynamics"]);
        let mut order: Vec<(&str, f64)> = vec![("drf", drf), ("lstm", lstm), ("no_dynamics", nd)];
        order.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mae_ordering = order.iter().map(|o| o.0).collect::<Vec<_>>().join(" < ");

        let mut criteria = BTreeMap::new();
        criteria.insert("ood_mae_ordering".to_string(), drf < lstm && lstm < nd);
        criteria.insert(
            "tradeoff_dominance".to_string(),
            median_dominance.is_some_and(|d| d >= 0.8),
        );
        criteria.insert(
            "gate_coverage_and_width".to_string(),
            (thr.picp - always.picp).abs() <= 3.0 && thr.mpiw < always.mpiw,
        );
        criteria.insert(
            "competency_correlation".to_string(),
            competency_spearman < 0.0 && competency_spearman.abs() > 0.5,
        );

        let mut param_counts = BTreeMap::new();
        let mut temporal = BTreeMap::new();
        for arch in Arch::ALL {
            let mdl = &models[&model_key(arch, r.cfg.seeds[0])];
            param_counts.insert(arch.to_string(), mdl.params.numel());
            temporal.insert(arch.to_string(), mdl.temporal_param_count());
        }

        let summary = Summary {
            config: r.cfg.clone(),
            stages: STAGES.iter().map(|s| s.to_string()).collect(),
            param_counts,
            temporal_param_counts: temporal,
            ood_mae: ood_mae.clone(),
            median_ood_mae: median_ood_mae.clone(),
            mae_ordering,
            dominance_fractions: dominance_fractions.clone(),
            median_dominance,
            gate: GateSummary {
                model_seed: gate_seed,
                tau: calibration.tau,
                fallback_var: calibration.fallback_var,
                calibration_firing_rate: calibration.firing_rate,
                rows: gate_report
                    .rows
                    .iter()
                    .map(|g| GateRowSummary {
                        policy: g.policy.clone(),
                        picp: g.picp,
                        mpiw: g.mpiw,
                        firing_rate: g.firing_rate,
                    })
                    .collect(),
            },
            competency_spearman,
            criteria,
            artifacts: r.artifacts.clone(),
        };
        fs::write(
            r.out.join("summary.json")?,
            serde_json::to_string_pretty(&summary)?,
        )?;
        Ok(summary)
    })?;

    let avg = |mode: GateMode| {
        gate_report
            .rows
            .iter()
            .find(|g| g.policy == mode.as_str())
            .map_or(f64::NAN, |g| g.avg_ms)
    };
    let timing = TimingSummary {
        hardware: metrics::hardware_descriptor(),
        stage_seconds: run.stage_seconds.clone(),
        train_seconds,
        gate_avg_ms: gate_report
            .rows
            .iter()
            .map(|g| (g.policy.clone(), g.avg_ms))
            .collect(),
        gate_time_ordering: avg(GateMode::Never) < avg(GateMode::KalmanThreshold)
            && avg(GateMode::KalmanThreshold) < avg(GateMode::Always),
    };
    fs::write(
        out.join("timing.json")?,
        serde_json::to_string_pretty(&timing)?,
    )?;
    let dir = out.commit()?;
    Ok(ReproOutcome {
        dir,
        summary,
        timing,
    })
}
