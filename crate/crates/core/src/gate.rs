//! Competency gating: spend MC-dropout passes only on frames whose Kalman
//! gain says the model is operating outside its comfort zone.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::kalman::{gain_trace_ratio, StepFilterParams};
use crate::metrics::{self, DecoderInputs, IntervalPrediction};
use crate::model::Model;
use crate::nn::{Tape, Tensor};
use crate::pendulum::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Never,
    Random,
    KalmanThreshold,
    Always,
}

impl GateMode {
    pub const ALL: [GateMode; 4] = [
        GateMode::Never,
        GateMode::Random,
        GateMode::KalmanThreshold,
        GateMode::Always,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Never => "never",
            GateMode::Random => "random",
            GateMode::KalmanThreshold => "kalman_threshold",
            GateMode::Always => "always",
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateMode {
    type Err = DrfError;

    fn from_str(s: &str) -> Result<Self> {
        GateMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DrfError::Parameter(format!("unknown gate mode {s:?}")))
    }
}

/// Which side of `tau` fires the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    pub mode: GateMode,
    pub p_random: f64,
    pub tau: f64,
    pub direction: Direction,
    /// Epistemic variance assigned to frames that skip sampling.
    pub fallback_var: f64,
}

impl GatePolicy {
    pub fn new(mode: GateMode) -> Self {
        GatePolicy {
            mode,
            p_random: 0.5,
            tau: 0.0,
            direction: Direction::Below,
            fallback_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_random) {
            return Err(DrfError::Parameter(format!(
                "p_random {} outside [0, 1]",
                self.p_random
            )));
        }
        if !self.tau.is_finite() || !(self.fallback_var >= 0.0) {
            return Err(DrfError::Parameter(
                "tau must be finite and fallback_var >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Whether sampling runs for a frame with `score`. Only random mode
    /// draws from `rng`.
    pub fn fires<R: Rng + ?Sized>(&self, score: f64, rng: &mut R) -> bool {
        match self.mode {
            GateMode::Never => false,
            GateMode::Always => true,
            GateMode::Random => rng.random::<f64>() < self.p_random,
            GateMode::KalmanThreshold => match self.direction {
                Direction::Below => score < self.tau,
                Direction::Above => score > self.tau,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub score: f64,
    pub fired: bool,
}

/// Mean diagonal gain `trace(K)/d` per batch element.
pub fn competency_score(tape: &Tape, params: &StepFilterParams) -> Vec<f64> {
    gain_trace_ratio(&tape.value(params.gain))
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn interpolated_percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DrfError::Parameter("no calibration scores".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(DrfError::Parameter(format!(
            "percentile {q} outside [0, 100]"
        )));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Threshold at the given percentile of validation scores (median at 50).
pub fn calibrate_tau(scores: &[f64], percentile: f64) -> Result<f64> {
    interpolated_percentile(scores, percentile)
}

/// How the fallback epistemic variance is chosen from calibration frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Median over all calibration frames.
    Median,
    /// Median over calibration frames on the non-firing side of `tau`.
    NonFiringMedian,
}

/// Per-frame epistemic variance (mean over output dims) from MC dropout.
pub fn frame_epistemic_variance(
    model: &Model,
    inputs: &DecoderInputs,
    n_passes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds = metrics::mc_dropout_predict(
        model,
        &inputs.rows,
        n_passes,
        metrics::DEFAULT_LEVEL,
        &mut rng,
    )?;
    Ok(preds
        .chunks(crate::model::OUTPUT_DIM)
        .map(|c| c.iter().map(|p| p.var_epistemic).sum::<f64>() / c.len() as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub fallback_var: f64,
    pub firing_rate: f64,
}

/// Pick `tau` and the fallback variance on a calibration set.
pub fn calibrate(
    model: &Model,
    inputs: &DecoderInputs,
    percentile: f64,
    direction: Direction,
    rule: FallbackRule,
    n_passes: usize,
    seed: u64,
) -> Result<Calibration> {
    let scores = &inputs.gain_scores;
    if scores.len() != inputs.len() {
        return Err(DrfError::Parameter(
            "calibration needs per-frame gain scores".into(),
        ));
    }
    let tau = calibrate_tau(scores, percentile)?;
    let policy = GatePolicy {
        tau,
        direction,
        ..GatePolicy::new(GateMode::KalmanThreshold)
    };
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let fired: Vec<bool> = scores
        .iter()
        .map(|&s| policy.fires(s, &mut unused))
        .collect();
    let var = frame_epistemic_variance(model, inputs, metrics::DEFAULT_PASSES.max(n_passes), seed)?;
    let pool: Vec<f64> = match rule {
        FallbackRule::Median => var.clone(),
        FallbackRule::NonFiringMedian => var
            .iter()
            .zip(&fired)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| *v)
            .collect(),
    };
    let pool = if pool.is_empty() { var } else { pool };
    Ok(Calibration {
        tau,
        fallback_var: interpolated_percentile(&pool, 50.0)?,
        firing_rate: fired.iter().filter(|f| **f).count() as f64 / fired.len() as f64,
    })
}

/// Interval prediction for one decoder input row under a gate policy.
/// Fired frames get MC dropout; the rest a single deterministic decode with
/// the policy's fallback epistemic variance.
pub fn gated_predict(
    model: &Model,
    row: &Tensor,
    score: f64,
    policy: &GatePolicy,
    n_passes: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<(Vec<IntervalPrediction>, GateDecision)> {
    let fired = policy.fires(score, rng);
    let preds = if fired {
        metrics::mc_dropout_predict(model, row, n_passes, level, rng)?
    } else {
        metrics::deterministic_predict(model, row, policy.fallback_var, level)?
    };
    Ok((preds, GateDecision { score, fired }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub policy: String,
    pub picp: f64,
    pub mpiw: f64,
    pub avg_ms: f64,
    pub firing_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub frame: usize,
    pub score: f64,
    pub fired: bool,
    pub mode: GateMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub rows: Vec<GateRow>,
    pub frames: Vec<FrameLog>,
}

impl GateReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("policy,picp,mpiw,avg_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.10},{:.6}",
                r.policy, r.picp, r.mpiw, r.avg_ms
            );
        }
        s
    }

    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,score,fired,mode\n");
        for f in &self.frames {
            let _ = writeln!(
                s,
                "{},{:.12},{},{}",
                f.frame,
                f.score,
                u8::from(f.fired),
                f.mode
            );
        }
        s
    }
}

/// Run every policy over the same frames and per-frame RNG streams.
pub fn gate_benchmark(
    model: &Model,
    inputs: &DecoderInputs,
    policies: &[GatePolicy],
    n_passes: usize,
    level: f64,
    seed: u64,
) -> Result<GateReport> {
    if inputs.gain_scores.len() != inputs.len() {
        return Err(DrfError::Parameter(
            "gate benchmark needs per-frame gain scores".into(),
        ));
    }
    let mut rows = Vec::with_capacity(policies.len());
    let mut frames = Vec::new();
    for policy in policies {
        policy.validate()?;
        let mut preds = Vec::with_capacity(inputs.len() * 2);
        let mut elapsed = 0.0;
        let mut fired = 0usize;
        for i in 0..inputs.len() {
            let row = inputs.row(i);
            let score = inputs.gain_scores[i];
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64));
            let start = Instant::now();
            let (p, d) = gated_predict(model, &row, score, policy, n_passes, level, &mut rng)?;
            elapsed += start.elapsed().as_secs_f64();
            fired += usize::from(d.fired);
            preds.extend(p);
            frames.push(FrameLog {
                frame: i,
                score,
                fired: d.fired,
                mode: policy.mode,
            });
        }
        rows.push(GateRow {
            policy: policy.mode.to_string(),
            picp: metrics::picp(&preds, &inputs.targets.data)?,
            mpiw: metrics::mpiw(&preds)?,
            avg_ms: elapsed * 1e3 / inputs.len() as f64,
            firing_rate: fired as f64 / inputs.len() as f64,
        });
    }
    Ok(GateReport { rows, frames })
}
