//! Accuracy and interval metrics, MC-dropout uncertainty, the dropout-rate
//! tradeoff sweep and the inference timing harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DrfError, Result};
use crate::model::{DropoutMode, Model, SequenceInput, OUTPUT_DIM};
use crate::nn::{Tape, Tensor};
use crate::pendulum::{sub_seed, Sequence, SequenceBatch};

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_PASSES: usize = 25;
pub const WARMUP_FRAMES: usize = 5;

fn non_empty(n: usize, m: usize, op: &'static str) -> Result<()> {
    if n == 0 {
        return Err(DrfError::Parameter(format!("{op}: empty input")));
    }
    if n != m {
        return Err(DrfError::dim(op, &[n], &[m]));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn mae(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    non_empty(y_hat.len(), y.len(), "mae")?;
    Ok(y_hat.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Two-sided standard normal quantile for a central interval at `level`.
pub fn z_score(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(DrfError::Parameter(format!("level {level} outside (0, 1)")));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

/// One scalar prediction with decomposed variance and its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalPrediction {
    pub y_hat: f64,
    pub var_aleatoric: f64,
    pub var_epistemic: f64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl IntervalPrediction {
    /// `y_hat +/- z * sqrt(var_aleatoric + var_epistemic)`; `z` is the
    /// quantile for `level`.
    pub fn new(y_hat: f64, var_aleatoric: f64, var_epistemic: f64, level: f64, z: f64) -> Self {
        let half = z * (var_aleatoric + var_epistemic).sqrt();
        IntervalPrediction {
            y_hat,
            var_aleatoric,
            var_epistemic,
            level,
            lower: y_hat - half,
            upper: y_hat + half,
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.var_aleatoric + self.var_epistemic
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower).abs()
    }

    pub fn covers(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

/// Percentage of targets inside their intervals (bounds inclusive).
pub fn picp(intervals: &[IntervalPrediction], y: &[f64]) -> Result<f64> {
    non_empty(intervals.len(), y.len(), "picp")?;
    let hit = intervals
        .iter()
        .zip(y)
        .filter(|(iv, v)| iv.covers(**v))
        .count();
    Ok(100.0 * hit as f64 / y.len() as f64)
}

/// Mean interval width.
pub fn mpiw(intervals: &[IntervalPrediction]) -> Result<f64> {
    non_empty(intervals.len(), intervals.len(), "mpiw")?;
    Ok(intervals.iter().map(|iv| iv.width()).sum::<f64>() / intervals.len() as f64)
}

/// Per-frame decoder inputs of a dataset, row-aligned with the targets.
#[derive(Debug, Clone)]
pub struct DecoderInputs {
    /// `[N, decoder_in]`
    pub rows: Tensor,
    /// `[N, 2]`
    pub targets: Tensor,
    /// Per-frame injected noise level.
    pub noise: Vec<f64>,
    /// Per-frame gain score `trace(K)/d` (recursive filter only).
    pub gain_scores: Vec<f64>,
}

impl DecoderInputs {
    pub fn len(&self) -> usize {
        self.rows.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> Tensor {
        let w = self.rows.shape[1];
        Tensor::new(&[1, w], self.rows.data[i * w..(i + 1) * w].to_vec()).expect("row shape")
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets.data[i * OUTPUT_DIM..(i + 1) * OUTPUT_DIM]
    }
}

/// Run the deterministic encoder/filter over every sequence and collect the
/// decoder inputs frame by frame (sequence-major).
pub fn collect_decoder_inputs(
    model: &Model,
    data: &SequenceBatch,
    batch_size: usize,
) -> Result<DecoderInputs> {
    let refs: Vec<&Sequence> = data.sequences.iter().collect();
    let width = {
        let d = model.config.latent_dim;
        match model.config.decoder_cov {
            crate::model::DecoderCov::Diag => 2 * d,
            crate::model::DecoderCov::Full => d + d * d,
        }
    };
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut noise = Vec::new();
    let mut gain_scores = Vec::new();
    for chunk in refs.chunks(batch_size.max(1)) {
        let input = SequenceInput::from_sequences(chunk)?;
        let tape = Tape::inference();
        let p = model.bind(&tape);
        let out = model.forward(&tape, &p, &input, &mut DropoutMode::Off)?;
        let di = tape.value(out.decoder_input);
        let gains: Vec<Vec<f64>> = out
            .steps
            .iter()
            .map(|s| crate::kalman::gain_trace_ratio(&tape.value(s.filter.gain)))
            .collect();
        for (b, seq) in chunk.iter().enumerate() {
            for t in 0..input.steps {
                let r = input.row(t, b);
                rows.extend_from_slice(&di.data[r * width..(r + 1) * width]);
                targets
                    .extend_from_slice(&input.targets.data[r * OUTPUT_DIM..(r + 1) * OUTPUT_DIM]);
                noise.push(seq.frames[t].noise_level as f64);
                if !gains.is_empty() {
                    gain_scores.push(gains[t][b]);
                }
            }
        }
    }
    let n = noise.len();
    Ok(DecoderInputs {
        rows: Tensor::new(&[n, width], rows)?,
        targets: Tensor::new(&[n, OUTPUT_DIM], targets)?,
        noise,
        gain_scores,
    })
}

/// Mean and variance statistics of repeated decoder passes for a set of
/// rows: `(y_mean, var_aleatoric, var_epistemic)`, each `[N * 2]`.
pub struct PassMoments {
    pub y_mean: Vec<f64>,
    pub var_aleatoric: Vec<f64>,
    pub var_epistemic: Vec<f64>,
}

/// Run `n_passes` decoder passes with dropout at `rate` over `rows` and
/// reduce them. All passes go through the decoder as one stacked batch.
pub fn dropout_moments(
    model: &Model,
    rows: &Tensor,
    rate: f64,
    n_passes: usize,
    rng: &mut dyn RngCore,
) -> Result<PassMoments> {
    if n_passes < 1 {
        return Err(DrfError::Parameter("n_passes must be at least 1".into()));
    }
    let (n, w) = (rows.shape[0], rows.shape[1]);
    let mut stacked = Vec::with_capacity(n_passes * n * w);
    for _ in 0..n_passes {
        stacked.extend_from_slice(&rows.data);
    }
    let tape = Tape::inference();
    let p = model.bind_decoder(&tape);
    let x = tape.constant(Tensor::new(&[n_passes * n, w], stacked)?);
    let mut mode = if rate > 0.0 {
        DropoutMode::On(rng)
    } else {
        DropoutMode::Off
    };
    let out = model.decode_with_rate(&tape, &p, x, rate, &mut mode)?;
    let y = tape.value(out.y);
    let s = tape.value(out.sigma);
    let m = n * OUTPUT_DIM;
    let k = n_passes as f64;
    let mut y_mean = vec![0.0; m];
    let mut var_aleatoric = vec![0.0; m];
    for pass in 0..n_passes {
        for i in 0..m {
            y_mean[i] += y.data[pass * m + i];
            var_aleatoric[i] += s.data[pass * m + i].powi(2);
        }
    }
    y_mean.iter_mut().for_each(|v| *v /= k);
    var_aleatoric.iter_mut().for_each(|v| *v /= k);
    let mut var_epistemic = vec![0.0; m];
    if n_passes > 1 {
        for pass in 0..n_passes {
            for i in 0..m {
                var_epistemic[i] += (y.data[pass * m + i] - y_mean[i]).powi(2);
            }
        }
        var_epistemic.iter_mut().for_each(|v| *v /= k - 1.0);
    }
    Ok(PassMoments {
        y_mean,
        var_aleatoric,
        var_epistemic,
    })
}

/// MC-dropout prediction for decoder input rows at the model's dropout
/// rate: `y_hat` is the pass mean, aleatoric variance the mean `sigma^2`,
/// epistemic variance the sample variance of the pass means.
pub fn mc_dropout_predict(
    model: &Model,
    rows: &Tensor,
    n_passes: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<IntervalPrediction>> {
    mc_dropout_predict_at(model, rows, model.config.dropout_rate, n_passes, level, rng)
}

pub fn mc_dropout_predict_at(
    model: &Model,
    rows: &Tensor,
    rate: f64,
    n_passes: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<IntervalPrediction>> {
    if n_passes < 2 {
        return Err(DrfError::Parameter(
            "MC dropout needs at least 2 passes".into(),
        ));
    }
    let z = z_score(level)?;
    let m = dropout_moments(model, rows, rate, n_passes, rng)?;
    Ok((0..m.y_mean.len())
        .map(|i| {
            IntervalPrediction::new(
                m.y_mean[i],
                m.var_aleatoric[i],
                m.var_epistemic[i],
                level,
                z,
            )
        })
        .collect())
}

/// Deterministic decode with a fixed epistemic variance.
pub fn deterministic_predict(
    model: &Model,
    rows: &Tensor,
    var_epistemic: f64,
    level: f64,
) -> Result<Vec<IntervalPrediction>> {
    let z = z_score(level)?;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let m = dropout_moments(model, rows, 0.0, 1, &mut unused)?;
    Ok((0..m.y_mean.len())
        .map(|i| IntervalPrediction::new(m.y_mean[i], m.var_aleatoric[i], var_epistemic, level, z))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub frames: usize,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

impl TimingStats {
    /// Summarize per-frame durations (ms), dropping the warmup frames.
    pub fn from_samples(ms: &[f64]) -> Self {
        let kept = if ms.len() > WARMUP_FRAMES {
            &ms[WARMUP_FRAMES..]
        } else {
            ms
        };
        TimingStats {
            mean_ms: kept.iter().sum::<f64>() / kept.len().max(1) as f64,
            p50_ms: percentile(kept, 50.0),
            p95_ms: percentile(kept, 95.0),
            frames: kept.len(),
        }
    }
}

/// CPU description for timing reports.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{model}; {} {}; {} thread(s)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        crate::par::threads()
    )
}

/// Wall-clock per-frame decode plus uncertainty cost. `n_passes = 1` is a
/// single deterministic decode.
pub fn time_inference(
    model: &Model,
    inputs: &DecoderInputs,
    rate: f64,
    n_passes: usize,
    max_frames: usize,
    seed: u64,
) -> Result<TimingStats> {
    let n = inputs.len().min(max_frames + WARMUP_FRAMES);
    let mut ms = Vec::with_capacity(n);
    for i in 0..n {
        let row = inputs.row(i);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64));
        let start = Instant::now();
        if n_passes <= 1 {
            deterministic_predict(model, &row, 0.0, DEFAULT_LEVEL)?;
        } else {
            mc_dropout_predict_at(model, &row, rate, n_passes, DEFAULT_LEVEL, &mut rng)?;
        }
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TimingStats::from_samples(&ms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    pub r_max: f64,
    pub dropout_rate: f64,
    pub level: f64,
    pub mae: f64,
    pub picp: f64,
    pub mpiw: f64,
    /// Frames evaluated.
    pub n: usize,
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub const HEADER: &'static str =
        "arch,r_max,dropout_rate,mae,picp,mpiw,n,mean_ms,p50_ms,p95_ms";

    fn csv_row(&self) -> String {
        let (a, b, c) = self.timing.map_or((f64::NAN, f64::NAN, f64::NAN), |t| {
            (t.mean_ms, t.p50_ms, t.p95_ms)
        });
        format!(
            "{},{},{},{:.10},{:.6},{:.10},{},{:.4},{:.4},{:.4}",
            self.arch,
            self.r_max,
            self.dropout_rate,
            self.mae,
            self.picp,
            self.mpiw,
            self.n,
            a,
            b,
            c
        )
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(EvalReport::HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Tradeoff curve data: `mpiw,picp,rate`.
pub fn curve_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("mpiw,picp,rate\n");
    for r in reports {
        let _ = writeln!(s, "{:.10},{:.6},{}", r.mpiw, r.picp, r.dropout_rate);
    }
    s
}

/// Interval metrics of one dropout rate over precomputed decoder inputs.
pub fn evaluate_rate(
    model: &Model,
    inputs: &DecoderInputs,
    rate: f64,
    n_passes: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DrfError::Parameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preds = mc_dropout_predict_at(model, &inputs.rows, rate, n_passes, level, &mut rng)?;
    let y_hat: Vec<f64> = preds.iter().map(|p| p.y_hat).collect();
    Ok((
        mae(&y_hat, &inputs.targets.data)?,
        picp(&preds, &inputs.targets.data)?,
        mpiw(&preds)?,
    ))
}

/// Options for [`sweep_tradeoff`].
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub n_passes: usize,
    pub level: f64,
    pub seed: u64,
    /// Frames timed per rate; `0` skips timing.
    pub timed_frames: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_passes: DEFAULT_PASSES,
            level: DEFAULT_LEVEL,
            seed: 0,
            timed_frames: 0,
        }
    }
}

/// One report per dropout rate.
pub fn sweep_tradeoff(
    model: &Model,
    data: &SequenceBatch,
    r_max: f64,
    rates: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<EvalReport>> {
    let inputs = collect_decoder_inputs(model, data, 64)?;
    sweep_inputs(model, &inputs, r_max, rates, opts)
}

pub fn sweep_inputs(
    model: &Model,
    inputs: &DecoderInputs,
    r_max: f64,
    rates: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<EvalReport>> {
    rates
        .iter()
        .enumerate()
        .map(|(k, &rate)| {
            let (mae, picp, mpiw) = evaluate_rate(
                model,
                inputs,
                rate,
                opts.n_passes,
                opts.level,
                sub_seed(opts.seed, k as u64),
            )?;
            let timing = if opts.timed_frames > 0 {
                Some(time_inference(
                    model,
                    inputs,
                    rate,
                    opts.n_passes,
                    opts.timed_frames,
                    opts.seed,
                )?)
            } else {
                None
            };
            Ok(EvalReport {
                arch: model.config.arch.to_string(),
                r_max,
                dropout_rate: rate,
                level: opts.level,
                mae,
                picp,
                mpiw,
                n: inputs.len(),
                timing,
            })
        })
        .collect()
}

/// Fractional ranks with ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of the ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DrfError::Parameter(
            "spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DrfError::Domain("spearman of a constant sample".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Piecewise-linear PICP at `mpiw` along a curve sorted by MPIW.
fn interp_curve(curve: &[(f64, f64)], x: f64) -> f64 {
    let k = curve.partition_point(|p| p.0 < x);
    if k == 0 {
        return curve[0].1;
    }
    if k == curve.len() {
        return curve[k - 1].1;
    }
    let (x0, y0) = curve[k - 1];
    let (x1, y1) = curve[k];
    if x1 == x0 {
        y1
    } else {
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Share of the overlapping MPIW range where curve `a` has PICP at least
/// that of curve `b`, comparing linear interpolants on a uniform grid.
/// Curves are `(mpiw, picp)` points. `None` when the ranges do not overlap.
pub fn dominance_fraction(a: &[(f64, f64)], b: &[(f64, f64)], grid: usize) -> Option<f64> {
    if a.is_empty() || b.is_empty() || grid < 2 {
        return None;
    }
    let sorted = |c: &[(f64, f64)]| {
        let mut v = c.to_vec();
        v.sort_by(|p, q| p.0.total_cmp(&q.0));
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let lo = a[0].0.max(b[0].0);
    let hi = a[a.len() - 1].0.min(b[b.len() - 1].0);
    if !(hi > lo) {
        return None;
    }
    let wins = (0..grid)
        .filter(|&i| {
            let x = lo + (hi - lo) * i as f64 / (grid - 1) as f64;
            interp_curve(&a, x) >= interp_curve(&b, x)
        })
        .count();
    Some(wins as f64 / grid as f64)
}
