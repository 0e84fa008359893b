//! Sequence-level NLL training with Adam, gradient clipping and best
//! validation checkpoint retention.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::metrics;
use crate::model::{Arch, DropoutMode, Model, ModelConfig, SequenceInput};
use crate::nn::checkpoint::{read_params, write_params};
use crate::nn::{Adam, Tape, Var};
use crate::par::Exec;
use crate::pendulum::{sub_seed, Sequence, SequenceBatch};

/// Mean Gaussian NLL with per-dimension terms averaged.
pub fn nll_loss(tape: &Tape, y_hat: Var, sigma: Var, y: Var) -> Result<Var> {
    tape.gaussian_nll(y_hat, sigma, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Sequence length used for training; `0` keeps the dataset length.
    pub seq_len: usize,
    pub seed: u64,
    pub r_max_train: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub val_fraction: f64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Drf,
            epochs: 200,
            lr: 1e-4,
            batch_size: 32,
            seq_len: 75,
            seed: 0,
            r_max_train: 0.5,
            grad_clip: 5.0,
            eval_every: 1,
            val_fraction: 0.1,
            dropout_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(DrfError::Parameter(
                "epochs, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(DrfError::Parameter(
                "lr and grad_clip must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(DrfError::Parameter("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dropout_rate: self.dropout_rate,
            ..ModelConfig::new(self.arch)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_nll,val_nll,val_mae,seconds";

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The log without the wall-clock column.
    pub fn deterministic_csv(&self) -> String {
        self.render(false)
    }

    fn render(&self, seconds: bool) -> String {
        let mut s = String::new();
        if seconds {
            s.push_str(Self::HEADER);
        } else {
            s.push_str("epoch,train_nll,val_nll,val_mae");
        }
        s.push('\n');
        for r in &self.epochs {
            let _ = write!(
                s,
                "{},{:e},{:e},{:e}",
                r.epoch, r.train_nll, r.val_nll, r.val_mae
            );
            if seconds {
                let _ = write!(s, ",{:.3}", r.seconds);
            }
            s.push('\n');
        }
        s
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|r| r.val_mae)
            .filter(|v| v.is_finite())
            .min_by(f64::total_cmp)
    }
}

/// Validation NLL and MAE without dropout.
pub fn evaluate(model: &Model, seqs: &[&Sequence], batch_size: usize) -> Result<(f64, f64)> {
    let mut nll = 0.0;
    let mut abs = 0.0;
    let mut n = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let input = SequenceInput::from_sequences(chunk)?;
        let tape = Tape::inference();
        let p = model.bind(&tape);
        let out = model.forward(&tape, &p, &input, &mut DropoutMode::Off)?;
        let loss = model.loss(&tape, &out, &input)?;
        let y = tape.value(out.decoded.y);
        let rows = input.targets.len();
        nll += tape.value(loss).item() * rows as f64;
        abs += metrics::mae(&y.data, &input.targets.data)? * rows as f64;
        n += rows;
    }
    Ok((nll / n as f64, abs / n as f64))
}

fn truncate<'a>(seqs: &'a SequenceBatch, len: usize) -> Vec<std::borrow::Cow<'a, Sequence>> {
    seqs.sequences
        .iter()
        .map(|s| {
            if len == 0 || len >= s.frames.len() {
                std::borrow::Cow::Borrowed(s)
            } else {
                std::borrow::Cow::Owned(Sequence {
                    seed: s.seed,
                    frames: s.frames[..len].to_vec(),
                })
            }
        })
        .collect()
}

/// Train one architecture. Returns the model holding the best-validation
/// parameters and the per-epoch log.
pub fn train(cfg: &TrainConfig, data: &SequenceBatch) -> Result<(Model, TrainLog)> {
    train_with(cfg, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    cfg: &TrainConfig,
    data: &SequenceBatch,
    mut on_epoch: F,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DrfError::Parameter("empty training set".into()));
    }
    let (train_set, val_set) = data.split_tail(cfg.val_fraction);
    let train_seqs = truncate(&train_set, cfg.seq_len);
    let val_seqs = truncate(&val_set, cfg.seq_len);
    let val_refs: Vec<&Sequence> = val_seqs.iter().map(|c| c.as_ref()).collect();

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut best: Option<(f64, crate::nn::ParamStore)> = None;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sequence> = idx.iter().map(|&i| train_seqs[i].as_ref()).collect();
            let input = SequenceInput::from_sequences(&batch)?;
            let tape = Tape::new().with_exec(Exec::default());
            let p = model.bind(&tape);
            // A filter that can no longer factor its covariance has diverged.
            let diverged = |e: DrfError| match e {
                DrfError::SingularMatrix { .. } => DrfError::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                other => other,
            };
            let out = model
                .forward(&tape, &p, &input, &mut DropoutMode::On(&mut rng))
                .map_err(diverged)?;
            let loss = model.loss(&tape, &out, &input)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(DrfError::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            drop(p);
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            drop(grads);
            drop(tape);
            let norm = model.params.clip_grad_norm(cfg.grad_clip);
            if !norm.is_finite() {
                return Err(DrfError::Divergence {
                    epoch,
                    batch: bi,
                    loss: norm,
                });
            }
            opt.step(&mut model.params);
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let train_nll = total / count as f64;
        let (val_nll, val_mae) =
            if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) && !val_refs.is_empty() {
                evaluate(&model, &val_refs, 64)?
            } else {
                (f64::NAN, f64::NAN)
            };
        if val_mae.is_finite() && best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
            best = Some((val_mae, model.params.clone()));
        }
        let rec = EpochRecord {
            epoch,
            train_nll,
            val_nll,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    if let Some((_, params)) = best {
        model.params.load_from(&params)?;
    }
    Ok((model, log))
}

/// Train every architecture with identical data, seed and budget.
pub fn train_all_arches(cfg: &TrainConfig, data: &SequenceBatch) -> Result<Vec<(Model, TrainLog)>> {
    Arch::ALL
        .iter()
        .map(|&arch| train(&TrainConfig { arch, ..*cfg }, data))
        .collect()
}

pub const CHECKPOINT_EXT: &str = "drfw";

fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write parameters to `path` and the model config next to it as JSON.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&model.params, &mut f)?;
    f.flush()?;
    std::fs::write(
        config_path(path),
        serde_json::to_string_pretty(&model.config)?,
    )?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. A parameter set that
/// does not fit the stored config is a config mismatch.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let params = read_params(&bytes[..])?;
    let mut model = Model::new(cfg, 0)?;
    model.params.load_from(&params)?;
    Ok(model)
}
