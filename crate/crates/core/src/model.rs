//! Encoder, transition and decoder networks, composed into the recursive
//! filter and the two baseline architectures.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::kalman::{self, LatentBelief, Observation, StepFilterParams};
use crate::nn::layers::{Bound, Conv2d, LayerNorm, Linear, LstmCell, RecurrentCellState};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::pendulum::{Sequence, IMAGE_SIDE, PIXELS};

pub const OUTPUT_DIM: usize = 2;
const CONV1_CH: usize = 8;
const CONV2_CH: usize = 16;
const CONV_FLAT: usize = CONV2_CH * 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Drf,
    NoDynamics,
    Lstm,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Drf, Arch::NoDynamics, Arch::Lstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Drf => "drf",
            Arch::NoDynamics => "no_dynamics",
            Arch::Lstm => "lstm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = DrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drf" => Ok(Arch::Drf),
            "no_dynamics" => Ok(Arch::NoDynamics),
            "lstm" => Ok(Arch::Lstm),
            other => Err(DrfError::Parameter(format!("unknown arch {other:?}"))),
        }
    }
}

/// Which part of the covariance the decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderCov {
    Diag,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    /// Encoder feature vector fed to the embedding heads.
    pub feature: usize,
    /// LSTM hidden size.
    pub recurrent: usize,
    /// Decoder hidden layer.
    pub decoder: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub latent_dim: usize,
    pub widths: Widths,
    pub dropout_rate: f64,
    pub decoder_cov: DecoderCov,
    /// Scale of the transition-matrix head init; keeps `F` near identity.
    pub transition_init_gain: f64,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            latent_dim: 30,
            widths: Widths {
                feature: 64,
                recurrent: 64,
                decoder: 64,
            },
            dropout_rate: 0.05,
            decoder_cov: DecoderCov::Diag,
            transition_init_gain: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if self.latent_dim == 0 || w.feature == 0 || w.recurrent == 0 || w.decoder == 0 {
            return Err(DrfError::Parameter("model widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(DrfError::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn decoder_in(&self) -> usize {
        let d = self.latent_dim;
        match self.decoder_cov {
            DecoderCov::Diag => 2 * d,
            DecoderCov::Full => d + d * d,
        }
    }
}

/// A batch of equal-length sequences laid out time-major: row `t * B + b`
/// holds step `t` of sequence `b`.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub images: Tensor,
    pub targets: Tensor,
    pub batch: usize,
    pub steps: usize,
}

impl SequenceInput {
    pub fn from_sequences(seqs: &[&Sequence]) -> Result<Self> {
        let batch = seqs.len();
        let steps = seqs.first().map_or(0, |s| s.frames.len());
        if batch == 0 || steps == 0 || seqs.iter().any(|s| s.frames.len() != steps) {
            return Err(DrfError::Parameter(
                "need a non-empty batch of equal-length sequences".into(),
            ));
        }
        let mut images = Vec::with_capacity(batch * steps * PIXELS);
        let mut targets = Vec::with_capacity(batch * steps * OUTPUT_DIM);
        for t in 0..steps {
            for s in seqs {
                let f = &s.frames[t];
                if f.image.len() != PIXELS {
                    return Err(DrfError::dim("sequence_input", &[f.image.len()], &[PIXELS]));
                }
                images.extend(f.image.iter().map(|&p| p as f64));
                targets.extend_from_slice(&f.truth);
            }
        }
        Ok(SequenceInput {
            images: Tensor::new(&[steps * batch, 1, IMAGE_SIDE, IMAGE_SIDE], images)?,
            targets: Tensor::new(&[steps * batch, OUTPUT_DIM], targets)?,
            batch,
            steps,
        })
    }

    /// Row index of step `t` of sequence `b`.
    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch + b
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    embed: Linear,
    norm: LayerNorm,
    noise: Option<Linear>,
}

/// Encoder embedding `w` and, when the arch has one, the diagonal
/// observation noise `r`. Both `[N, d]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub w: Var,
    pub r_diag: Option<Var>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, f) = (cfg.latent_dim, cfg.widths.feature);
        Ok(Encoder {
            conv1: Conv2d::new(store, "encoder.conv1", 1, CONV1_CH, 5, 2, rng)?,
            conv2: Conv2d::new(store, "encoder.conv2", CONV1_CH, CONV2_CH, 3, 2, rng)?,
            fc: Linear::new(store, "encoder.fc", CONV_FLAT, f, rng)?,
            embed: Linear::new(store, "encoder.linear1", f, d, rng)?,
            norm: LayerNorm::new(store, "encoder.norm", d)?,
            noise: if cfg.arch == Arch::Lstm {
                None
            } else {
                Some(Linear::new(store, "encoder.linear2", f, d, rng)?)
            },
        })
    }

    fn forward(&self, tape: &Tape, p: &Bound, images: Var) -> Result<EncoderOutput> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1..] != [1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(DrfError::dim(
                "encode",
                &shape,
                &[0, 1, IMAGE_SIDE, IMAGE_SIDE],
            ));
        }
        let n = shape[0];
        let h = tape.relu(self.conv1.forward(tape, p, images)?);
        let h = tape.relu(self.conv2.forward(tape, p, h)?);
        let h = tape.reshape(h, &[n, CONV_FLAT])?;
        let x = tape.relu(self.fc.forward(tape, p, h)?);
        let w = self
            .norm
            .forward(tape, p, self.embed.forward(tape, p, x)?)?;
        let r_diag = match &self.noise {
            Some(l) => Some(tape.elu_plus_one(l.forward(tape, p, x)?)),
            None => None,
        };
        Ok(EncoderOutput { w, r_diag })
    }
}

/// Two stacked LSTM layers.
#[derive(Debug, Clone)]
struct Recurrent {
    lower: LstmCell,
    upper: LstmCell,
}

#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub lower: RecurrentCellState,
    pub upper: RecurrentCellState,
}

impl Recurrent {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Recurrent {
            lower: LstmCell::new(store, &format!("{prefix}.lstm1"), input, hidden, rng)?,
            upper: LstmCell::new(store, &format!("{prefix}.lstm2"), hidden, hidden, rng)?,
        })
    }

    fn zeros(&self, tape: &Tape, batch: usize) -> RecurrentState {
        RecurrentState {
            lower: RecurrentCellState::zeros(tape, batch, self.lower.hidden_dim),
            upper: RecurrentCellState::zeros(tape, batch, self.upper.hidden_dim),
        }
    }

    fn step(
        &self,
        tape: &Tape,
        p: &Bound,
        x: Var,
        s: RecurrentState,
    ) -> Result<(Var, RecurrentState)> {
        let (h1, lower) = self.lower.forward(tape, p, x, s.lower)?;
        let (h2, upper) = self.upper.forward(tape, p, h1, s.upper)?;
        Ok((h2, RecurrentState { lower, upper }))
    }
}

#[derive(Debug, Clone)]
struct Transition {
    rnn: Recurrent,
    f_head: Linear,
    q_head: Linear,
}

/// `F` as `[B, d, d]`, `Q` diagonal as `[B, d]`.
#[derive(Debug, Clone, Copy)]
pub struct TransitionOutput {
    pub transition: Var,
    pub q_diag: Var,
    pub state: RecurrentState,
}

impl Transition {
    fn forward(
        &self,
        tape: &Tape,
        p: &Bound,
        z_prev: Var,
        state: RecurrentState,
    ) -> Result<TransitionOutput> {
        let b = tape.shape(z_prev)[0];
        let d = self.q_head.out_dim;
        let (h, state) = self.rnn.step(tape, p, z_prev, state)?;
        let delta = tape.reshape(self.f_head.forward(tape, p, h)?, &[b, d, d])?;
        let transition = tape.add_eye(delta, 1.0)?;
        let q_diag = tape.elu_plus_one(self.q_head.forward(tape, p, h)?);
        Ok(TransitionOutput {
            transition,
            q_diag,
            state,
        })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    hidden: Linear,
    mean: Linear,
    scale: Linear,
}

/// Point estimate and aleatoric standard deviation, `[N, 2]` each.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub y: Var,
    pub sigma: Var,
}

/// Per-step filter quantities of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub belief: LatentBelief,
    pub filter: StepFilterParams,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Decoder input rows, time-major `[T * B, decoder_in]`.
    pub decoder_input: Var,
    pub decoded: DecoderOutput,
    /// Filter records per step (recursive filter only).
    pub steps: Vec<StepRecord>,
    /// Transition matrices per step `t >= 1` (recursive filter only).
    pub transitions: Vec<Var>,
}

/// How dropout behaves in the decoder.
pub enum DropoutMode<'a> {
    Off,
    On(&'a mut dyn RngCore),
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    transition: Option<Transition>,
    recurrent_head: Option<(Recurrent, Linear)>,
    decoder: Decoder,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.numel())
            .finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let hw = config.widths.recurrent;
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let (transition, recurrent_head) = match config.arch {
            Arch::Drf => {
                let rnn = Recurrent::new(&mut store, "transition", d, hw, &mut rng)?;
                let f_head = Linear::with_gain(
                    &mut store,
                    "transition.f_head",
                    hw,
                    d * d,
                    config.transition_init_gain,
                    &mut rng,
                )?;
                let q_head = Linear::new(&mut store, "transition.q_head", hw, d, &mut rng)?;
                (
                    Some(Transition {
                        rnn,
                        f_head,
                        q_head,
                    }),
                    None,
                )
            }
            Arch::Lstm => {
                let rnn = Recurrent::new(&mut store, "recurrent", d, hw, &mut rng)?;
                let proj = Linear::new(&mut store, "recurrent.proj", hw, 2 * d, &mut rng)?;
                (None, Some((rnn, proj)))
            }
            Arch::NoDynamics => (None, None),
        };
        let dh = config.widths.decoder;
        let decoder = Decoder {
            hidden: Linear::new(
                &mut store,
                "decoder.linear3",
                config.decoder_in(),
                dh,
                &mut rng,
            )?,
            mean: Linear::new(&mut store, "decoder.linear4", dh, OUTPUT_DIM, &mut rng)?,
            scale: Linear::new(&mut store, "decoder.linear5", dh, OUTPUT_DIM, &mut rng)?,
        };
        Ok(Model {
            config,
            params: store,
            encoder,
            transition,
            recurrent_head,
            decoder,
        })
    }

    /// Parameters of the temporal stack: the transition networks for the
    /// recursive filter, the recurrent layers for the LSTM baseline.
    pub fn temporal_param_count(&self) -> usize {
        match self.config.arch {
            Arch::Drf => self.params.numel_with_prefix("transition."),
            Arch::Lstm => self.params.numel_with_prefix("recurrent."),
            Arch::NoDynamics => 0,
        }
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound::new(tape, &self.params)
    }

    /// Bind only the decoder parameters, enough for [`Model::decode`].
    pub fn bind_decoder(&self, tape: &Tape) -> Bound {
        Bound::with_prefix(tape, &self.params, "decoder.")
    }

    pub fn encode(&self, tape: &Tape, p: &Bound, images: Var) -> Result<EncoderOutput> {
        self.encoder.forward(tape, p, images)
    }

    pub fn initial_state(&self, tape: &Tape, batch: usize) -> Option<RecurrentState> {
        self.transition
            .as_ref()
            .map(|t| t.rnn.zeros(tape, batch))
            .or_else(|| {
                self.recurrent_head
                    .as_ref()
                    .map(|(r, _)| r.zeros(tape, batch))
            })
    }

    pub fn transition(
        &self,
        tape: &Tape,
        p: &Bound,
        z_prev: Var,
        state: RecurrentState,
    ) -> Result<TransitionOutput> {
        match &self.transition {
            Some(t) => t.forward(tape, p, z_prev, state),
            None => Err(DrfError::Parameter(format!(
                "arch {} has no transition network",
                self.config.arch
            ))),
        }
    }

    /// Decoder input row for a belief: `[z, diag P]` or `[z, vec P]`.
    pub fn decoder_input(&self, tape: &Tape, mean: Var, cov: Var) -> Result<Var> {
        let n = tape.shape(mean)[0];
        let d = self.config.latent_dim;
        let c = match self.config.decoder_cov {
            DecoderCov::Diag => tape.diag(cov)?,
            DecoderCov::Full => tape.reshape(cov, &[n, d * d])?,
        };
        tape.concat_cols(&[mean, c])
    }

    /// Decoder heads with dropout on the hidden activations.
    pub fn decode(
        &self,
        tape: &Tape,
        p: &Bound,
        input: Var,
        dropout: &mut DropoutMode<'_>,
    ) -> Result<DecoderOutput> {
        self.decode_with_rate(tape, p, input, self.config.dropout_rate, dropout)
    }

    /// [`Model::decode`] with an explicit dropout rate.
    pub fn decode_with_rate(
        &self,
        tape: &Tape,
        p: &Bound,
        input: Var,
        rate: f64,
        dropout: &mut DropoutMode<'_>,
    ) -> Result<DecoderOutput> {
        let mut drop = |x: Var| -> Result<Var> {
            match dropout {
                DropoutMode::Off => Ok(x),
                DropoutMode::On(rng) => tape.dropout(x, rate, true, &mut **rng),
            }
        };
        let h = tape.relu(self.decoder.hidden.forward(tape, p, input)?);
        let h = drop(h)?;
        let y = self.decoder.mean.forward(tape, p, h)?;
        let sigma = tape.elu_plus_one(self.decoder.scale.forward(tape, p, h)?);
        Ok(DecoderOutput { y, sigma })
    }

    /// Run the recursive filter over time-major encoder outputs.
    ///
    /// Step 0 initializes `z = w0, P = I` and updates with `R0`; later steps
    /// run transition, predict and update.
    pub fn filter(
        &self,
        tape: &Tape,
        p: &Bound,
        enc: &EncoderOutput,
        batch: usize,
        steps: usize,
    ) -> Result<(Vec<StepRecord>, Vec<Var>)> {
        let r_all = enc
            .r_diag
            .ok_or_else(|| DrfError::Parameter("encoder has no noise head".into()))?;
        let mut records = Vec::with_capacity(steps);
        let mut transitions = Vec::with_capacity(steps.saturating_sub(1));
        let mut state = self
            .initial_state(tape, batch)
            .ok_or_else(|| DrfError::Parameter("arch has no transition network".into()))?;
        let mut belief = None::<LatentBelief>;
        for t in 0..steps {
            let w = tape.slice_rows(enc.w, t * batch, batch)?;
            let r = tape.slice_rows(r_all, t * batch, batch)?;
            let (post, filter) = match belief {
                None => {
                    let init = kalman::init_belief(tape, w)?;
                    let (post, terms) =
                        kalman::update(tape, &init, w, r, Observation::Identity, 0)?;
                    let d = self.config.latent_dim;
                    let filter = StepFilterParams {
                        transition: tape.constant(Tensor::eye(d, Some(batch))),
                        process_noise: tape.constant(Tensor::zeros(&[batch, d])),
                        obs_noise: r,
                        observation: Observation::Identity,
                        gain: terms.gain,
                        innovation: terms.innovation,
                        innovation_cov: terms.innovation_cov,
                    };
                    (post, filter)
                }
                Some(prev) => {
                    let tr = self.transition(tape, p, prev.mean, state)?;
                    state = tr.state;
                    transitions.push(tr.transition);
                    kalman::filter_step(
                        tape,
                        &prev,
                        w,
                        tr.transition,
                        tr.q_diag,
                        r,
                        Observation::Identity,
                        t,
                    )?
                }
            };
            records.push(StepRecord {
                belief: post,
                filter,
            });
            belief = Some(post);
        }
        Ok((records, transitions))
    }

    /// Full forward pass over a batch of sequences for any arch.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &Bound,
        input: &SequenceInput,
        dropout: &mut DropoutMode<'_>,
    ) -> Result<ForwardOutput> {
        let images = tape.constant(input.images.clone());
        let enc = self.encode(tape, p, images)?;
        self.forward_encoded(tape, p, &enc, input.batch, input.steps, dropout)
    }

    /// Forward pass from precomputed encoder outputs.
    pub fn forward_encoded(
        &self,
        tape: &Tape,
        p: &Bound,
        enc: &EncoderOutput,
        batch: usize,
        steps: usize,
        dropout: &mut DropoutMode<'_>,
    ) -> Result<ForwardOutput> {
        let d = self.config.latent_dim;
        let (decoder_input, records, transitions) = match self.config.arch {
            Arch::Drf => {
                let (records, transitions) = self.filter(tape, p, enc, batch, steps)?;
                let rows = records
                    .iter()
                    .map(|r| self.decoder_input(tape, r.belief.mean, r.belief.cov))
                    .collect::<Result<Vec<_>>>()?;
                (tape.concat_rows(&rows)?, records, transitions)
            }
            Arch::NoDynamics => {
                let r = enc.r_diag.expect("no_dynamics encoder has a noise head");
                let input = match self.config.decoder_cov {
                    DecoderCov::Diag => tape.concat_cols(&[enc.w, r])?,
                    DecoderCov::Full => {
                        let cov = tape.diag_embed(r)?;
                        self.decoder_input(tape, enc.w, cov)?
                    }
                };
                (input, Vec::new(), Vec::new())
            }
            Arch::Lstm => {
                let (rnn, proj) = self
                    .recurrent_head
                    .as_ref()
                    .expect("lstm arch has recurrent layers");
                let mut state = rnn.zeros(tape, batch);
                let mut rows = Vec::with_capacity(steps);
                for t in 0..steps {
                    let w = tape.slice_rows(enc.w, t * batch, batch)?;
                    let (h, s) = rnn.step(tape, p, w, state)?;
                    state = s;
                    let out = proj.forward(tape, p, h)?;
                    let z = tape.slice_cols(out, 0, d)?;
                    let pd = tape.elu_plus_one(tape.slice_cols(out, d, d)?);
                    rows.push(match self.config.decoder_cov {
                        DecoderCov::Diag => tape.concat_cols(&[z, pd])?,
                        DecoderCov::Full => {
                            let cov = tape.diag_embed(pd)?;
                            self.decoder_input(tape, z, cov)?
                        }
                    });
                }
                (tape.concat_rows(&rows)?, Vec::new(), Vec::new())
            }
        };
        let decoded = self.decode(tape, p, decoder_input, dropout)?;
        Ok(ForwardOutput {
            decoder_input,
            decoded,
            steps: records,
            transitions,
        })
    }

    /// Mean Gaussian NLL of a forward pass against the targets.
    pub fn loss(&self, tape: &Tape, out: &ForwardOutput, input: &SequenceInput) -> Result<Var> {
        let y = tape.constant(input.targets.clone());
        tape.gaussian_nll(out.decoded.y, out.decoded.sigma, y)
    }
}
