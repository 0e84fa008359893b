//! Noisy pendulum benchmark: dynamics, rendering, observation noise and the
//! on-disk dataset format.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::par::{self, Exec};

pub const IMAGE_SIDE: usize = 24;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Gravity over pendulum length, s^-2.
pub const G_OVER_L: f64 = 9.81;
pub const DEFAULT_DT: f64 = 0.05;
/// RK4 sub-steps per call to [`step_dynamics`].
const SUBSTEPS: usize = 8;

const BLOB_SIGMA: f64 = 1.5;
const BOB_RADIUS: f64 = 9.0;
const CENTER: f64 = 11.5;
/// Width of the per-frame noise window below the sequence ceiling.
const BETA_WINDOW: f64 = 0.2;

/// Angle from the downward vertical (wrapped to `(-pi, pi]`) and angular
/// velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

impl PendulumState {
    pub fn new(theta: f64, omega: f64) -> Self {
        PendulumState {
            theta: wrap_angle(theta),
            omega,
        }
    }

    /// `(cos theta, sin theta)`.
    pub fn observation_target(&self) -> [f64; 2] {
        [self.theta.cos(), self.theta.sin()]
    }

    /// Energy per unit `m l^2`: `omega^2/2 - (g/l) cos theta`.
    pub fn energy(&self) -> f64 {
        0.5 * self.omega * self.omega - G_OVER_L * self.theta.cos()
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; keep the half-open interval
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

fn rk4(theta: f64, omega: f64, h: f64) -> (f64, f64) {
    let acc = |th: f64| -G_OVER_L * th.sin();
    let (k1t, k1w) = (omega, acc(theta));
    let (k2t, k2w) = (omega + 0.5 * h * k1w, acc(theta + 0.5 * h * k1t));
    let (k3t, k3w) = (omega + 0.5 * h * k2w, acc(theta + 0.5 * h * k2t));
    let (k4t, k4w) = (omega + h * k3w, acc(theta + h * k3t));
    (
        theta + h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t),
        omega + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
    )
}

/// Advance the undamped pendulum `theta'' = -(g/l) sin theta` by `dt` using
/// classical Runge-Kutta on fixed sub-steps.
pub fn step_dynamics(s: PendulumState, dt: f64) -> PendulumState {
    let h = dt / SUBSTEPS as f64;
    let (mut th, mut om) = (s.theta, s.omega);
    for _ in 0..SUBSTEPS {
        (th, om) = rk4(th, om, h);
    }
    PendulumState::new(th, om)
}

/// Render a 24x24 frame: a Gaussian blob (sigma 1.5 px, peak 1) at the bob.
/// Row index grows downward, so `theta = 0` puts the bob at the bottom.
pub fn render(s: &PendulumState) -> Vec<f64> {
    let cx = CENTER + BOB_RADIUS * s.theta.sin();
    let cy = CENTER + BOB_RADIUS * s.theta.cos();
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    let mut img = vec![0.0; PIXELS];
    for y in 0..IMAGE_SIDE {
        let dy = y as f64 - cy;
        for x in 0..IMAGE_SIDE {
            let dx = x as f64 - cx;
            img[y * IMAGE_SIDE + x] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    img
}

/// Draw the per-sequence noise ceiling `r ~ U(0, r_max)`.
pub fn draw_noise_ceiling<R: Rng + ?Sized>(r_max: f64, rng: &mut R) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_max) {
        return Err(DrfError::Parameter(format!("r_max {r_max} outside [0, 1]")));
    }
    Ok(if r_max == 0.0 {
        0.0
    } else {
        rng.random_range(0.0..r_max)
    })
}

/// Blend one frame with uniform noise. Draws `beta ~ U(max(0, r - 0.2), r)`
/// and returns `clip((1 - beta) * image + beta * u, 0, 1)` with the `beta`.
pub fn corrupt_frame<R: Rng + ?Sized>(image: &[f64], ceiling: f64, rng: &mut R) -> (Vec<f64>, f64) {
    let lo = (ceiling - BETA_WINDOW).max(0.0);
    let beta = if ceiling > lo {
        rng.random_range(lo..ceiling)
    } else {
        ceiling
    };
    if beta == 0.0 {
        return (image.to_vec(), 0.0);
    }
    let out = image
        .iter()
        .map(|&p| {
            let u: f64 = rng.random();
            ((1.0 - beta) * p + beta * u).clamp(0.0, 1.0)
        })
        .collect();
    (out, beta)
}

/// Corrupt a whole sequence: one ceiling draw, then one `beta` per frame.
pub fn corrupt<R: Rng + ?Sized>(
    images: &[Vec<f64>],
    r_max: f64,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let ceiling = draw_noise_ceiling(r_max, rng)?;
    Ok(images
        .iter()
        .map(|img| corrupt_frame(img, ceiling, rng))
        .collect())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream seed for item `index` under `seed`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    /// Row-major 24x24 intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Blend weight `beta` used for this frame.
    pub noise_level: f32,
    /// `(cos theta, sin theta)`.
    pub truth: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub seed: u64,
    pub frames: Vec<ObservationFrame>,
}

/// Sequences of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub sequences: Vec<Sequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_seq: usize,
    pub seq_len: usize,
    pub r_max: f64,
    pub dt: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(n_seq: usize, seq_len: usize, r_max: f64, seed: u64) -> Self {
        DatasetConfig {
            n_seq,
            seq_len,
            r_max,
            dt: DEFAULT_DT,
            seed,
        }
    }
}

/// Simulate, render and corrupt one sequence from its own seed.
pub fn generate_sequence(seq_seed: u64, seq_len: usize, r_max: f64, dt: f64) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
    let theta = rng.random_range(-PI..PI);
    let omega = rng.random_range(-2.0..2.0);
    let ceiling = draw_noise_ceiling(r_max, &mut rng)?;
    let mut state = PendulumState::new(theta, omega);
    let mut frames = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        if t > 0 {
            state = step_dynamics(state, dt);
        }
        let clean = render(&state);
        let (noisy, beta) = corrupt_frame(&clean, ceiling, &mut rng);
        frames.push(ObservationFrame {
            image: noisy.iter().map(|&v| v as f32).collect(),
            noise_level: beta as f32,
            truth: state.observation_target(),
        });
    }
    Ok(Sequence {
        seed: seq_seed,
        frames,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig, exec: Exec) -> Result<SequenceBatch> {
    if cfg.n_seq == 0 || cfg.seq_len < 2 {
        return Err(DrfError::Parameter(format!(
            "need n_seq >= 1 and seq_len >= 2, got {} and {}",
            cfg.n_seq, cfg.seq_len
        )));
    }
    if !(cfg.dt > 0.0) {
        return Err(DrfError::Parameter(format!(
            "dt must be positive, got {}",
            cfg.dt
        )));
    }
    let sequences = par::try_map_range(exec, cfg.n_seq, |i| {
        generate_sequence(sub_seed(cfg.seed, i as u64), cfg.seq_len, cfg.r_max, cfg.dt)
    })?;
    Ok(SequenceBatch { sequences })
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.frames.len())
    }

    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn mean_noise(&self) -> f64 {
        let n = self.n_frames().max(1) as f64;
        self.frames().map(|f| f.noise_level as f64).sum::<f64>() / n
    }

    pub fn frames(&self) -> impl Iterator<Item = &ObservationFrame> {
        self.sequences.iter().flat_map(|s| s.frames.iter())
    }

    /// Sequences at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        SequenceBatch {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }

    /// Split off the last `ceil(frac * n)` sequences (at least one when
    /// `n >= 2`) as a held-out set.
    pub fn split_tail(&self, frac: f64) -> (SequenceBatch, SequenceBatch) {
        let n = self.len();
        let mut held = ((n as f64) * frac).ceil() as usize;
        if n >= 2 {
            held = held.clamp(1, n - 1);
        } else {
            held = 0;
        }
        let cut = n - held;
        (
            SequenceBatch {
                sequences: self.sequences[..cut].to_vec(),
            },
            SequenceBatch {
                sequences: self.sequences[cut..].to_vec(),
            },
        )
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let t = self.seq_len();
        if self.sequences.iter().any(|s| s.frames.len() != t) {
            return Err(DrfError::Format("sequences differ in length".into()));
        }
        let n =
            u32::try_from(self.len()).map_err(|_| DrfError::Format("too many sequences".into()))?;
        let mut buf = Vec::with_capacity(16 + self.len() * (8 + t * (PIXELS * 4 + 20)));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&n.to_le_bytes());
        buf.extend_from_slice(&(t as u32).to_le_bytes());
        buf.extend_from_slice(&(IMAGE_SIDE as u16).to_le_bytes());
        buf.extend_from_slice(&(IMAGE_SIDE as u16).to_le_bytes());
        for s in &self.sequences {
            buf.extend_from_slice(&s.seed.to_le_bytes());
            for f in &s.frames {
                for p in &f.image {
                    buf.extend_from_slice(&p.to_le_bytes());
                }
                buf.extend_from_slice(&f.noise_level.to_le_bytes());
                buf.extend_from_slice(&f.truth[0].to_le_bytes());
                buf.extend_from_slice(&f.truth[1].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<SequenceBatch> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(DrfError::Format("truncated dataset".into()));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != DATASET_MAGIC {
            return Err(DrfError::Format("bad dataset magic".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(DrfError::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let h = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let w = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        if h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(DrfError::Format(format!("unsupported image size {h}x{w}")));
        }
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let mut frames = Vec::with_capacity(t);
            for _ in 0..t {
                let image = take(PIXELS * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let noise_level = f32::from_le_bytes(take(4)?.try_into().unwrap());
                let c = f64::from_le_bytes(take(8)?.try_into().unwrap());
                let s = f64::from_le_bytes(take(8)?.try_into().unwrap());
                frames.push(ObservationFrame {
                    image,
                    noise_level,
                    truth: [c, s],
                });
            }
            sequences.push(Sequence { seed, frames });
        }
        Ok(SequenceBatch { sequences })
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"DRFD";
pub const DATASET_VERSION: u16 = 1;

/// Path of the JSON sidecar next to a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the dataset and its generation config sidecar.
pub fn save_dataset(path: &Path, batch: &SequenceBatch, cfg: &DatasetConfig) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    batch.write(f)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Read a dataset; the sidecar is optional.
pub fn load_dataset(path: &Path) -> Result<(SequenceBatch, Option<DatasetConfig>)> {
    let batch = SequenceBatch::read(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let side = sidecar_path(path);
    let cfg = if side.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(side)?)?)
    } else {
        None
    };
    Ok((batch, cfg))
}

/// Mean absolute pixel difference between two frames.
pub fn mean_abs_diff(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}
