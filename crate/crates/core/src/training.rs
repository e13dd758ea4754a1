//! Optimization loop.
//!
//! Every sample is a training cloud damaged by a freshly seeded
//! pseudo-anomaly. Gradients of `batch_size` samples are summed in sample
//! order and averaged, then one Adam update is applied. The learning rate
//! follows a cosine schedule over epochs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dagen::{generate, DaGenParams};
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, normalize_cloud, PointCloud, DEFAULT_NORMAL_K};
use crate::io::write_atomic;
use crate::losses::{combined_loss, LossBreakdown, LossConfig};
use crate::net::{Network, NetworkConfig, TrainingMeta, Variant};

pub const DEFAULT_LR: f64 = 0.001;
pub const PRUNED_LR: f64 = 0.0015;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `None` picks 0.001 for the full and 0.0015 for the pruned variant.
    pub lr_initial: Option<f64>,
    pub lr_min: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Optimizer steps per epoch; `None` means one pass over the clouds,
    /// `ceil(n / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_initial: None,
            lr_min: 0.0,
            epochs: 200,
            seed: 0,
            checkpoint_every: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn initial_lr(&self, variant: Variant) -> f64 {
        self.lr_initial.unwrap_or(match variant {
            Variant::Full => DEFAULT_LR,
            Variant::Pruned => PRUNED_LR,
        })
    }

    /// Fills in the variant-dependent learning rate.
    pub fn resolved(&self, variant: Variant) -> Self {
        Self {
            lr_initial: Some(self.initial_lr(variant)),
            ..self.clone()
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let lr0 = self.initial_lr(variant);
        if !(self.lr_min >= 0.0 && self.lr_min.is_finite()) {
            return Err(Error::config("lr_min", "must be a finite value >= 0"));
        }
        if !(lr0 > self.lr_min && lr0.is_finite()) {
            return Err(Error::config(
                "lr_initial",
                "must be finite and greater than lr_min",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch", "must be >= 1"));
        }
        Ok(())
    }

    pub fn steps_for(&self, n_clouds: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_clouds.div_ceil(self.batch_size).max(1))
    }

    pub fn schedule(&self, variant: Variant) -> Schedule {
        Schedule {
            lr_initial: self.initial_lr(variant),
            lr_min: self.lr_min,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub epochs: usize,
}

/// `lr_min + (lr_initial - lr_min) (1 + cos(pi t / epochs)) / 2` for
/// `0 <= t <= epochs`.
pub fn lr_at(t: usize, s: &Schedule) -> Result<f64> {
    if t > s.epochs || s.epochs == 0 {
        return Err(Error::invalid(format!(
            "epoch {t} outside the schedule 0..={}",
            s.epochs
        )));
    }
    let c = (std::f64::consts::PI * t as f64 / s.epochs as f64).cos();
    Ok(s.lr_min + 0.5 * (s.lr_initial - s.lr_min) * (1.0 + c))
}

/// Adam moments. Entries whose batch gradient is exactly zero are left
/// untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g == 0.0 {
                continue;
            }
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_dist: f64,
    pub l_dir: f64,
    pub l_sym: f64,
    pub l_comb: f64,
    pub wall_seconds: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,L_dist,L_dir,L_sym,L_comb,wall_seconds\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            e.epoch, e.lr, e.l_dist, e.l_dir, e.l_sym, e.l_comb, e.wall_seconds
        );
    }
    s
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: NetworkConfig,
    pub init_seed: u64,
    pub epochs_done: usize,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    network: NetworkConfig,
    init_seed: u64,
    epochs_done: usize,
    step: u64,
    log: Vec<EpochLog>,
}

const STATE_MAGIC: &[u8; 8] = b"MC4ADTRS";

impl TrainState {
    /// Magic, JSON header length and header, then params, first and second
    /// moments as little-endian f64 arrays.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&StateHeader {
            network: self.network.clone(),
            init_seed: self.init_seed,
            epochs_done: self.epochs_done,
            step: self.adam.step,
            log: self.log.clone(),
        })?;
        let n = self.params.len();
        let mut buf = Vec::with_capacity(24 + header.len() + n * 24);
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        for arr in [&self.params, &self.adam.m, &self.adam.v] {
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("training state: {m}"));
        if buf.len() < 16 || &buf[..8] != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u64_at = |o: usize| -> Result<u64> {
            buf.get(o..o + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated"))
        };
        let hlen = u64_at(8)? as usize;
        let header: StateHeader = serde_json::from_slice(
            buf.get(16..16 + hlen)
                .ok_or_else(|| bad("truncated header"))?,
        )?;
        let n = u64_at(16 + hlen)? as usize;
        let start = 24 + hlen;
        if buf.len() != start + 24 * n {
            return Err(bad("length does not match parameter count"));
        }
        let arr = |k: usize| -> Vec<f64> {
            buf[start + 8 * n * k..start + 8 * n * (k + 1)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            network: header.network,
            init_seed: header.init_seed,
            epochs_done: header.epochs_done,
            params: arr(0),
            adam: Adam {
                m: arr(1),
                v: arr(2),
                step: header.step,
            },
            log: header.log,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Normalizes every cloud and estimates its normals once, up front.
pub fn prepare_clouds(clouds: &[PointCloud]) -> Result<Vec<PointCloud>> {
    clouds
        .par_iter()
        .map(|c| {
            let c = normalize_cloud(c);
            if c.len() < 3 {
                return Err(Error::invalid("training clouds need at least 3 points"));
            }
            Ok(estimate_normals(&c, DEFAULT_NORMAL_K.min(c.len()))?.0)
        })
        .collect()
}

/// Seed of the pseudo-anomaly for one sample, derived from the run seed.
pub fn sample_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    // SplitMix64 finalizer over a combined key.
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (sample as u64)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9)
            .rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradient of one damaged sample.
pub fn sample_gradient(
    network: &Network,
    cloud: &PointCloud,
    da: &DaGenParams,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let sample = generate(cloud, da)?;
    let target = loss_cfg.target(&sample.displacement);
    let trace = network.forward_traced(&sample.perturbed, Default::default())?;
    let (loss, g) = combined_loss(trace.prediction(), &target, loss_cfg)?;
    let grads = network.backward(&trace, &g.external, &g.internal)?;
    Ok((loss, grads))
}

/// Where and how often a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory for `checkpoint.bin`, `train_state.bin` and `train_log.csv`.
    pub dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "train_state.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub state: TrainState,
}

fn save_all(dir: &Path, network: &Network, state: &TrainState, meta: TrainingMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    network
        .to_checkpoint(state.init_seed, state.adam.step, meta)
        .save(&dir.join(CHECKPOINT_FILE))?;
    write_atomic(&dir.join(STATE_FILE), &state.to_bytes()?)?;
    write_atomic(&dir.join(LOG_FILE), log_csv(&state.log).as_bytes())
}

/// The four configs that define a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSpec {
    pub network: NetworkConfig,
    pub dagen: DaGenParams,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// Trains a network on normal clouds. Pass `resume` to continue a stopped
/// run; the remaining epochs then reproduce the uninterrupted run exactly.
pub fn train(
    clouds: &[PointCloud],
    spec: &TrainSpec,
    outputs: &TrainOutputs,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let (net_cfg, da, loss_cfg, train_cfg) = (&spec.network, &spec.dagen, &spec.loss, &spec.train);
    if clouds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    net_cfg.validate()?;
    da.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate(net_cfg.variant)?;
    let clouds = prepare_clouds(clouds)?;
    let schedule = train_cfg.schedule(net_cfg.variant);

    let mut network = Network::build(net_cfg, train_cfg.seed)?;
    let mut state = match resume {
        Some(s) => {
            if s.network != *net_cfg || s.params.len() != network.parameter_count() {
                return Err(Error::Checkpoint(
                    "training state was produced by a different network config".into(),
                ));
            }
            if s.epochs_done > train_cfg.epochs {
                return Err(Error::Checkpoint(format!(
                    "training state has {} epochs, more than the configured {}",
                    s.epochs_done, train_cfg.epochs
                )));
            }
            network.params_mut().copy_from_slice(&s.params);
            s
        }
        None => TrainState {
            network: net_cfg.clone(),
            init_seed: train_cfg.seed,
            epochs_done: 0,
            params: Vec::new(),
            adam: Adam::new(network.parameter_count()),
            log: Vec::new(),
        },
    };

    let n = clouds.len();
    let bs = train_cfg.batch_size;
    let steps = train_cfg.steps_for(n);
    let meta = |done: usize| TrainingMeta {
        lr_initial: schedule.lr_initial,
        lr_min: schedule.lr_min,
        epochs: train_cfg.epochs,
        epochs_done: done,
        batch_size: bs,
    };

    let first_epoch = state.epochs_done;
    for epoch in first_epoch..train_cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, &schedule)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
            train_cfg.seed,
            epoch,
            usize::MAX,
        )));
        let mut sums = LossBreakdown::default();
        for step in 0..steps {
            let results: Vec<(usize, Result<(LossBreakdown, Vec<f64>)>)> = (0..bs)
                .into_par_iter()
                .map(|j| {
                    let g = step * bs + j;
                    let params = DaGenParams {
                        rng_seed: sample_seed(train_cfg.seed, epoch, g),
                        ..da.clone()
                    };
                    (
                        g,
                        sample_gradient(&network, &clouds[order[g % n]], &params, loss_cfg),
                    )
                })
                .collect();
            let mut grad = vec![0.0; network.parameter_count()];
            for (g, r) in results {
                let (loss, sg) = r.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!(
                        "epoch {epoch} step {} sample {g} lr {lr}: {m}",
                        state.adam.step
                    )),
                    other => other,
                })?;
                for (name, v) in [
                    ("L_dist", loss.dist),
                    ("L_dir", loss.dir),
                    ("L_sym", loss.sym),
                ] {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "epoch {epoch} step {} sample {g} lr {lr}: {name} = {v}",
                            state.adam.step
                        )));
                    }
                }
                sums.dist += loss.dist;
                sums.dir += loss.dir;
                sums.sym += loss.sym;
                sums.total += loss.total;
                for (a, b) in grad.iter_mut().zip(&sg) {
                    *a += b;
                }
            }
            let inv = 1.0 / bs as f64;
            for v in &mut grad {
                *v *= inv;
            }
            if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "epoch {epoch} step {} lr {lr}: gradient of parameter {i} is not finite",
                    state.adam.step
                )));
            }
            state.adam.update(network.params_mut(), &grad, lr);
        }
        let count = (steps * bs) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            l_dist: sums.dist / count,
            l_dir: sums.dir / count,
            l_sym: sums.sym / count,
            l_comb: sums.total / count,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        state.log.push(entry);
        state.epochs_done = epoch + 1;

        let last = epoch + 1 == train_cfg.epochs;
        let periodic =
            train_cfg.checkpoint_every > 0 && (epoch + 1) % train_cfg.checkpoint_every == 0;
        if let Some(dir) = &outputs.dir {
            if last || periodic {
                state.params = network.params().to_vec();
                save_all(dir, &network, &state, meta(epoch + 1))?;
            }
        }
    }
    state.params = network.params().to_vec();
    if let Some(dir) = &outputs.dir {
        if first_epoch == train_cfg.epochs {
            save_all(dir, &network, &state, meta(state.epochs_done))?;
        }
    }
    Ok(TrainOutcome { network, state })
}
