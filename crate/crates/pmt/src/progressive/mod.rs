//! The training engine: batch stream and buffer, model rotation with a
//! static iteration gap, pseudo-label gating, per-iteration loss assembly
//! and optimization, EMA maintenance, the step LR schedule, checkpointing,
//! and the two baseline modes (plain mean teacher, supervised-only).
//!
//! The loop is sequential by contract — the gap invariant and bit-exact
//! determinism depend on it. Independent runs (seeds, configs) parallelize
//! freely at the harness level.

mod checkpoint;
mod scheduler;
mod train;

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointError};
pub use scheduler::{BatchBuffer, GapScheduler, Phase};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{SgdState, TensorError};
use crate::losses::{LossBreakdown, LossWeights};
use crate::seeding::{derive, tag};
use crate::segnet::{ModelPair, SegNet, SegNetConfig};
use crate::synthdata::{DatasetSplit, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(
        "non-finite loss at iteration {iter} of model {model} (diagnostics: {context}); aborting"
    )]
    NonFiniteLoss {
        iter: usize,
        model: usize,
        context: String,
    },
    #[error("batch buffer underflow: index {index} outside retained window [{base}, {head})")]
    BufferUnderflow {
        index: usize,
        base: usize,
        head: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Two co-training mean-teacher pairs with the gap scheduler.
    Pmt,
    /// One mean-teacher pair, no peer terms.
    MtBaseline,
    /// One student, labeled data only.
    SupervisedBaseline,
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub n_models: usize,
    /// Buffer length; the scheduler's lead is `buffer_len_B / (n_models - 1)`.
    #[serde(rename = "buffer_len_B")]
    pub buffer_len: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub lr0: f64,
    /// Step size of the LR decay; `None` derives `total_iters * 2500 / 6000`.
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: Mode,
    pub plf_on: bool,
    pub dda_on: bool,
    pub mt_on: bool,
    pub teacher_noise_sigma: f64,
    pub ema_alpha: f64,
    /// Overrides the scheduler lead (phase length target). `None` follows
    /// the buffer: `buffer_len_B / (n_models - 1)`.
    pub phase_lead: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_models: 2,
            buffer_len: 20,
            total_iters: 2000,
            batch_size: 4,
            labeled_per_batch: 2,
            lr0: 0.01,
            lr_decay_every: None,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            mode: Mode::Pmt,
            plf_on: true,
            dda_on: true,
            mt_on: true,
            teacher_noise_sigma: 0.0,
            ema_alpha: 0.99,
            phase_lead: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.total_iters == 0 {
            return err("trainer.total_iters must be >= 1");
        }
        if self.batch_size == 0 || self.labeled_per_batch == 0 {
            return err("trainer.batch_size and trainer.labeled_per_batch must be >= 1");
        }
        if self.labeled_per_batch > self.batch_size {
            return err("trainer.labeled_per_batch must be <= trainer.batch_size");
        }
        if self.lr0 <= 0.0 || self.lr_decay_factor <= 0.0 {
            return err("trainer.lr0 and trainer.lr_decay_factor must be > 0");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return err("trainer.ema_alpha must be in [0, 1]");
        }
        if self.teacher_noise_sigma < 0.0 {
            return err("trainer.teacher_noise_sigma must be >= 0");
        }
        if self.mode == Mode::Pmt {
            if self.n_models < 2 {
                return err("trainer.n_models must be >= 2 in pmt mode");
            }
            if self.n_models != 2 {
                return err(
                    "co-training is implemented for exactly 2 models; \
                     larger cohorts are supported by the scheduler only",
                );
            }
            if self.buffer_len == 0 || self.buffer_len % self.n_models != 0 {
                return err("trainer.buffer_len_B must be a positive multiple of n_models");
            }
            if self.buffer_len % (self.n_models - 1) != 0 {
                return err("trainer.buffer_len_B must be divisible by n_models - 1");
            }
        }
        Ok(())
    }

    /// Models actually instantiated: baselines always run a single pair.
    pub fn effective_n_models(&self) -> usize {
        match self.mode {
            Mode::Pmt => self.n_models,
            _ => 1,
        }
    }

    pub fn resolved_lr_decay_every(&self) -> usize {
        self.lr_decay_every
            .unwrap_or(self.total_iters * 2500 / 6000)
            .max(1)
    }

    /// Scheduler lead: phase targets are `max(cursors) + lead`.
    pub fn resolved_lead(&self) -> usize {
        match self.mode {
            Mode::Pmt => self
                .phase_lead
                .unwrap_or(self.buffer_len / (self.n_models - 1))
                .max(1),
            // single model: one long phase
            _ => self.total_iters,
        }
    }
}

/// Step decay: `lr0 / factor^(floor(iter / every))`, driven by each model's
/// own cursor.
pub fn lr_at(iter: usize, cfg: &TrainerConfig) -> f64 {
    let every = cfg.resolved_lr_decay_every();
    cfg.lr0 / cfg.lr_decay_factor.powi((iter / every) as i32)
}

/// One stream batch: indices into the labeled / unlabeled training pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub stream_index: usize,
}

/// The training pools a run draws from.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub h: usize,
    pub w: usize,
}

impl TrainingSet {
    /// Splits generated samples into training pools and the held-out test
    /// set, marking labeled flags.
    pub fn from_split(samples: &[Sample], split: &DatasetSplit) -> (TrainingSet, Vec<Sample>) {
        let pick = |ids: &[usize], labeled: bool| -> Vec<Sample> {
            ids.iter()
                .map(|&i| {
                    let mut s = samples[i].clone();
                    s.is_labeled = labeled;
                    s
                })
                .collect()
        };
        let labeled = pick(&split.labeled, true);
        let unlabeled = pick(&split.unlabeled, false);
        let test = pick(&split.test, false);
        let (h, w) = (samples[0].h, samples[0].w);
        (
            TrainingSet {
                labeled,
                unlabeled,
                h,
                w,
            },
            test,
        )
    }
}

/// Batch composition at stream index `j` is a pure function of
/// `(seed, j)`: uniform draws with replacement from each pool. Nothing to
/// checkpoint, and any batch can be regenerated in isolation.
pub fn make_stream_batch(
    seed: u64,
    stream_index: usize,
    cfg: &TrainerConfig,
    n_labeled_pool: usize,
    n_unlabeled_pool: usize,
) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag::STREAM, stream_index as u64));
    let labeled = (0..cfg.labeled_per_batch)
        .map(|_| rng.gen_range(0..n_labeled_pool))
        .collect();
    let n_unlab = cfg.batch_size - cfg.labeled_per_batch;
    let unlabeled = if n_unlabeled_pool == 0 {
        Vec::new()
    } else {
        (0..n_unlab).map(|_| rng.gen_range(0..n_unlabeled_pool)).collect()
    };
    Batch {
        labeled,
        unlabeled,
        stream_index,
    }
}

/// One logged training iteration.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub iter: usize,
    pub model: usize,
    pub round: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const HISTORY_HEADER: &str =
    "iter,model,round,plf_pass,lr,l_ce,l_dice,l_aln,l_u,l_t,l_total,lambda1,lambda2";

/// Serializes history rows to CSV (deterministic shortest-roundtrip floats).
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.model,
            r.round,
            b.plf_pass,
            r.lr,
            b.l_ce,
            b.l_dice,
            b.l_aln,
            b.l_u,
            b.l_t,
            b.l_total,
            b.lambda1_t,
            b.lambda2_t
        ));
    }
    out
}

/// Everything a run carries between iterations.
pub struct TrainerState {
    pub cfg: TrainerConfig,
    pub net: SegNet,
    pub weights: LossWeights,
    pub pairs: Vec<ModelPair<f32>>,
    pub sched: GapScheduler,
    pub buffer: BatchBuffer,
    pub sgd: Vec<SgdState>,
    pub history: Vec<HistoryRow>,
}

impl TrainerState {
    /// Fresh state: pairs initialized from per-model derived seeds, zeroed
    /// optimizer velocity, empty buffer.
    pub fn init(
        cfg: TrainerConfig,
        net_cfg: SegNetConfig,
        weights: LossWeights,
    ) -> Result<TrainerState, TrainError> {
        cfg.validate()?;
        weights.validate()?;
        let net = SegNet::new(net_cfg)?;
        let n = cfg.effective_n_models();
        let pairs = (0..n)
            .map(|i| {
                ModelPair::init(
                    &net,
                    derive(cfg.seed, tag::MODEL_INIT, i as u64),
                    cfg.ema_alpha,
                    i,
                )
            })
            .collect();
        let sgd = (0..n)
            .map(|_| SgdState::new(cfg.lr0, cfg.momentum, cfg.weight_decay))
            .collect::<Result<Vec<_>, _>>()?;
        let sched = GapScheduler::new(n, cfg.resolved_lead());
        Ok(TrainerState {
            cfg,
            net,
            weights,
            pairs,
            sched,
            buffer: BatchBuffer::new(),
            sgd,
            history: Vec::new(),
        })
    }

    /// Whether every model has consumed `total_iters` batches.
    pub fn finished(&self) -> bool {
        self.sched.min_iter() >= self.cfg.total_iters
    }

    fn validate_pools(&self, data: &TrainingSet) -> Result<(), TrainError> {
        if data.labeled.is_empty() {
            return Err(TrainError::InvalidConfig(
                "training set has no labeled samples".into(),
            ));
        }
        let wants_unlabeled =
            self.cfg.mode != Mode::SupervisedBaseline && self.cfg.batch_size > self.cfg.labeled_per_batch;
        if wants_unlabeled && data.unlabeled.is_empty() {
            return Err(TrainError::InvalidConfig(
                "semi-supervised mode needs an unlabeled pool (labeled_fraction < 1)".into(),
            ));
        }
        let fac = self.net.config().downsample_factor();
        if data.h % fac != 0 || data.w % fac != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "data dims {}x{} not divisible by the network factor {}",
                data.h, data.w, fac
            )));
        }
        Ok(())
    }

    /// Runs up to `max_steps` iterations (or to completion when `None`).
    pub fn run_steps(
        &mut self,
        data: &TrainingSet,
        max_steps: Option<usize>,
    ) -> Result<(), TrainError> {
        self.validate_pools(data)?;
        let mut steps = 0usize;
        loop {
            if max_steps.is_some_and(|m| steps >= m) {
                return Ok(());
            }
            let phase = match self.sched.phase() {
                Some(p) => p,
                None => match self.sched.begin_phase(self.cfg.total_iters) {
                    Some(p) => p,
                    None => return Ok(()),
                },
            };
            let iter = self.sched.iters()[phase.model];
            if iter == self.buffer.head() {
                let fresh = make_stream_batch(
                    self.cfg.seed,
                    iter,
                    &self.cfg,
                    data.labeled.len(),
                    data.unlabeled.len(),
                );
                self.buffer.push_fresh(fresh);
            }
            let batch = self.buffer.get(iter)?;
            let row = train::train_iteration(
                &self.net,
                &self.pairs,
                phase.model,
                iter,
                self.sched.round(),
                &self.cfg,
                &self.weights,
                &batch,
                data,
                &mut self.sgd[phase.model],
            )?;
            self.history.push(row);
            if self.sched.advance() {
                self.buffer.trim_to(self.sched.min_iter());
            }
            steps += 1;
        }
    }

    /// Runs to completion.
    pub fn run(&mut self, data: &TrainingSet) -> Result<(), TrainError> {
        self.run_steps(data, None)
    }
}
