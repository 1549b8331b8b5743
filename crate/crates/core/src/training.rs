//! Maximum-likelihood training: batch assembly with data dropout, Adam with
//! gradient-norm clipping, an exponentially decaying learning rate, and a
//! resumable training state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{window_indices, AlignedSequence};
use crate::flow::{encoder_input, Chunk, FlowConfig, FlowError, FlowModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("diverged at step {step}: nll {nll} exceeds {factor} x initial {initial}")]
    Diverged {
        step: usize,
        nll: f64,
        initial: f64,
        factor: f64,
    },
    #[error("training data: {0}")]
    Data(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Each history frame is dropped independently.
    PerSlot,
    /// The whole history of a frame is dropped at once.
    PerWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_final: f64,
    pub data_dropout: f64,
    pub dropout_mode: DropoutMode,
    /// Chunks per batch.
    pub batch_size: usize,
    /// Frames per chunk.
    pub sequence_chunk_length: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    /// Abort when nll exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 80_000,
            lr_max: 2e-3,
            lr_final: 5e-4,
            data_dropout: 0.4,
            dropout_mode: DropoutMode::PerSlot,
            batch_size: 32,
            sequence_chunk_length: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
            divergence_factor: 10.0,
            checkpoint_interval: 5000,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.data_dropout) {
            return bad("data_dropout must lie in [0, 1)");
        }
        if !(self.lr_max > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_final <= lr_max");
        }
        if self.steps == 0 || self.batch_size == 0 || self.sequence_chunk_length == 0 {
            return bad("steps, batch_size and sequence_chunk_length must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// `lr(t) = lr_max * (lr_final / lr_max)^(t / steps)`
    pub fn learning_rate(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.steps as f64).min(1.0);
        self.lr_max * (self.lr_final / self.lr_max).powf(frac)
    }
}

/// Decides which history slots are dropped; `true` means dropped.
pub fn dropout_mask<R: Rng>(slots: usize, rate: f64, mode: DropoutMode, rng: &mut R) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![false; slots];
    }
    match mode {
        DropoutMode::PerSlot => (0..slots).map(|_| rng.random::<f64>() < rate).collect(),
        DropoutMode::PerWindow => vec![rng.random::<f64>() < rate; slots],
    }
}

/// Replaces dropped history frames by the zero vector (the standardized mean).
pub fn data_dropout<R: Rng>(history: &[Vec<f64>], rate: f64, mode: DropoutMode, rng: &mut R) -> Vec<Vec<f64>> {
    let mask = dropout_mask(history.len(), rate, mode, rng);
    history
        .iter()
        .zip(mask)
        .map(|(h, m)| if m { vec![0.0; h.len()] } else { h.clone() })
        .collect()
}

/// Encoder inputs for frames `start..start + len` of `seq`. `mask(t)` gives
/// the dropped history slots for frame `t`.
pub fn chunk_from_sequence(
    seq: &AlignedSequence,
    start: usize,
    len: usize,
    flow: &FlowConfig,
    mut mask: impl FnMut() -> Vec<bool>,
) -> Chunk<f64> {
    let zero = vec![0.0; seq.poses.cols()];
    let mut targets = Vec::with_capacity(len);
    let mut inputs = Vec::with_capacity(len);
    for t in start..start + len {
        let (h, c) = window_indices(t, seq.len(), flow.history, flow.context);
        let m = mask();
        let hist: Vec<&[f64]> = h
            .iter()
            .zip(&m)
            .map(|(&i, &drop)| if drop { &zero[..] } else { seq.poses.row(i) })
            .collect();
        let ctx: Vec<&[f64]> = c.iter().map(|&i| seq.mels.row(i)).collect();
        targets.push(seq.poses.row(t).to_vec());
        inputs.push(encoder_input(&hist, &ctx));
    }
    Chunk { targets, inputs }
}

/// Chunks at random positions; sequences are chosen in proportion to their length.
pub fn sample_batch<R: Rng>(
    seqs: &[AlignedSequence],
    train: &TrainConfig,
    flow: &FlowConfig,
    rng: &mut R,
) -> Vec<Chunk<f64>> {
    let total: usize = seqs.iter().map(AlignedSequence::len).sum();
    (0..train.batch_size)
        .map(|_| {
            let mut u = rng.random_range(0..total);
            let seq = seqs
                .iter()
                .find(|s| {
                    if u < s.len() {
                        true
                    } else {
                        u -= s.len();
                        false
                    }
                })
                .expect("u < total");
            let len = train.sequence_chunk_length.min(seq.len());
            let start = rng.random_range(0..=seq.len() - len);
            let rate = train.data_dropout;
            let mode = train.dropout_mode;
            chunk_from_sequence(seq, start, len, flow, || dropout_mask(flow.history, rate, mode, rng))
        })
        .collect()
}

/// Whole sequences split into consecutive chunks, without dropout.
pub fn evaluation_chunks(seqs: &[AlignedSequence], flow: &FlowConfig, chunk_length: usize) -> Vec<Chunk<f64>> {
    let mut out = Vec::new();
    for s in seqs {
        let mut start = 0;
        while start < s.len() {
            let len = chunk_length.min(s.len() - start);
            out.push(chunk_from_sequence(s, start, len, flow, || vec![false; flow.history]));
            start += len;
        }
    }
    out
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Updates `params` in place and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * clip;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub nll: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Position of the training random stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Decimal string: the word position does not fit a JSON number.
    pub word_pos: String,
}

/// Everything that changes while training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: FlowModel<f64>,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    /// First-batch nll after actnorm initialization.
    pub initial_nll: Option<f64>,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(model: FlowModel<f64>, seed: u64) -> Self {
        let n = model.param_count();
        Self {
            model,
            adam: Adam::new(n),
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            initial_nll: None,
            log: Vec::new(),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore_rng(seed: u64, state: &RngState) -> Result<ChaCha8Rng, TrainError> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| TrainError::Data(format!("bad rng word position {:?}", state.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    /// Data-dependent actnorm initialization on a batch drawn from a
    /// separate stream of the training seed, so the main stream is untouched.
    pub fn initialize(&mut self, data: &[AlignedSequence], cfg: &TrainConfig) -> Result<(), TrainError> {
        if self.model.actnorm_initialized() {
            return Ok(());
        }
        cfg.validate()?;
        if data.iter().all(AlignedSequence::is_empty) {
            return Err(TrainError::Data("no training frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let flow = self.model.config.clone();
        let batch = sample_batch(data, cfg, &flow, &mut rng);
        self.model.init_actnorm(&batch)?;
        Ok(())
    }

    /// Runs optimizer steps until `until` (capped at `cfg.steps`).
    /// `on_step` is called after every step with the updated state; it can
    /// write checkpoints.
    pub fn run<F>(&mut self, data: &[AlignedSequence], cfg: &TrainConfig, until: usize, mut on_step: F) -> Result<(), TrainError>
    where
        F: FnMut(&TrainState) -> Result<(), TrainError>,
    {
        cfg.validate()?;
        if data.iter().all(AlignedSequence::is_empty) {
            return Err(TrainError::Data("no training frames".into()));
        }
        let flow = self.model.config.clone();
        let until = until.min(cfg.steps);
        while self.step < until {
            self.initialize(data, cfg)?;
            let batch = sample_batch(data, cfg, &flow, &mut self.rng);
            let (nll, grad) = self.model.gradients(&batch)?;
            let initial = *self.initial_nll.get_or_insert(nll);
            if nll > cfg.divergence_factor * initial.abs() {
                return Err(TrainError::Diverged {
                    step: self.step,
                    nll,
                    initial,
                    factor: cfg.divergence_factor,
                });
            }
            let lr = cfg.learning_rate(self.step);
            let mut params = self.model.to_flat();
            let grad_norm = self.adam.step(&mut params, &grad.to_flat(), lr, cfg);
            self.model.load_flat(&params)?;
            self.model.enforce_constraints();
            if self.step % cfg.log_interval.max(1) == 0 || self.step + 1 == cfg.steps {
                self.log.push(LogRow {
                    step: self.step,
                    nll,
                    lr,
                    grad_norm,
                });
                log::info!("step {} nll {nll:.4} lr {lr:.3e} |g| {grad_norm:.3}", self.step);
            }
            self.step += 1;
            on_step(self)?;
        }
        Ok(())
    }
}
