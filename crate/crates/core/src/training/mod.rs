//! Supervised pretrain + fine-tune, episodic meta-training, the task sampler
//! and the evaluators.

mod episode;
mod eval;
mod meta;
mod supervised;

pub use episode::{sample_task, EpisodeShape, EpisodeSpec};
pub use eval::{evaluate_episodes, mean_ci95, EpisodeClassifier, EpisodeEval};
pub use meta::{episode_forward, train_meta, EpisodeOutput, MetaClassifier};
pub use supervised::{
    evaluate_supervised, finetune_supervised, pretrain_supervised, seed_memory, SupervisedEval,
};

use std::fmt;

use crate::error::{Error, Result};
use crate::memory::MemoryMode;
use crate::ndgrad::kernels;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,

    // supervised
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,

    // meta
    pub iterations: usize,
    pub meta_lr: f64,
    pub lr_halve_every: u64,
    pub episode: EpisodeShape,
    pub memory_mode: MemoryMode,

    // memory
    pub mem_size: usize,
    pub refresh: usize,
    pub gamma: f64,
    pub mu: f64,
    pub eta: f64,

    /// Log every n iterations (meta) or batches (supervised); 0 logs only epoch ends.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            pretrain_epochs: 30,
            finetune_epochs: 5,
            batch_size: 128,
            lr: 0.1,
            finetune_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            meta_lr: 1e-3,
            lr_halve_every: 10_000,
            episode: EpisodeShape {
                way: 5,
                shot: 5,
                query: 5,
            },
            memory_mode: MemoryMode::Mem1,
            mem_size: 12,
            refresh: 3,
            gamma: 0.95,
            mu: 1.05,
            eta: 0.95,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must be in (0, 1)", self.gamma));
        }
        if !(self.mu > 1.0 && self.mu < 2.0) {
            return bad(format!("mu {} must be in (1, 2)", self.mu));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta {} must be in (0, 1)", self.eta));
        }
        if self.refresh == 0 || self.refresh > self.mem_size {
            return bad(format!("refresh r={} must be in 1..=m={}", self.refresh, self.mem_size));
        }
        if self.episode.way == 0 || self.episode.shot == 0 || self.episode.query == 0 {
            return bad("episode way, shot and query must all be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr), ("meta_lr", self.meta_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be a non-negative number"));
            }
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be at least 1".into());
        }
        Ok(())
    }
}

/// One run-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iter: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} loss={:.6} acc={:.4} lr={:.6e}", self.iter, self.loss, self.acc, self.lr)
    }
}

/// Receives log lines as training proceeds.
pub type Logger<'a> = &'a mut dyn FnMut(&LogLine);

/// Rows whose probability argmax equals the target.
pub(crate) fn count_correct(probs: &[Vec<f64>], targets: &[usize]) -> usize {
    probs
        .iter()
        .zip(targets)
        .filter(|(p, &t)| kernels::argmax(p) == t)
        .count()
}
