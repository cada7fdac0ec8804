//! Causal-LM training: learning-rate schedules, Adam, batched steps over
//! trainable parameters, and perplexity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Chunk;
use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::tensor::{cross_entropy_next_token, ParamId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "lr", default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_schedule() -> Schedule {
    Schedule::Linear
}
fn default_batch() -> usize {
    4
}
fn default_max_seq() -> usize {
    1024
}

impl TrainConfig {
    pub fn new(total_steps: usize, seed: u64) -> Self {
        Self {
            base_lr: default_lr(),
            schedule: default_schedule(),
            batch_size: default_batch(),
            max_seq: default_max_seq(),
            total_steps,
            seed,
            grad_clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_seq < 2 {
            return Err(Error::config("max_seq must be at least 2"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate used for update `step` (0-based). No warmup.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Invalid(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    if cfg.total_steps == 0 {
        return Ok(if cfg.schedule == Schedule::Constant { cfg.base_lr } else { 0.0 });
    }
    let frac = step as f64 / cfg.total_steps as f64;
    Ok(match cfg.schedule {
        Schedule::Linear => cfg.base_lr * (1.0 - frac),
        Schedule::Cosine => cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        Schedule::Constant => cfg.base_lr,
    })
}

/// Adam without weight decay. Moments are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter from its stored grad.
    pub fn step(&mut self, model: &mut Model, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in model.store.trainable_ids() {
            let p = model.store.get_mut(id);
            let n = p.value.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = p.value.data().to_vec();
            for (i, (&g, x)) in p.grad.data().iter().zip(data.iter_mut()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.value = Tensor::new(p.value.shape(), data, p.value.dtype())?;
        }
        Ok(())
    }
}

fn global_grad_norm(model: &Model) -> f64 {
    model
        .store
        .trainable_ids()
        .into_iter()
        .map(|id| model.store.get(id).grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn clip_grads(model: &mut Model, max_norm: f64) {
    let norm = global_grad_norm(model);
    if norm > max_norm {
        let c = max_norm / norm;
        for id in model.store.trainable_ids() {
            let p = model.store.get_mut(id);
            p.grad = p.grad.scale(c);
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub tokens: usize,
}

/// Batch loss: token-mean next-token cross entropy over every position of
/// every sequence in the batch. Sequences shorter than two tokens add nothing.
pub fn batch_loss(model: &Model, tape: &mut Tape, batch: &[&[TokenId]], max_seq: usize) -> Result<(crate::tensor::Var, usize)> {
    for seq in batch {
        if seq.len() > max_seq {
            return Err(Error::ContextLength {
                needed: seq.len(),
                limit: max_seq,
            });
        }
    }
    let tokens: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if tokens == 0 {
        return Err(Error::NoUnmaskedPositions);
    }
    let mut total = None;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let l = model.sequence_loss(tape, seq, Some(tokens as f64))?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok((total.expect("at least one sequence"), tokens))
}

/// One forward/backward/update over the trainable parameters. Grads are
/// zeroed afterwards. `step` is only used to label a non-finite loss.
pub fn train_step(
    model: &mut Model,
    batch: &[&[TokenId]],
    opt: &mut Adam,
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let (loss_var, tokens) = batch_loss(model, &mut tape, batch, cfg.max_seq)?;
    let loss = tape.value(loss_var).item()?;
    if !loss.is_finite() {
        model.store.zero_grads();
        return Err(Error::NonFiniteLoss { step, loss });
    }
    tape.backward(loss_var, &mut model.store)?;
    if let Some(c) = cfg.grad_clip_norm {
        clip_grads(model, c);
    }
    let result = opt.step(model, lr);
    model.store.zero_grads();
    result?;
    Ok(StepOutcome { loss, tokens })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub tokens_seen: usize,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (i, (lr, loss)) in self.lrs.iter().zip(&self.losses).enumerate() {
            writeln!(s, "{i},{lr},{loss}").expect("write to string");
        }
        s
    }
}

/// Deterministic batch order: a fresh seeded permutation per pass over the
/// data, batches filled across pass boundaries.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains whatever parameters are currently trainable.
pub fn train_model(model: &mut Model, dataset: &[Chunk], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training dataset has no chunks".into()));
    }
    if cfg.max_seq > model.usable_context() {
        return Err(Error::ContextLength {
            needed: cfg.max_seq,
            limit: model.usable_context(),
        });
    }
    let start = Instant::now();
    let mut opt = Adam::new();
    let mut order = BatchOrder::new(dataset.len(), cfg.seed);
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.total_steps),
        lrs: Vec::with_capacity(cfg.total_steps),
        checkpoint: None,
        wall_clock_secs: 0.0,
        tokens_seen: 0,
    };
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let idx = order.next_batch(cfg.batch_size);
        let batch: Vec<&[TokenId]> = idx.iter().map(|&i| dataset[i].tokens.as_slice()).collect();
        let out = train_step(model, &batch, &mut opt, lr, cfg, step)?;
        report.losses.push(out.loss);
        report.lrs.push(lr);
        report.tokens_seen += out.tokens;
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains the attached adapter and, when `out` is given, writes an
/// adapter-only checkpoint there.
pub fn train_adapter(model: &mut Model, dataset: &[Chunk], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    if model.adapter().is_none() {
        return Err(Error::Adapter("train_adapter needs an attached adapter".into()));
    }
    let mut report = train_model(model, dataset, cfg)?;
    if let Some(path) = out {
        checkpoint::save(path, &model.adapter_tensors()?)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    Ok(report)
}

/// exp of the mean next-token cross entropy over all positions of all chunks.
pub fn perplexity(model: &Model, dataset: &[Chunk], max_seq: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("perplexity needs at least one chunk".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in dataset {
        if c.tokens.len() > max_seq {
            return Err(Error::ContextLength {
                needed: c.tokens.len(),
                limit: max_seq,
            });
        }
        if c.tokens.len() < 2 {
            continue;
        }
        let n = c.tokens.len() - 1;
        let logits = model.forward_logits(&c.tokens[..n], None)?;
        sum += cross_entropy_next_token(&logits, &c.tokens[1..])? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoUnmaskedPositions);
    }
    Ok((sum / count as f64).exp())
}
