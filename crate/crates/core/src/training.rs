//! Minibatch SGVB: Adam for networks and topics, plain SGD for the Gamma
//! posterior over α, periodic mean-field updates of the corpus sticks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::engine::{Graph, ParamId, ParamStore, Tensor};
use crate::evaluation::{self, EvalError};
use crate::models::{ElboInput, ModelError, Noise, TopicModel, Variant};
use crate::seeding;
use crate::stochastic::{BetaPosterior, GammaParams, StochasticError};

/// Floor on (γ1, γ2) after each SGD step.
pub const HYPER_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("non-finite ELBO at epoch {epoch}, batch {batch}; last good checkpoint kept")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam step descending the accumulated gradients of
    /// every parameter not in `skip`. Returns false, leaving everything
    /// untouched, if any gradient is non-finite.
    pub fn adam_step(&mut self, store: &mut ParamStore, skip: &[ParamId]) -> bool {
        if !store.grads_finite() {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().filter(|id| !skip.contains(id)).collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        true
    }
}

/// Gradient ascent on the ELBO for (γ1, γ2), floored at [`HYPER_FLOOR`].
pub fn hyperprior_step(g: GammaParams, elbo_grad: (f64, f64), lr: f64) -> GammaParams {
    GammaParams {
        shape: (g.shape + lr * elbo_grad.0).max(HYPER_FLOOR),
        rate: (g.rate + lr * elbo_grad.1).max(HYPER_FLOOR),
    }
}

/// u_i = 1 + S_i, v_i = γ + Σ_{l>i} S_l for i < T, where S_i = Σ_j Σ_k φ^{(j)}_{ki}
/// sums indicator probabilities over a full pass. The update replaces `bp`.
pub fn mean_field_update(
    bp: &BetaPosterior,
    phi_sums: &[f64],
    gamma: f64,
) -> std::result::Result<BetaPosterior, StochasticError> {
    let t = phi_sums.len();
    if t != bp.atoms() {
        return Err(StochasticError::LengthMismatch(bp.atoms(), t));
    }
    let n = t - 1;
    let mut u = Vec::with_capacity(n);
    let mut v = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        tail += phi_sums[i + 1];
        v[i] = gamma + tail;
    }
    for &s in phi_sums.iter().take(n) {
        u.push(1.0 + s);
    }
    BetaPosterior::new(u, v)
}

fn d_epochs() -> usize {
    200
}
fn d_batch() -> usize {
    64
}
fn d_period() -> usize {
    20
}
fn d_temp() -> f64 {
    1.0
}
fn d_patience() -> Option<usize> {
    Some(10)
}
fn d_lr() -> f64 {
    0.01
}
fn d_ckpt() -> usize {
    10
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between corpus-level mean-field updates (hier).
    #[serde(default = "d_period")]
    pub corpus_update_period: usize,
    #[serde(default = "d_temp")]
    pub temperature: f64,
    /// When set, the temperature decays linearly to this value by the last epoch.
    #[serde(default)]
    pub temperature_final: Option<f64>,
    /// Linear KL warm-up length in epochs; 0 disables annealing.
    #[serde(default)]
    pub kl_warmup_epochs: usize,
    /// Early stopping on validation perplexity; `None` runs every epoch.
    #[serde(default = "d_patience")]
    pub patience: Option<usize>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lr")]
    pub hyper_lr: f64,
    /// Write `<epoch>.ckpt` every this many epochs; 0 writes only `best.ckpt`.
    #[serde(default = "d_ckpt")]
    pub checkpoint_every: usize,
    /// Noise draws per document for validation perplexity.
    #[serde(default = "d_one")]
    pub valid_samples: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Schedule(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.corpus_update_period == 0 {
            return bad("corpus_update_period must be at least 1");
        }
        let temps = [Some(self.temperature), self.temperature_final];
        if temps.iter().flatten().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("temperatures must be positive");
        }
        if !(self.lr > 0.0 && self.hyper_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.valid_samples == 0 {
            return bad("valid_samples must be positive");
        }
        Ok(())
    }

    /// Temperature used during `epoch` (1-based).
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.temperature_final {
            None => self.temperature,
            Some(end) => {
                let span = self.epochs.saturating_sub(1).max(1) as f64;
                let frac = ((epoch - 1) as f64 / span).min(1.0);
                self.temperature + (end - self.temperature) * frac
            }
        }
    }

    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-document training ELBO.
    pub elbo: f64,
    pub valid_ppl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub e_alpha: Option<f64>,
    pub lr: f64,
    pub temp: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// The model at the best epoch.
    pub model: TopicModel,
    /// The model after the last epoch run.
    pub last: TopicModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    pub valid: Option<&'a Corpus>,
    /// Run directory for the log and checkpoints; nothing is written when unset.
    pub out_dir: Option<&'a Path>,
    /// Extra checkpoint metadata, e.g. the run config and its hash.
    pub meta: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // A lone trailing document would give batch norm a zero-variance batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

fn checkpoint(model: &TopicModel, path: &Path, meta: &serde_json::Value, epoch: usize) -> Result<()> {
    let mut m = match meta {
        serde_json::Value::Object(m) => m.clone(),
        _ => serde_json::Map::new(),
    };
    m.insert("epoch".into(), epoch.into());
    model.save(path, serde_json::Value::Object(m))?;
    Ok(())
}

/// Trains `model` on `train`. The model's corpus size is set to the training
/// set size so that corpus-level terms are amortized per document.
pub fn fit(mut model: TopicModel, train: &Corpus, schedule: &TrainSchedule, opts: FitOptions) -> Result<FitResult> {
    schedule.validate()?;
    train.ensure_trainable()?;
    let v = train.vocab_size();
    if v != model.config().vocab_size {
        return Err(ModelError::VocabMismatch {
            expected: model.config().vocab_size,
            got: v,
        }
        .into());
    }
    model.set_corpus_size(train.len());
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };

    let hyper = model.hyper_ids();
    let skip: Vec<ParamId> = hyper.map(|(a, b)| vec![a, b]).unwrap_or_default();
    let mut adam = OptimizerState::new(model.store(), schedule.lr);
    let mut shuffle_rng = seeding::stream(schedule.seed, seeding::SHUFFLE);
    let mut noise_rng = seeding::stream(schedule.seed, seeding::NOISE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let topics = model.config().topics();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, TopicModel)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut skipped_steps = 0;

    for epoch in 1..=schedule.epochs {
        let temp = schedule.temperature_at(epoch);
        let kl_weight = schedule.kl_weight_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut elbo_sum = 0.0;
        let mut phi_sums = vec![0.0; topics];

        for (b, rows) in batches(&order, schedule.batch_size).into_iter().enumerate() {
            let counts = Tensor::matrix(rows.len(), v, train.count_matrix(rows)).expect("sized");
            let noise = Noise::sample(&model, rows.len(), &mut noise_rng);
            let mut g = Graph::new();
            let input = ElboInput {
                counts: &counts,
                noise: &noise,
                temperature: temp,
                training: true,
                kl_weight,
            };
            let nodes = match model.elbo_graph(&mut g, model.store(), &input) {
                Ok(n) => n,
                Err(ModelError::Engine(crate::engine::EngineError::NonFinite { .. })) => {
                    return Err(TrainError::NonFinite { epoch, batch: b });
                }
                Err(e) => return Err(e.into()),
            };
            elbo_sum += g.value(nodes.per_doc).sum();
            if let Some(phi) = nodes.indicator_probs {
                for row in g.value(phi).data().chunks(topics) {
                    phi_sums.iter_mut().zip(row).for_each(|(s, p)| *s += p);
                }
            }
            let grads = g.backward(nodes.loss).map_err(ModelError::from)?;
            model.store_mut().zero_grads();
            grads.accumulate_into(model.store_mut());
            if !adam.adam_step(model.store_mut(), &skip) {
                skipped_steps += 1;
                log::warn!("epoch {epoch} batch {b}: non-finite gradient, step skipped");
                continue;
            }
            if let Some((g1, g2)) = hyper {
                let s = model.store();
                // The loss is the negative ELBO.
                let grad = (-s.get(g1).grad.item(), -s.get(g2).grad.item());
                let next = hyperprior_step(model.gamma_posterior().expect("hp"), grad, schedule.hyper_lr);
                model.set_gamma_posterior(next)?;
            }
            for (bn, stats) in model.batch_norms_mut().iter_mut().zip(&nodes.bn_stats) {
                bn.update(stats);
            }
        }

        // Each document's ELBO already carries its share of the corpus terms.
        let elbo = elbo_sum / train.len() as f64;
        if model.config().variant == Variant::Hier && epoch % schedule.corpus_update_period == 0 {
            let bp = model.beta.as_ref().expect("hier keeps a corpus posterior");
            model.beta = Some(mean_field_update(bp, &phi_sums, model.config().gamma)?);
        }
        if !elbo.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        let valid_ppl = match opts.valid {
            Some(valid) => {
                Some(evaluation::perplexity(&model, valid, schedule.valid_samples, schedule.seed)?.perplexity)
            }
            None => None,
        };
        let entry = EpochLog {
            epoch,
            elbo,
            valid_ppl,
            e_alpha: model.gamma_posterior().map(|g| g.mean()),
            lr: schedule.lr,
            temp,
        };
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&entry).expect("log serializes");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        log.push(entry);

        // Lower is better: validation perplexity, else negative training ELBO.
        let score = valid_ppl.unwrap_or(-elbo);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score < *s);
        if improved {
            let mut snapshot = model.clone();
            snapshot.store_mut().zero_grads();
            best = Some((score, epoch, snapshot));
            since_best = 0;
            if let Some(dir) = opts.out_dir {
                checkpoint(&model, &dir.join("best.ckpt"), &opts.meta, epoch)?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = opts.out_dir {
            if schedule.checkpoint_every > 0 && epoch % schedule.checkpoint_every == 0 {
                checkpoint(&model, &dir.join(format!("{epoch}.ckpt")), &opts.meta, epoch)?;
            }
        }
        if let (Some(p), Some(_)) = (schedule.patience, opts.valid) {
            if since_best >= p {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    model.store_mut().zero_grads();
    Ok(FitResult {
        model: best_model,
        last: model,
        log,
        best_epoch,
        stopped_early,
        skipped_steps,
    })
}
