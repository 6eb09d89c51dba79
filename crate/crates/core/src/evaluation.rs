//! Perplexity, NPMI coherence, effective topics, coverage and sparsity curves.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::models::{ModelError, Noise, TopicBank, TopicModel};
use crate::seeding;

/// Smoothing added to joint probabilities inside NPMI.
pub const NPMI_EPS: f64 = 1e-12;
/// Floor applied before taking logs of averaged weights.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Share of training documents a topic must win to count as effective.
pub const EFFECTIVE_TAU: f64 = 0.005;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no nonempty documents to score")]
    NoScorableDocuments,
    #[error("empty summary")]
    EmptySummary,
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("top-n must be within 1..={vocab}, got {n}")]
    BadTopN { n: usize, vocab: usize },
    #[error("at least one sample required")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub documents: usize,
    pub skipped_empty: usize,
    pub samples: usize,
}

/// exp(−mean over documents of ELBO/N) from (ELBO, N) pairs; N = 0 is skipped.
pub fn perplexity_from_elbos(scores: &[(f64, u64)]) -> Result<PerplexityReport> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &(elbo, len) in scores {
        if len > 0 {
            total += elbo / len as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoScorableDocuments);
    }
    Ok(PerplexityReport {
        perplexity: (-total / n as f64).exp(),
        documents: n,
        skipped_empty: scores.len() - n,
        samples: 1,
    })
}

/// ELBO perplexity with `samples` noise draws averaged per document.
pub fn perplexity(model: &TopicModel, corpus: &Corpus, samples: usize, seed: u64) -> Result<PerplexityReport> {
    if samples == 0 {
        return Err(EvalError::NoSamples);
    }
    let mut rng = seeding::stream(seed, seeding::EVAL);
    let temperature = 1.0;
    let scorable: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus.documents[i].is_empty()).collect();
    let mut scores = Vec::with_capacity(corpus.len());
    for chunk in scorable.chunks(EVAL_BATCH) {
        let counts = model.batch_counts(
            &chunk
                .iter()
                .map(|&i| corpus.documents[i].count_vector(corpus.vocab_size()))
                .collect::<Vec<_>>(),
        )?;
        let mut acc = vec![0.0; chunk.len()];
        for _ in 0..samples {
            let noise = Noise::sample(model, chunk.len(), &mut rng);
            for (a, e) in acc.iter_mut().zip(model.elbo_batch(&counts, &noise, temperature)?) {
                *a += e / samples as f64;
            }
        }
        scores.extend(chunk.iter().zip(acc).map(|(&i, e)| (e, corpus.documents[i].len())));
    }
    if scorable.is_empty() {
        return Err(EvalError::NoScorableDocuments);
    }
    let mut report = perplexity_from_elbos(&scores)?;
    report.skipped_empty = corpus.len() - scorable.len();
    report.samples = samples;
    Ok(report)
}

/// The n most probable words of each topic; ties go to the lower word id.
pub fn top_words(bank: &TopicBank, n: usize) -> Result<Vec<Vec<usize>>> {
    let v = bank.vocab_size();
    if n == 0 || n > v {
        return Err(EvalError::BadTopN { n, vocab: v });
    }
    Ok((0..bank.topics())
        .map(|k| {
            let row = bank.logits().row(k);
            let mut ids: Vec<usize> = (0..v).collect();
            // Softmax is monotone, so ordering logits orders probabilities.
            ids.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            ids.truncate(n);
            ids
        })
        .collect())
}

/// Document-level occurrence sets of a reference corpus.
#[derive(Debug, Clone)]
pub struct Cooccurrence {
    docs: usize,
    /// Sorted document ids per word.
    postings: Vec<Vec<u32>>,
}

impl Cooccurrence {
    pub fn new(reference: &Corpus) -> Result<Self> {
        if reference.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let mut postings = vec![Vec::new(); reference.vocab_size()];
        for (d, doc) in reference.documents.iter().enumerate() {
            for &(w, _) in doc.entries() {
                postings[w].push(d as u32);
            }
        }
        Ok(Self {
            docs: reference.len(),
            postings,
        })
    }

    fn df(&self, w: usize) -> usize {
        self.postings.get(w).map_or(0, Vec::len)
    }

    fn joint(&self, i: usize, j: usize) -> usize {
        let (a, b) = (&self.postings[i], &self.postings[j]);
        let (mut x, mut y, mut n) = (0, 0, 0);
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    x += 1;
                    y += 1;
                }
            }
        }
        n
    }

    /// NPMI of a word pair, or `None` when either word never occurs.
    pub fn npmi(&self, i: usize, j: usize) -> Option<f64> {
        let (di, dj) = (self.df(i), self.df(j));
        if di == 0 || dj == 0 {
            return None;
        }
        let joint = self.joint(i, j);
        if joint == self.docs {
            return Some(1.0);
        }
        let d = self.docs as f64;
        let (pi, pj) = (di as f64 / d, dj as f64 / d);
        let pij = joint as f64 / d + NPMI_EPS;
        Some(((pij / (pi * pj)).ln() / -pij.ln()).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceScores {
    /// Mean pairwise NPMI per topic; `None` if every pair was skipped.
    pub per_topic: Vec<Option<f64>>,
    pub mean: f64,
    pub skipped_pairs: usize,
}

/// Pairwise NPMI over each topic's first `n` words.
pub fn npmi_coherence(topics: &[Vec<usize>], reference: &Cooccurrence, n: usize) -> CoherenceScores {
    let mut skipped = 0;
    let per_topic: Vec<Option<f64>> = topics
        .iter()
        .map(|words| {
            let words = &words[..n.min(words.len())];
            let (mut sum, mut count) = (0.0, 0usize);
            for (a, &i) in words.iter().enumerate() {
                for &j in &words[a + 1..] {
                    match reference.npmi(i, j) {
                        Some(v) => {
                            sum += v;
                            count += 1;
                        }
                        None => skipped += 1,
                    }
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    CoherenceScores {
        mean: mean_some(&per_topic),
        per_topic,
        skipped_pairs: skipped,
    }
}

fn mean_some(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Posterior-mean topic weights per document and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub weights: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

impl PosteriorSummary {
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Self {
        let argmax = weights
            .iter()
            .map(|w| {
                let mut best = 0;
                for (k, &v) in w.iter().enumerate() {
                    if v > w[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Self { weights, argmax }
    }

    pub fn topics(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn argmax_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.topics()];
        for &k in &self.argmax {
            counts[k] += 1;
        }
        counts
    }
}

pub fn posterior_summary(model: &TopicModel, corpus: &Corpus) -> Result<PosteriorSummary> {
    let mut weights = Vec::with_capacity(corpus.len());
    for chunk in corpus.documents.chunks(EVAL_BATCH) {
        let counts = model.batch_counts(
            &chunk
                .iter()
                .map(|d| d.count_vector(corpus.vocab_size()))
                .collect::<Vec<_>>(),
        )?;
        weights.extend(model.topic_weights(&counts)?);
    }
    Ok(PosteriorSummary::from_weights(weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTopics {
    pub count: usize,
    pub ids: Vec<usize>,
}

/// Topics that are the argmax of strictly more than τ·D documents.
pub fn effective_topics(summary: &PosteriorSummary, tau: f64) -> EffectiveTopics {
    let threshold = tau * summary.argmax.len() as f64;
    let ids: Vec<usize> = summary
        .argmax_counts()
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c as f64 > threshold)
        .map(|(k, _)| k)
        .collect();
    EffectiveTopics { count: ids.len(), ids }
}

fn average_weights(summary: &PosteriorSummary) -> Result<Vec<f64>> {
    if summary.weights.is_empty() {
        return Err(EvalError::EmptySummary);
    }
    let mut avg = vec![0.0; summary.topics()];
    for w in &summary.weights {
        avg.iter_mut().zip(w).for_each(|(a, v)| *a += v);
    }
    let d = summary.weights.len() as f64;
    avg.iter_mut().for_each(|a| *a /= d);
    Ok(avg)
}

/// Cumulative sum of corpus-average topic weights sorted descending.
pub fn coverage_curve(summary: &PosteriorSummary) -> Result<Vec<f64>> {
    let mut avg = average_weights(summary)?;
    avg.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    Ok(avg
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect())
}

/// log of the per-rank average of each document's descending-sorted weights.
pub fn sparsity_curve(summary: &PosteriorSummary) -> Result<Vec<f64>> {
    let sorted: Vec<Vec<f64>> = summary
        .weights
        .iter()
        .map(|w| {
            let mut s = w.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        })
        .collect();
    let avg = average_weights(&PosteriorSummary {
        weights: sorted,
        argmax: Vec::new(),
    })?;
    Ok(avg.into_iter().map(|w| w.max(WEIGHT_FLOOR).ln()).collect())
}

/// Number of leading topics needed to reach `level` on a coverage curve.
pub fn topics_to_cover(curve: &[f64], level: f64) -> usize {
    curve
        .iter()
        .position(|&c| c >= level - 1e-12)
        .map_or(curve.len(), |i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub id: usize,
    pub top5: Vec<String>,
    pub top10: Vec<String>,
    pub npmi5: Option<f64>,
    pub npmi10: Option<f64>,
    pub argmax_count: usize,
    pub effective: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub perplexity: f64,
    /// Mean over all topics of (npmi5 + npmi10)/2.
    pub coherence_mean: f64,
    /// The same mean restricted to effective topics.
    pub coherence_effective: f64,
    pub per_topic: Vec<TopicEntry>,
    pub effective_topics: usize,
    pub coverage: Vec<f64>,
    pub sparsity_log: Vec<f64>,
    pub documents: usize,
    pub skipped_empty: usize,
    pub skipped_pairs: usize,
    /// Number of runs averaged into this report.
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 1,
            seed: 0,
            tau: EFFECTIVE_TAU,
        }
    }
}

/// Full report: perplexity on `eval`, everything else from `train`, which
/// also serves as the NPMI reference and the "training set" of the posterior
/// statistics.
pub fn evaluate(model: &TopicModel, eval: &Corpus, train: &Corpus, opts: EvalOptions) -> Result<Report> {
    let ppl = perplexity(model, eval, opts.samples, opts.seed)?;
    let summary = posterior_summary(model, train)?;
    let effective = effective_topics(&summary, opts.tau);
    let bank = model.bank();
    let n10 = 10.min(bank.vocab_size());
    let n5 = 5.min(n10);
    let top = top_words(&bank, n10)?;
    let reference = Cooccurrence::new(train)?;
    let c5 = npmi_coherence(&top, &reference, n5);
    let c10 = npmi_coherence(&top, &reference, n10);
    let counts = summary.argmax_counts();
    let vocab = &train.vocabulary;
    let per_topic: Vec<TopicEntry> = top
        .iter()
        .enumerate()
        .map(|(k, words)| TopicEntry {
            id: k,
            top5: words[..n5].iter().map(|&w| vocab.token(w).to_string()).collect(),
            top10: words.iter().map(|&w| vocab.token(w).to_string()).collect(),
            npmi5: c5.per_topic[k],
            npmi10: c10.per_topic[k],
            argmax_count: counts[k],
            effective: effective.ids.contains(&k),
        })
        .collect();
    let combined = |entries: &mut dyn Iterator<Item = &TopicEntry>| {
        let scores: Vec<Option<f64>> = entries
            .map(|e| match (e.npmi5, e.npmi10) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                (a, b) => a.or(b),
            })
            .collect();
        mean_some(&scores)
    };
    Ok(Report {
        perplexity: ppl.perplexity,
        coherence_mean: combined(&mut per_topic.iter()),
        coherence_effective: combined(&mut per_topic.iter().filter(|e| e.effective)),
        effective_topics: effective.count,
        coverage: coverage_curve(&summary)?,
        sparsity_log: sparsity_curve(&summary)?,
        per_topic,
        documents: ppl.documents,
        skipped_empty: ppl.skipped_empty,
        skipped_pairs: c5.skipped_pairs + c10.skipped_pairs,
        runs: 1,
        config_hash: None,
    })
}

/// Averages scalar metrics and curves across runs; topic tables come from the first run.
pub fn average_reports(reports: &[Report]) -> Option<Report> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&Report) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let curve = |f: &dyn Fn(&Report) -> &Vec<f64>| {
        let len = reports.iter().map(|r| f(r).len()).min().unwrap_or(0);
        (0..len)
            .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n)
            .collect::<Vec<f64>>()
    };
    Some(Report {
        perplexity: mean(&|r| r.perplexity),
        coherence_mean: mean(&|r| r.coherence_mean),
        coherence_effective: mean(&|r| r.coherence_effective),
        effective_topics: mean(&|r| r.effective_topics as f64).round() as usize,
        coverage: curve(&|r| &r.coverage),
        sparsity_log: curve(&|r| &r.sparsity_log),
        runs: reports.iter().map(|r| r.runs).sum(),
        ..first.clone()
    })
}

/// `index,value` CSV.
pub fn write_curve_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    std::fs::write(path, out)?;
    Ok(())
}
