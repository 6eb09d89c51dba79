//! Decode paths on plain vectors, mirroring the graph versions used in training.

use super::{ModelError, Result};
use crate::engine::Tensor;
use crate::stochastic::StickWeights;

/// Topic logits ϕ, one row per topic.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicBank {
    logits: Tensor,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl TopicBank {
    pub fn new(logits: Tensor) -> Self {
        let (r, c) = (logits.rows(), logits.cols());
        Self {
            logits: logits.reshaped(vec![r, c]).expect("same element count"),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::new(Tensor::from_rows(rows)?))
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn topics(&self) -> usize {
        self.logits.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.cols()
    }

    /// θ_k = softmax(ϕ_k).
    pub fn theta(&self, k: usize) -> Vec<f64> {
        softmax(self.logits.row(k))
    }

    pub fn thetas(&self) -> Vec<Vec<f64>> {
        (0..self.topics()).map(|k| self.theta(k)).collect()
    }

    fn check(&self, weights: usize) -> Result<()> {
        if weights > self.topics() {
            return Err(ModelError::TooManyWeights {
                weights,
                topics: self.topics(),
            });
        }
        Ok(())
    }
}

/// θ̄ = Σ_k π_k θ_k.
pub fn mixture_decode(pi: &StickWeights, bank: &TopicBank) -> Result<Vec<f64>> {
    bank.check(pi.len())?;
    let mut out = vec![0.0; bank.vocab_size()];
    for (k, &w) in pi.as_slice().iter().enumerate() {
        for (o, t) in out.iter_mut().zip(bank.theta(k)) {
            *o += w * t;
        }
    }
    Ok(out)
}

/// θ̂ = softmax(Σ_k π_k ϕ_k).
pub fn prod_decode(pi: &StickWeights, bank: &TopicBank) -> Result<Vec<f64>> {
    bank.check(pi.len())?;
    let mut logits = vec![0.0; bank.vocab_size()];
    for (k, &w) in pi.as_slice().iter().enumerate() {
        for (o, l) in logits.iter_mut().zip(bank.logits.row(k)) {
            *o += w * l;
        }
    }
    Ok(softmax(&logits))
}

/// θ̄ = Σ_k π_k Σ_i c̃_ki θ_i, with `c_relaxed` of shape `[K × T]`.
pub fn hier_decode(pi: &StickWeights, c_relaxed: &Tensor, bank: &TopicBank) -> Result<Vec<f64>> {
    let (k, t) = (c_relaxed.rows(), c_relaxed.cols());
    if k != pi.len() {
        return Err(ModelError::Shape(format!(
            "{} stick weights but {k} indicator rows",
            pi.len()
        )));
    }
    bank.check(t)?;
    let mut atom_weights = vec![0.0; t];
    for (j, &w) in pi.as_slice().iter().enumerate() {
        for (a, c) in atom_weights.iter_mut().zip(c_relaxed.row(j)) {
            *a += w * c;
        }
    }
    mixture_decode(&StickWeights::from_weights(atom_weights), bank)
}
