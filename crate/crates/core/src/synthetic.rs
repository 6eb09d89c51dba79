//! Corpora drawn from a small stick-breaking topic model with known parameters,
//! for recovery tests.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::corpus::{BowDocument, Corpus, CorpusError, Split, Vocabulary};
use crate::seeding;
use crate::stochastic::{stick_break, StickWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub vocab: usize,
    pub docs: usize,
    /// Inclusive range of document lengths.
    pub doc_len: (u32, u32),
    /// Concentration of the Beta(1, α) stick fractions.
    pub alpha: f64,
    /// Disjoint high-logit words per topic.
    pub anchors: usize,
    pub anchor_logit: f64,
    /// Standard deviation of the logit noise on every word.
    pub logit_noise: f64,
    /// Combine topics as a product of experts rather than a mixture.
    pub product: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 3,
            vocab: 50,
            docs: 500,
            doc_len: (150, 250),
            alpha: 1.0,
            anchors: 12,
            anchor_logit: 3.0,
            logit_noise: 0.3,
            product: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// True topic logits, `topics × vocab`.
    pub logits: Vec<Vec<f64>>,
    /// Per-document stick fractions.
    pub nus: Vec<Vec<f64>>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Word distribution of a document with weights `pi` under `logits`.
pub fn word_distribution(pi: &StickWeights, logits: &[Vec<f64>], product: bool) -> Vec<f64> {
    let v = logits[0].len();
    let mut out = vec![0.0; v];
    for (w, row) in pi.as_slice().iter().zip(logits) {
        if product {
            out.iter_mut().zip(row).for_each(|(o, l)| *o += w * l);
        } else {
            out.iter_mut().zip(softmax(row)).for_each(|(o, t)| *o += w * t);
        }
    }
    if product {
        softmax(&out)
    } else {
        out
    }
}

/// Topic logits with disjoint anchor blocks; seeded from `spec.seed`.
pub fn anchor_logits(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, spec.logit_noise).expect("finite sd");
    (0..spec.topics)
        .map(|k| {
            (0..spec.vocab)
                .map(|w| {
                    let base = if w / spec.anchors == k { spec.anchor_logit } else { 0.0 };
                    base + noise.sample(rng)
                })
                .collect()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, CorpusError> {
    assert!(
        spec.topics * spec.anchors <= spec.vocab,
        "anchor blocks must fit the vocabulary"
    );
    let mut rng = seeding::stream(spec.seed, seeding::SYNTHETIC);
    let logits = anchor_logits(spec, &mut rng);
    let beta = Beta::new(1.0, spec.alpha).expect("positive alpha");
    let mut docs = Vec::with_capacity(spec.docs);
    let mut nus = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let nu: Vec<f64> = (0..spec.topics - 1).map(|_| beta.sample(&mut rng)).collect();
        let theta = word_distribution(&stick_break(&nu), &logits, spec.product);
        let words = WeightedIndex::new(&theta).expect("valid distribution");
        let n = rng.random_range(spec.doc_len.0..=spec.doc_len.1);
        let mut counts = vec![0u32; spec.vocab];
        for _ in 0..n {
            counts[words.sample(&mut rng)] += 1;
        }
        let entries = counts
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(w, &c)| (w, c))
            .collect();
        docs.push(BowDocument::from_counts(entries, None));
        nus.push(nu);
    }
    let corpus = Corpus::new(docs, Vocabulary::numbered(spec.vocab)?, Split::Train)?;
    Ok(SyntheticCorpus { corpus, logits, nus })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_sized() {
        let spec = SyntheticSpec {
            docs: 20,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.corpus.len(), 20);
        for d in &a.corpus.documents {
            assert!((150..=250).contains(&d.len()));
        }
        let c = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }
}
