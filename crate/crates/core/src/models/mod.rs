//! The four variants: iTM-VAE (mixture decode), iTM-VAE-Prod, iTM-VAE-HP
//! (Gamma hyper-prior on α) and HiTM-VAE (corpus-level sticks).

mod decode;
mod elbo;
mod io;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::{hier_decode, mixture_decode, prod_decode, TopicBank};
pub use elbo::{ElboInput, ElboNodes, Noise};

use crate::engine::{BatchNormState, EngineError, Graph, ParamId, ParamStore, Tensor};
use crate::stochastic::{BetaPosterior, GammaParams, KlEstimator, KumaraswamyParams, StochasticError};

/// Lower bound added after the softplus on the Kumaraswamy heads.
pub const HEAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("vocabulary mismatch: model has V={expected}, input has V={got}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("{weights} weights for a bank of {topics} topics")]
    TooManyWeights { weights: usize, topics: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Mixture decode, θ̄ = Σ π_k θ_k.
    Itmvae,
    /// Product-of-experts decode, softmax(Σ π_k ϕ_k).
    Prod,
    /// Prod decode with a learned Gamma posterior over α.
    Hp,
    /// Document sticks pointing at T shared corpus atoms.
    Hier,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Itmvae => "itmvae",
            Variant::Prod => "prod",
            Variant::Hp => "hp",
            Variant::Hier => "hier",
        }
    }
}

fn default_alpha() -> f64 {
    20.0
}
fn default_gamma() -> f64 {
    20.0
}
fn default_s1() -> f64 {
    1.0
}
fn default_s2() -> f64 {
    0.05
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    /// Document-level truncation.
    #[serde(rename = "K")]
    pub k: usize,
    /// Corpus-level truncation, hier only.
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_s1")]
    pub s1: f64,
    #[serde(default = "default_s2")]
    pub s2: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub kl_estimator: KlEstimator,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize, k: usize) -> Self {
        Self {
            variant,
            vocab_size,
            k,
            t: None,
            alpha: default_alpha(),
            gamma: default_gamma(),
            s1: default_s1(),
            s2: default_s2(),
            hidden: default_hidden(),
            kl_estimator: KlEstimator::default(),
            batch_norm: true,
        }
    }

    /// K = 1 and T = 1 are accepted as degenerate cases.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        match (self.variant, self.t) {
            (Variant::Hier, None) => return bad("T required for hier".into()),
            (Variant::Hier, Some(0)) => return bad("T must be at least 1".into()),
            (Variant::Hier, Some(_)) => {}
            (v, Some(_)) => return bad(format!("T only applies to hier, not {}", v.name())),
            _ => {}
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("s1", self.s1),
            ("s2", self.s2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!(
                "hidden sizes must be nonempty and positive, got {:?}",
                self.hidden
            ));
        }
        if let KlEstimator::Series { terms: 0 } = self.kl_estimator {
            return bad("KL series needs at least one term".into());
        }
        Ok(())
    }

    /// Rows in the topic bank: K sticks, or T atoms for hier.
    pub fn topics(&self) -> usize {
        match self.variant {
            Variant::Hier => self.t.unwrap_or(1),
            _ => self.k,
        }
    }

    pub fn prior_gamma(&self) -> GammaParams {
        GammaParams {
            shape: self.s1,
            rate: self.s2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    hidden: Vec<(ParamId, ParamId)>,
    head_a: (ParamId, ParamId),
    head_b: (ParamId, ParamId),
    head_c: Option<(ParamId, ParamId)>,
    bank: ParamId,
    hyper: Option<(ParamId, ParamId)>,
}

/// Encoder output for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalOutput {
    pub kumaraswamy: KumaraswamyParams,
    /// `[K × T]`, hier only.
    pub indicator_logits: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
    /// Batch norm on the a and b heads, when enabled.
    bn: Vec<BatchNormState>,
    /// Corpus-level posterior, hier only.
    pub beta: Option<BetaPosterior>,
    /// Training-set size that amortizes corpus-level terms.
    corpus_size: usize,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

impl TopicModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let v = config.vocab_size;
        let sticks = config.k - 1;
        let mut width = v;
        let mut hidden = Vec::new();
        for (i, &h) in config.hidden.iter().enumerate() {
            let w = store.add(format!("enc.{i}.w"), glorot(rng, width, h));
            let b = store.add(format!("enc.{i}.b"), Tensor::zeros(&[h]));
            hidden.push((w, b));
            width = h;
        }
        let mut head = |store: &mut ParamStore, name: &str, out: usize| {
            let w = store.add(format!("{name}.w"), glorot(rng, width, out));
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[out]));
            (w, b)
        };
        let head_a = head(&mut store, "head_a", sticks);
        let head_b = head(&mut store, "head_b", sticks);
        let head_c = match config.variant {
            Variant::Hier => Some(head(&mut store, "head_c", config.k * config.topics())),
            _ => None,
        };
        let bank = store.add("bank.phi", glorot(rng, config.topics(), v));
        let hyper = match config.variant {
            Variant::Hp => Some((
                store.add("hp.gamma1", Tensor::scalar(config.s1)),
                store.add("hp.gamma2", Tensor::scalar(config.s2)),
            )),
            _ => None,
        };
        let bn = if config.batch_norm {
            vec![
                BatchNormState::new(&mut store, "bn_a", sticks),
                BatchNormState::new(&mut store, "bn_b", sticks),
            ]
        } else {
            Vec::new()
        };
        let beta = match config.variant {
            Variant::Hier => Some(BetaPosterior::prior(config.topics(), config.gamma)),
            _ => None,
        };
        Ok(Self {
            layout: Layout {
                hidden,
                head_a,
                head_b,
                head_c,
                bank,
                hyper,
            },
            config,
            store,
            bn,
            beta,
            corpus_size: 1,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn set_corpus_size(&mut self, d: usize) {
        self.corpus_size = d.max(1);
    }

    pub fn bank_id(&self) -> ParamId {
        self.layout.bank
    }

    pub fn bank(&self) -> TopicBank {
        TopicBank::new(self.store.value(self.layout.bank).clone())
    }

    /// (γ1, γ2) parameter ids, hp only. These are trained by plain SGD.
    pub fn hyper_ids(&self) -> Option<(ParamId, ParamId)> {
        self.layout.hyper
    }

    pub fn gamma_posterior(&self) -> Option<GammaParams> {
        self.layout.hyper.map(|(g1, g2)| GammaParams {
            shape: self.store.value(g1).item(),
            rate: self.store.value(g2).item(),
        })
    }

    pub fn set_gamma_posterior(&mut self, g: GammaParams) -> Result<()> {
        let (g1, g2) = self
            .layout
            .hyper
            .ok_or_else(|| ModelError::Config("no hyper-prior in this variant".into()))?;
        self.store.set_value(g1, Tensor::scalar(g.shape))?;
        self.store.set_value(g2, Tensor::scalar(g.rate))?;
        Ok(())
    }

    pub fn batch_norms(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    fn check_vocab(&self, got: usize) -> Result<()> {
        if got != self.config.vocab_size {
            return Err(ModelError::VocabMismatch {
                expected: self.config.vocab_size,
                got,
            });
        }
        Ok(())
    }

    /// Stacks count vectors into a `[B × V]` tensor.
    pub fn batch_counts(&self, docs: &[Vec<f64>]) -> Result<Tensor> {
        let v = self.config.vocab_size;
        let mut data = Vec::with_capacity(docs.len() * v);
        for d in docs {
            self.check_vocab(d.len())?;
            data.extend_from_slice(d);
        }
        Ok(Tensor::matrix(docs.len(), v, data)?)
    }

    /// Encoder pass in evaluation mode for a batch of count vectors.
    pub fn encode_batch(&self, counts: &Tensor) -> Result<Vec<VariationalOutput>> {
        self.check_vocab(counts.cols())?;
        let mut g = Graph::new();
        let enc = self.encoder(&mut g, &self.store, counts, false)?;
        let (kt, sticks) = (self.config.k * self.config.topics(), self.config.k - 1);
        let mut out = Vec::with_capacity(counts.rows());
        for r in 0..counts.rows() {
            let a = g.value(enc.a).data()[r * sticks..(r + 1) * sticks].to_vec();
            let b = g.value(enc.b).data()[r * sticks..(r + 1) * sticks].to_vec();
            let indicator_logits = match enc.c {
                Some(c) => Some(Tensor::matrix(
                    self.config.k,
                    self.config.topics(),
                    g.value(c).data()[r * kt..(r + 1) * kt].to_vec(),
                )?),
                None => None,
            };
            out.push(VariationalOutput {
                kumaraswamy: KumaraswamyParams::new(a, b)?,
                indicator_logits,
            });
        }
        Ok(out)
    }

    pub fn encode(&self, doc: &[f64]) -> Result<VariationalOutput> {
        let counts = self.batch_counts(&[doc.to_vec()])?;
        Ok(self.encode_batch(&counts)?.remove(0))
    }

    /// Posterior-mean topic weights per document: Kumaraswamy means pushed
    /// through the sticks, then (hier) spread over atoms by φ.
    pub fn topic_weights(&self, counts: &Tensor) -> Result<Vec<Vec<f64>>> {
        let outs = self.encode_batch(counts)?;
        let t = self.config.topics();
        Ok(outs
            .into_iter()
            .map(|o| {
                let pi = o.kumaraswamy.mean_weights().into_vec();
                match o.indicator_logits {
                    None => pi,
                    Some(logits) => {
                        let mut w = vec![0.0; t];
                        for (k, &p) in pi.iter().enumerate() {
                            let row = logits.row(k);
                            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
                            for (wi, l) in w.iter_mut().zip(row) {
                                *wi += p * (l - max).exp() / z;
                            }
                        }
                        w
                    }
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    pub(crate) fn toy(variant: Variant) -> TopicModel {
        let mut c = ModelConfig::new(variant, 7, 4);
        c.hidden = vec![8, 8];
        if variant == Variant::Hier {
            c.t = Some(3);
        }
        TopicModel::new(c, &mut seeding::stream(11, seeding::INIT)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(Variant::Hier, 10, 5);
        assert_eq!(
            c.validate().unwrap_err().to_string(),
            "invalid config: T required for hier"
        );
        c.t = Some(4);
        c.validate().unwrap();
        c.variant = Variant::Prod;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Prod, 10, 5);
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let json = r#"{"variant":"prod","vocab_size":3,"K":2,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
        let json = r#"{"variant":"hp","vocab_size":3,"K":2}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.s1, c.s2, c.alpha), (1.0, 0.05, 20.0));
        assert!((c.prior_gamma().mean() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_heads_are_floored_and_deterministic() {
        for variant in [Variant::Itmvae, Variant::Prod, Variant::Hp, Variant::Hier] {
            let m = toy(variant);
            let doc = vec![0.0, 3.0, 1.0, 0.0, 0.0, 9.0, 2.0];
            let x = m.encode(&doc).unwrap();
            let y = m.encode(&doc).unwrap();
            assert_eq!(x, y);
            let k = &x.kumaraswamy;
            assert_eq!(k.len(), 3);
            assert!(k.a().iter().chain(k.b()).all(|&v| v >= HEAD_FLOOR && v.is_finite()));
            assert_eq!(x.indicator_logits.is_some(), variant == Variant::Hier);
            let w = &m.topic_weights(&m.batch_counts(&[doc.to_vec()]).unwrap()).unwrap()[0];
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let m = toy(Variant::Prod);
        let err = m.encode(&[1.0, 2.0]).unwrap_err();
        assert_eq!(err.to_string(), "vocabulary mismatch: model has V=7, input has V=2");
    }

    #[test]
    fn hp_starts_at_the_prior() {
        let m = toy(Variant::Hp);
        let g = m.gamma_posterior().unwrap();
        assert_eq!((g.shape, g.rate), (1.0, 0.05));
    }
}
