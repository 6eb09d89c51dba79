//! Batched ELBO graphs. Each row of the batch is one document; the per-document
//! ELBO comes out as a `[B × 1]` node.

use rand::Rng;

use super::{ModelError, Result, TopicModel, Variant, HEAD_FLOOR};
use crate::engine::{BatchStats, Graph, NodeId, ParamStore, Tensor};
use crate::special::{digamma, ln_gamma, trigamma};
use crate::stochastic::{
    clamp_unit, corpus_stick_term, expected_log_stick_weights, gumbel_noise, kl_kumaraswamy_beta_grad, BetaPosterior,
    GammaParams, KlEstimator, UNIT_EPS,
};

/// Base noise for one batch: uniforms for the Kumaraswamy draws, and Gumbels
/// for the relaxed indicators (hier).
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `[B × (K−1)]`.
    pub uniforms: Tensor,
    /// `[(B·K) × T]`.
    pub gumbels: Option<Tensor>,
}

impl Noise {
    pub fn sample(model: &TopicModel, batch: usize, rng: &mut impl Rng) -> Self {
        let c = model.config();
        let sticks = c.k - 1;
        let uniforms = (0..batch * sticks).map(|_| rng.random::<f64>()).collect();
        let gumbels = (c.variant == Variant::Hier).then(|| {
            let n = batch * c.k * c.topics();
            let g = (0..n).map(|_| gumbel_noise(rng.random::<f64>())).collect();
            Tensor::matrix(batch * c.k, c.topics(), g).expect("sized")
        });
        Self {
            uniforms: Tensor::matrix(batch, sticks, uniforms).expect("sized"),
            gumbels,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ElboInput<'a> {
    /// `[B × V]` word counts.
    pub counts: &'a Tensor,
    pub noise: &'a Noise,
    /// Gumbel-Softmax temperature (hier).
    pub temperature: f64,
    /// Batch statistics in the batch norms when set, running statistics otherwise.
    pub training: bool,
    /// Weight on every term except reconstruction in the loss; 1 outside KL warm-up.
    pub kl_weight: f64,
}

#[derive(Debug)]
pub struct ElboNodes {
    /// `[B × 1]`.
    pub per_doc: NodeId,
    /// `[B × 1]` reconstruction term Σ_n log θ̄(w_n).
    pub recon: NodeId,
    /// Negative batch-mean ELBO, the minimized objective.
    pub loss: NodeId,
    pub bn_stats: Vec<BatchStats>,
    /// Indicator probabilities φ, `[(B·K) × T]` (hier).
    pub indicator_probs: Option<NodeId>,
}

pub(super) struct Encoded {
    pub a: NodeId,
    pub b: NodeId,
    pub c: Option<NodeId>,
    pub bn_stats: Vec<BatchStats>,
}

fn kl_gamma_partials(g1: f64, g2: f64, p: GammaParams) -> (f64, f64, f64) {
    let (s1, s2) = (p.shape, p.rate);
    let value = (g1 - s1) * digamma(g1) - ln_gamma(g1) + ln_gamma(s1) + s1 * (g2.ln() - s2.ln()) + g1 * (s2 - g2) / g2;
    let d1 = (g1 - s1) * trigamma(g1) + s2 / g2 - 1.0;
    let d2 = s1 / g2 - g1 * s2 / (g2 * g2);
    (value, d1, d2)
}

impl TopicModel {
    pub(super) fn encoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        counts: &Tensor,
        training: bool,
    ) -> Result<Encoded> {
        let mut h = g.constant(counts.clone())?;
        for &(w, b) in &self.layout.hidden {
            let (w, b) = (g.param(store, w)?, g.param(store, b)?);
            let pre = g.affine(h, w, b)?;
            h = g.softplus(pre)?;
        }
        let mut bn_stats = Vec::new();
        let mut head = |g: &mut Graph, (w, b): (_, _), bn: Option<usize>| -> Result<NodeId> {
            let (w, b) = (g.param(store, w)?, g.param(store, b)?);
            let mut pre = g.affine(h, w, b)?;
            if let Some(i) = bn {
                let (y, stats) = self.bn[i].forward(g, store, pre, training)?;
                bn_stats.extend(stats);
                pre = y;
            }
            let sp = g.softplus(pre)?;
            Ok(g.add_scalar(sp, HEAD_FLOOR)?)
        };
        let with_bn = self.config.batch_norm;
        let a = head(g, self.layout.head_a, with_bn.then_some(0))?;
        let b = head(g, self.layout.head_b, with_bn.then_some(1))?;
        let c = match self.layout.head_c {
            Some((w, bias)) => {
                let (w, bias) = (g.param(store, w)?, g.param(store, bias)?);
                Some(g.affine(h, w, bias)?)
            }
            None => None,
        };
        Ok(Encoded { a, b, c, bn_stats })
    }

    /// Builds the per-document ELBO for `input` on `g`, reading parameters from
    /// `store` (which may differ from the model's own, e.g. in gradient checks).
    pub fn elbo_graph(&self, g: &mut Graph, store: &ParamStore, input: &ElboInput) -> Result<ElboNodes> {
        let cfg = &self.config;
        let counts = input.counts;
        self.check_vocab(counts.cols())?;
        let batch = counts.rows();
        let sticks = cfg.k - 1;
        if input.noise.uniforms.len() != batch * sticks {
            return Err(ModelError::Shape(format!(
                "{} uniforms for {batch} documents with K={}",
                input.noise.uniforms.len(),
                cfg.k
            )));
        }
        let enc = self.encoder(g, store, counts, input.training)?;

        // ν = (1 − (1−u)^{1/b})^{1/a}, kept in log space.
        let ln_1m_u = g.constant(
            input
                .noise
                .uniforms
                .map(|u| (-clamp_unit(u)).ln_1p())
                .reshaped(vec![batch, sticks])?,
        )?;
        let p = g.div(ln_1m_u, enc.b)?;
        let ln_y = g.ln_1m_exp(p)?;
        let ln_nu = g.div(ln_y, enc.a)?;
        let ln_nu = g.clamp(ln_nu, UNIT_EPS.ln(), (-UNIT_EPS).ln_1p())?;
        let ln_1m_nu = g.ln_1m_exp(ln_nu)?;
        let log_pi = g.stick_break_log(ln_nu, ln_1m_nu)?;
        let pi = g.exp(log_pi)?;

        let phi = g.param(store, self.layout.bank)?;
        let mut indicator_probs = None;
        let mut indicator_term = None;
        let log_theta = match cfg.variant {
            Variant::Itmvae => {
                let theta = g.softmax_rows(phi)?;
                let mix = g.matmul(pi, theta)?;
                let mix = g.clamp(mix, f64::MIN_POSITIVE, f64::INFINITY)?;
                g.ln(mix)?
            }
            Variant::Prod | Variant::Hp => {
                let logits = g.matmul(pi, phi)?;
                g.log_softmax_rows(logits)?
            }
            Variant::Hier => {
                let t = cfg.topics();
                let gumbels = input
                    .noise
                    .gumbels
                    .as_ref()
                    .ok_or_else(|| ModelError::Shape("hier needs Gumbel noise".into()))?;
                if gumbels.len() != batch * cfg.k * t {
                    return Err(ModelError::Shape(format!(
                        "{} Gumbels for {batch} documents with K={}, T={t}",
                        gumbels.len(),
                        cfg.k
                    )));
                }
                let logits = enc.c.expect("hier has an indicator head");
                let logits = g.reshape(logits, vec![batch * cfg.k, t])?;
                let log_phi = g.log_softmax_rows(logits)?;
                let phi_probs = g.exp(log_phi)?;
                indicator_probs = Some(phi_probs);

                let noise = g.constant(gumbels.clone().reshaped(vec![batch * cfg.k, t])?)?;
                let perturbed = g.add(logits, noise)?;
                let scaled = g.scale(perturbed, 1.0 / input.temperature)?;
                let relaxed = g.softmax_rows(scaled)?;
                let pi_col = g.reshape(pi, vec![batch * cfg.k, 1])?;
                let weighted = g.mul_col(relaxed, pi_col)?;
                let atom_weights = g.group_sum_rows(weighted, cfg.k)?;
                let theta = g.softmax_rows(phi)?;
                let mix = g.matmul(atom_weights, theta)?;
                let mix = g.clamp(mix, f64::MIN_POSITIVE, f64::INFINITY)?;

                // Σ_k Σ_i φ_ki (E[log β_i] − log φ_ki)
                let bp = self.beta.as_ref().expect("hier keeps a corpus posterior");
                let e_log_beta = g.constant(Tensor::matrix(1, t, expected_log_stick_weights(bp))?)?;
                let neg = g.neg(log_phi)?;
                let diff = g.add_row(neg, e_log_beta)?;
                let cross = g.mul(phi_probs, diff)?;
                let per_stick = g.sum_cols(cross)?;
                let per_stick = g.reshape(per_stick, vec![batch, cfg.k])?;
                let per_doc_term = g.sum_cols(per_stick)?;
                // Corpus stick term, amortized over the training set.
                let corpus = corpus_stick_term(bp, cfg.gamma) / self.corpus_size as f64;
                let corpus = g.constant(Tensor::scalar(corpus).reshaped(vec![1, 1])?)?;
                indicator_term = Some(g.add_row(per_doc_term, corpus)?);
                g.ln(mix)?
            }
        };
        let x = g.constant(counts.clone().reshaped(vec![batch, cfg.vocab_size])?)?;
        let weighted = g.mul(x, log_theta)?;
        let recon = g.sum_cols(weighted)?;

        let mut per_doc = if cfg.variant == Variant::Hp {
            self.hyper_terms(g, store, &enc, ln_nu, ln_1m_nu, recon)?
        } else {
            let (alpha, est) = (cfg.alpha, cfg.kl_estimator);
            let kl = g.binary("kl_kumaraswamy_beta", enc.a, enc.b, move |a, b| {
                kl_node(a, b, alpha, est)
            })?;
            let kl = g.sum_cols(kl)?;
            g.sub(recon, kl)?
        };
        if let Some(term) = indicator_term {
            per_doc = g.add(per_doc, term)?;
        }
        let objective = if input.kl_weight == 1.0 {
            per_doc
        } else {
            let rest = g.sub(per_doc, recon)?;
            let rest = g.scale(rest, input.kl_weight)?;
            g.add(recon, rest)?
        };
        let total = g.sum_all(objective)?;
        let loss = g.scale(total, -1.0 / batch.max(1) as f64)?;
        Ok(ElboNodes {
            per_doc,
            recon,
            loss,
            bn_stats: enc.bn_stats,
            indicator_probs,
        })
    }

    /// recon + Σ_k (E[log α] + (E[α]−1) log(1−ν_k)) − Σ_k log q(ν_k) − KL(q(α) ‖ p(α))/D.
    fn hyper_terms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &Encoded,
        ln_nu: NodeId,
        ln_1m_nu: NodeId,
        recon: NodeId,
    ) -> Result<NodeId> {
        let (g1, g2) = self.layout.hyper.expect("hp has hyper-prior parameters");
        let (g1, g2) = (g.param(store, g1)?, g.param(store, g2)?);
        let (g1, g2) = (g.reshape(g1, vec![1, 1])?, g.reshape(g2, vec![1, 1])?);
        let sticks = (self.config.k - 1) as f64;

        let e_alpha = g.div(g1, g2)?;
        let e_alpha_m1 = g.add_scalar(e_alpha, -1.0)?;
        let psi = g.digamma(g1)?;
        let ln_g2 = g.ln(g2)?;
        let e_log_alpha = g.sub(psi, ln_g2)?;
        let e_log_alpha = g.scale(e_log_alpha, sticks)?;
        let sum_ln_1m = g.sum_cols(ln_1m_nu)?;
        let prior = g.mul_row(sum_ln_1m, e_alpha_m1)?;
        let prior = g.add_row(prior, e_log_alpha)?;

        // log q(ν) = log a + log b + (a−1) log ν + (b−1) log(1 − ν^a)
        let ln_a = g.ln(enc.a)?;
        let ln_b = g.ln(enc.b)?;
        let am1 = g.add_scalar(enc.a, -1.0)?;
        let bm1 = g.add_scalar(enc.b, -1.0)?;
        let t1 = g.mul(am1, ln_nu)?;
        let a_ln_nu = g.mul(enc.a, ln_nu)?;
        let ln_1m_nua = g.ln_1m_exp(a_ln_nu)?;
        let t2 = g.mul(bm1, ln_1m_nua)?;
        let lq = g.add(ln_a, ln_b)?;
        let lq = g.add(lq, t1)?;
        let lq = g.add(lq, t2)?;
        let lq = g.sum_cols(lq)?;

        let p = self.config.prior_gamma();
        let kl = g.binary("kl_gamma", g1, g2, move |a, b| kl_gamma_partials(a, b, p))?;
        let kl = g.scale(kl, -1.0 / self.corpus_size as f64)?;

        let out = g.add(recon, prior)?;
        let out = g.sub(out, lq)?;
        Ok(g.add_row(out, kl)?)
    }

    /// Per-document ELBOs without gradients, batch norm in evaluation mode.
    pub fn elbo_batch(&self, counts: &Tensor, noise: &Noise, temperature: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = ElboInput {
            counts,
            noise,
            temperature,
            training: false,
            kl_weight: 1.0,
        };
        let nodes = self.elbo_graph(&mut g, &self.store, &input)?;
        Ok(g.value(nodes.per_doc).data().to_vec())
    }

    fn single(&self, doc: &[f64], uniforms: &[f64], gumbels: Option<Tensor>, temperature: f64) -> Result<f64> {
        let counts = self.batch_counts(&[doc.to_vec()])?;
        let noise = Noise {
            uniforms: Tensor::matrix(1, uniforms.len(), uniforms.to_vec())?,
            gumbels,
        };
        Ok(self.elbo_batch(&counts, &noise, temperature)?[0])
    }

    /// Single-document ELBO for itmvae or prod with K−1 given uniforms.
    pub fn elbo_itmvae(&self, doc: &[f64], uniforms: &[f64]) -> Result<f64> {
        match self.config.variant {
            Variant::Itmvae | Variant::Prod => self.single(doc, uniforms, None, 1.0),
            v => Err(ModelError::Config(format!("elbo_itmvae on variant {}", v.name()))),
        }
    }

    /// Single-document ELBO for hp under the given Gamma posterior over α.
    pub fn elbo_hp(&self, doc: &[f64], uniforms: &[f64], q: GammaParams) -> Result<f64> {
        let mut m = self.clone();
        m.set_gamma_posterior(q)?;
        m.single(doc, uniforms, None, 1.0)
    }

    /// Single-document ELBO for hier; `gumbels` is `[K × T]`.
    pub fn elbo_hier(
        &self,
        doc: &[f64],
        uniforms: &[f64],
        gumbels: &Tensor,
        bp: &BetaPosterior,
        temperature: f64,
    ) -> Result<f64> {
        if self.config.variant != Variant::Hier || bp.atoms() != self.config.topics() {
            return Err(ModelError::Config(
                "elbo_hier needs a hier model with matching T".into(),
            ));
        }
        let mut m = self.clone();
        m.beta = Some(bp.clone());
        m.single(doc, uniforms, Some(gumbels.clone()), temperature)
    }
}

fn kl_node(a: f64, b: f64, alpha: f64, est: KlEstimator) -> (f64, f64, f64) {
    match kl_kumaraswamy_beta_grad(a, b, alpha, est) {
        Ok(v) => (v.value, v.d_a, v.d_b),
        Err(_) => (f64::NAN, 0.0, 0.0),
    }
}
