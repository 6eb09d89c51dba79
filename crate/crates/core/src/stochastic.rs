//! Random-variate transforms, stick-breaking, and the KL / expectation terms
//! used by the ELBOs.
//!
//! Every sampling function takes its base noise (uniforms or Gumbels) as an
//! argument; the generators live with the caller.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{digamma, ln_1m_exp, ln_beta, ln_gamma, softplus, trigamma, EULER_GAMMA};

/// Clamp applied to every evaluation on the open unit interval.
pub const UNIT_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum StochasticError {
    #[error("non-finite KL for Kumaraswamy(a={a}, b={b}) vs Beta(1, alpha={alpha})")]
    NonFiniteKl { a: f64, b: f64, alpha: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("parameter {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, StochasticError>;

fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(StochasticError::NonPositive { name, value })
    }
}

pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(UNIT_EPS, 1.0 - UNIT_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KumaraswamyParams {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl KumaraswamyParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(StochasticError::LengthMismatch(a.len(), b.len()));
        }
        for (&x, &y) in a.iter().zip(&b) {
            positive("a", x)?;
            positive("b", y)?;
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Posterior-mean stick weights, E[ν_k] pushed through the stick-breaking map.
    pub fn mean_weights(&self) -> StickWeights {
        let nu: Vec<f64> = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| kumaraswamy_mean(a, b))
            .collect();
        stick_break(&nu)
    }
}

/// Inverse-CDF draw ν = (1 − (1−u)^{1/b})^{1/a}.
pub fn kumaraswamy_sample(a: f64, b: f64, u: f64) -> f64 {
    let u = clamp_unit(u);
    let ln_y = ln_1m_exp(u.mul_add(-1.0, 1.0).ln() / b);
    (ln_y / a).exp()
}

/// E[ν] = b·B(1 + 1/a, b).
pub fn kumaraswamy_mean(a: f64, b: f64) -> f64 {
    (b.ln() + ln_beta(1.0 + 1.0 / a, b)).exp()
}

pub fn log_pdf_kumaraswamy(nu: f64, a: f64, b: f64) -> f64 {
    let nu = clamp_unit(nu);
    let ln_nu = nu.ln();
    (a * b).ln() + (a - 1.0) * ln_nu + (b - 1.0) * ln_1m_exp(a * ln_nu)
}

/// Log density of Beta(1, alpha).
pub fn log_pdf_beta1(nu: f64, alpha: f64) -> f64 {
    let nu = clamp_unit(nu);
    alpha.ln() + (alpha - 1.0) * (-nu).ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StickWeights(Vec<f64>);

impl StickWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn one_hot(k: usize, len: usize) -> Self {
        let mut v = vec![0.0; len];
        v[k] = 1.0;
        Self(v)
    }

    /// Arbitrary simplex vector; renormalizes small drift.
    pub fn from_weights(mut w: Vec<f64>) -> Self {
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        Self(w)
    }
}

/// π_k = ν_k ∏_{l<k}(1−ν_l) for k < K, with the residual stick as π_K.
pub fn stick_break(nu: &[f64]) -> StickWeights {
    let mut pi = Vec::with_capacity(nu.len() + 1);
    let mut remaining = 1.0;
    for &v in nu {
        pi.push(v * remaining);
        remaining *= 1.0 - v;
    }
    pi.push(remaining);
    StickWeights(pi)
}

/// How KL(Kumaraswamy ‖ Beta(1, α)) evaluates its E[−log(1−ν)] term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Double-exponential quadrature of the expectation; accurate to ~1e-12.
    #[default]
    Exact,
    /// The Taylor series truncated after `terms` terms.
    Series { terms: usize },
}

/// A value with its partial derivatives in (a, b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub d_a: f64,
    pub d_b: f64,
}

struct TanhSinh {
    /// (ln r, weight) for nodes r on (0, 1).
    nodes: Vec<(f64, f64)>,
}

fn tanh_sinh() -> &'static TanhSinh {
    static TABLE: OnceLock<TanhSinh> = OnceLock::new();
    TABLE.get_or_init(|| {
        let h = 1.0 / 16.0;
        let n = 64i32; // t ∈ [−4, 4]
        let half_pi = std::f64::consts::FRAC_PI_2;
        let nodes = (-n..=n)
            .map(|j| {
                let t = j as f64 * h;
                let z = half_pi * t.sinh();
                // r = (1 + tanh z)/2 = 1/(1 + e^{-2z})
                let ln_r = -softplus(-2.0 * z);
                let e = (-2.0 * z.abs()).exp();
                let sech2 = 4.0 * e / ((1.0 + e) * (1.0 + e));
                let w = h * 0.5 * half_pi * t.cosh() * sech2;
                (ln_r, w)
            })
            .filter(|&(ln_r, w)| ln_r < 0.0 && w > 0.0)
            .collect();
        TanhSinh { nodes }
    })
}

/// E[−log(1−ν)] under Kumaraswamy(a, b) with its gradient.
///
/// Integrates −log(1 − (1 − r^{1/b})^{1/a}) over r ∈ (0, 1).
pub fn expected_neg_log1m_kumaraswamy(a: f64, b: f64) -> ValueGrad {
    let (mut val, mut da, mut db) = (0.0, 0.0, 0.0);
    for &(ln_r, w) in &tanh_sinh().nodes {
        let p = ln_r / b;
        let ln_y = ln_1m_exp(p);
        // q = log(−log y) and s = log(−log ν), kept finite where y, ν round to 1.
        let q = if p < -40.0 { p } else { (-ln_y).ln() };
        let s = q - a.ln();
        let ln_nu = -s.exp();
        let lam = if s < -40.0 { s } else { ln_1m_exp(ln_nu) };
        // log of ν/(1−ν)
        let ln_odds = ln_nu - lam;
        val -= w * lam;
        da += w * (ln_odds + q).exp() / (a * a);
        db += w * (ln_odds + p - ln_y).exp() * ln_r / (a * b * b);
    }
    ValueGrad {
        value: val,
        d_a: da,
        d_b: db,
    }
}

/// Σ_{m=1}^{M} B(m/a, b)/(m + ab), times b: the truncated series for E[−log(1−ν)].
fn series_neg_log1m(a: f64, b: f64, terms: usize) -> ValueGrad {
    let (mut s, mut ds_a, mut ds_b) = (0.0, 0.0, 0.0);
    let psi_b = digamma(b);
    for m in 1..=terms {
        let m = m as f64;
        let z = m / a;
        let denom = m + a * b;
        let t = ln_beta(z, b).exp() / denom;
        let psi_zb = digamma(z + b);
        let dlnb_a = -(m / (a * a)) * (digamma(z) - psi_zb);
        let dlnb_b = psi_b - psi_zb;
        s += t;
        ds_a += t * (dlnb_a - b / denom);
        ds_b += t * (dlnb_b - a / denom);
    }
    ValueGrad {
        value: b * s,
        d_a: b * ds_a,
        d_b: s + b * ds_b,
    }
}

/// KL(Kumaraswamy(a, b) ‖ Beta(1, α)) and its gradient in (a, b).
pub fn kl_kumaraswamy_beta_grad(a: f64, b: f64, alpha: f64, est: KlEstimator) -> Result<ValueGrad> {
    let psi_b = digamma(b);
    let inner = -EULER_GAMMA - psi_b - 1.0 / b;
    let closed = ((a - 1.0) / a) * inner + (a * b).ln() - alpha.ln() - (b - 1.0) / b;
    let closed_da = inner / (a * a) + 1.0 / a;
    let closed_db = ((a - 1.0) / a) * (1.0 / (b * b) - trigamma(b)) + 1.0 / b - 1.0 / (b * b);
    let tail = match est {
        KlEstimator::Exact => expected_neg_log1m_kumaraswamy(a, b),
        KlEstimator::Series { terms } => series_neg_log1m(a, b, terms),
    };
    let value = closed + (alpha - 1.0) * tail.value;
    if !value.is_finite() {
        return Err(StochasticError::NonFiniteKl { a, b, alpha });
    }
    if value < 0.0 {
        return Ok(ValueGrad {
            value: 0.0,
            d_a: 0.0,
            d_b: 0.0,
        });
    }
    Ok(ValueGrad {
        value,
        d_a: closed_da + (alpha - 1.0) * tail.d_a,
        d_b: closed_db + (alpha - 1.0) * tail.d_b,
    })
}

/// Series form of KL(Kumaraswamy(a, b) ‖ Beta(1, α)) truncated after `terms` terms.
pub fn kl_kumaraswamy_beta(a: f64, b: f64, alpha: f64, terms: usize) -> Result<f64> {
    kl_kumaraswamy_beta_grad(a, b, alpha, KlEstimator::Series { terms }).map(|g| g.value)
}

/// KL with the quadrature-evaluated expectation.
pub fn kl_kumaraswamy_beta_exact(a: f64, b: f64, alpha: f64) -> Result<f64> {
    kl_kumaraswamy_beta_grad(a, b, alpha, KlEstimator::Exact).map(|g| g.value)
}

pub fn gumbel_noise(u: f64) -> f64 {
    -(-clamp_unit(u).ln()).ln()
}

/// softmax((logits + noise)/τ).
pub fn gumbel_softmax_sample(logits: &[f64], temperature: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(StochasticError::BadTemperature(temperature));
    }
    if logits.len() != noise.len() {
        return Err(StochasticError::LengthMismatch(logits.len(), noise.len()));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Gamma distribution in the shape/rate convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        Ok(Self {
            shape: positive("shape", shape)?,
            rate: positive("rate", rate)?,
        })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

pub fn kl_gamma(q: GammaParams, p: GammaParams) -> f64 {
    let (g1, g2, s1, s2) = (q.shape, q.rate, p.shape, p.rate);
    (g1 - s1) * digamma(g1) - ln_gamma(g1) + ln_gamma(s1) + s1 * (g2.ln() - s2.ln()) + g1 * (s2 - g2) / g2
}

/// (E[α], E[log α]) under q = Gamma(shape, rate).
pub fn gamma_expectations(g: GammaParams) -> (f64, f64) {
    (g.shape / g.rate, digamma(g.shape) - g.rate.ln())
}

/// Corpus-level Beta(u_i, v_i) factors over the stick fractions β'_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl BetaPosterior {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() {
            return Err(StochasticError::LengthMismatch(u.len(), v.len()));
        }
        for (&x, &y) in u.iter().zip(&v) {
            positive("u", x)?;
            positive("v", y)?;
        }
        Ok(Self { u, v })
    }

    /// The GEM(γ) prior itself: u = 1, v = γ, for T atoms.
    pub fn prior(atoms: usize, gamma: f64) -> Self {
        let n = atoms.saturating_sub(1);
        Self {
            u: vec![1.0; n],
            v: vec![gamma; n],
        }
    }

    /// Number of atoms T.
    pub fn atoms(&self) -> usize {
        self.u.len() + 1
    }
}

/// (E[log β'_i], E[log(1−β'_i)]) for i = 1..T−1.
pub fn beta_log_expectations(bp: &BetaPosterior) -> (Vec<f64>, Vec<f64>) {
    bp.u.iter()
        .zip(&bp.v)
        .map(|(&u, &v)| {
            let total = digamma(u + v);
            (digamma(u) - total, digamma(v) - total)
        })
        .unzip()
}

/// E[log β_i] for the full stick weights i = 1..T; the last weight takes the
/// residual sum only.
pub fn expected_log_stick_weights(bp: &BetaPosterior) -> Vec<f64> {
    let (e_log, e_log1m) = beta_log_expectations(bp);
    let mut out = Vec::with_capacity(bp.atoms());
    let mut acc = 0.0;
    for (l, l1m) in e_log.iter().zip(&e_log1m) {
        out.push(l + acc);
        acc += l1m;
    }
    out.push(acc);
    out
}

/// KL(Beta(u, v) ‖ Beta(a0, b0)).
pub fn kl_beta(u: f64, v: f64, a0: f64, b0: f64) -> f64 {
    ln_beta(a0, b0) - ln_beta(u, v) + (u - a0) * digamma(u) + (v - b0) * digamma(v) + (a0 - u + b0 - v) * digamma(u + v)
}

/// E_q[log p(β'|γ) − log q(β')], the corpus term of the hierarchical ELBO.
pub fn corpus_stick_term(bp: &BetaPosterior, gamma: f64) -> f64 {
    -bp.u
        .iter()
        .zip(&bp.v)
        .map(|(&u, &v)| kl_beta(u, v, 1.0, gamma))
        .sum::<f64>()
}
