//! Independent oracles shared by the integration tests. Nothing here reuses the
//! library's ELBO code: likelihoods are integrated numerically over the sticks.

#![allow(dead_code)]

use topicvae::corpus::BowDocument;

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log word distribution of a 3-topic stick-breaking document, product or mixture.
fn log_theta(nu1: f64, nu2: f64, logits: &[Vec<f64>], product: bool) -> Vec<f64> {
    let pi = [nu1, (1.0 - nu1) * nu2, (1.0 - nu1) * (1.0 - nu2)];
    let v = logits[0].len();
    if product {
        let l: Vec<f64> = (0..v).map(|w| (0..3).map(|k| pi[k] * logits[k][w]).sum()).collect();
        let z = log_sum_exp(&l);
        l.into_iter().map(|x| x - z).collect()
    } else {
        let lt: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let z = log_sum_exp(row);
                row.iter().map(|x| x - z).collect()
            })
            .collect();
        (0..v)
            .map(|w| (0..3).map(|k| pi[k] * lt[k][w].exp()).sum::<f64>().ln())
            .collect()
    }
}

/// Exact marginal log p(x) (without the multinomial coefficient) of documents
/// under a three-topic model with ν_1, ν_2 ~ Beta(1, α).
///
/// Substituting ν = 1 − (1−s)^{1/α} turns the prior into the uniform measure on
/// the unit square, integrated by an `n × n` midpoint rule.
pub struct MarginalOracle {
    log_theta: Vec<Vec<f64>>,
    n: usize,
}

impl MarginalOracle {
    pub fn new(logits: &[Vec<f64>], alpha: f64, product: bool, n: usize) -> Self {
        assert_eq!(logits.len(), 3);
        let nu = |i: usize| {
            let s = (i as f64 + 0.5) / n as f64;
            1.0 - (1.0 - s).powf(1.0 / alpha)
        };
        let mut log_theta = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                log_theta.push(log_theta_at(nu(i), nu(j), logits, product));
            }
        }
        Self { log_theta, n }
    }

    pub fn log_likelihood(&self, doc: &BowDocument) -> f64 {
        let terms: Vec<f64> = self
            .log_theta
            .iter()
            .map(|lt| doc.entries().iter().map(|&(w, c)| c as f64 * lt[w]).sum())
            .collect();
        log_sum_exp(&terms) - 2.0 * (self.n as f64).ln()
    }

    /// exp(−mean over documents of log p(x)/N).
    pub fn perplexity(&self, docs: &[BowDocument]) -> f64 {
        let docs: Vec<&BowDocument> = docs.iter().filter(|d| !d.is_empty()).collect();
        let mean = docs
            .iter()
            .map(|d| self.log_likelihood(d) / d.len() as f64)
            .sum::<f64>()
            / docs.len() as f64;
        (-mean).exp()
    }
}

fn log_theta_at(nu1: f64, nu2: f64, logits: &[Vec<f64>], product: bool) -> Vec<f64> {
    log_theta(nu1, nu2, logits, product)
}

/// Top-`n` word ids of a logit row, ties to the lower id.
pub fn top_ids(row: &[f64], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    ids.truncate(n);
    ids
}
