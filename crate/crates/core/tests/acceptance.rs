//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! The 20 Newsgroups reproduction criteria behave like ignored tests: they run
//! only with `--ignored` or `--include-ignored`, then read the corpus from
//! `ITM_20NEWS_DIR` (`vocab.txt`, `train.bow`, `test.bow`, labelled lines) and
//! fail if it is missing.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use topicvae::corpus::{load_bow, load_vocabulary, Corpus, Split, SplitManifest};
use topicvae::engine::{grad_check, GradCheckOptions};
use topicvae::evaluation::{self, topics_to_cover, EvalOptions, Report};
use topicvae::models::{ElboInput, ModelConfig, ModelError, Noise, TopicModel, Variant};
use topicvae::seeding;
use topicvae::special::{ln_1m_exp, ln_gamma};
use topicvae::stochastic::{
    gamma_expectations, kl_gamma, kl_kumaraswamy_beta, kl_kumaraswamy_beta_exact, BetaPosterior, GammaParams,
};
use topicvae::synthetic::{generate, SyntheticSpec};
use topicvae::training::{fit, mean_field_update, FitOptions, TrainSchedule};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = out.passed && in_time;
        if !passed {
            self.failures += 1;
        }
        let timing = if in_time {
            String::new()
        } else {
            format!(" over budget {budget:?};")
        };
        println!(
            "{} {name}: {}{timing} ({:.1}s)",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }

    fn ignored(&self, name: &str) {
        println!("IGNORED {name}: needs --ignored and ITM_20NEWS_DIR");
    }
}

const MINUTE: Duration = Duration::from_secs(60);

// ---------------------------------------------------------------- gradients

fn toy_model(variant: Variant, seed: u64) -> TopicModel {
    let mut c = ModelConfig::new(variant, 20, 6);
    c.hidden = vec![16, 16];
    if variant == Variant::Hier {
        c.t = Some(4);
    }
    let mut m = TopicModel::new(c, &mut seeding::stream(seed, seeding::INIT)).unwrap();
    if variant == Variant::Hier {
        m.beta = Some(BetaPosterior::new(vec![3.0, 2.0, 1.5], vec![6.0, 3.5, 1.2]).unwrap());
    }
    m
}

fn toy_counts(model: &TopicModel, seed: u64) -> topicvae::engine::Tensor {
    let mut rng = seeding::stream(seed, seeding::SYNTHETIC);
    let docs: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..20)
                .map(|_| {
                    if rng.random::<f64>() < 0.4 {
                        rng.random_range(1..4) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    model.batch_counts(&docs).unwrap()
}

fn max_grad_error(variant: Variant, seed: u64, training: bool) -> f64 {
    let model = toy_model(variant, seed);
    let counts = toy_counts(&model, seed);
    let noise = Noise::sample(&model, 3, &mut seeding::stream(seed, seeding::NOISE));
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        floor: 1e-4,
    };
    let report = grad_check(model.store(), opts, |g, s| {
        let input = ElboInput {
            counts: &counts,
            noise: &noise,
            temperature: 0.7,
            training,
            kl_weight: 1.0,
        };
        let nodes = model.elbo_graph(g, s, &input).map_err(|e| match e {
            ModelError::Engine(e) => e,
            other => panic!("{other}"),
        })?;
        Ok(nodes.loss)
    })
    .unwrap();
    report.max_rel_error()
}

fn gradient_fidelity() -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;
    for variant in [Variant::Itmvae, Variant::Prod, Variant::Hp, Variant::Hier] {
        let tol = if variant == Variant::Hier { 1e-3 } else { 1e-4 };
        let worst = (0..3)
            .flat_map(|seed| [false, true].map(|training| max_grad_error(variant, seed, training)))
            .fold(0.0, f64::max);
        passed &= worst < tol;
        parts.push(format!("{} {worst:.1e} (<{tol:.0e})", variant.name()));
    }
    outcome(passed, format!("max rel error {}", parts.join(", ")))
}

// ------------------------------------------------------ distribution oracles

const MC_SAMPLES: usize = 1_000_000;

/// E_q[log q − log p] for q = Kumaraswamy(a, b), p = Beta(1, α), using
/// stratified uniforms pushed through the inverse CDF in log space.
fn mc_kl_kumaraswamy(a: f64, b: f64, alpha: f64, rng: &mut impl Rng) -> f64 {
    let n = MC_SAMPLES as f64;
    let mut total = 0.0;
    for i in 0..MC_SAMPLES {
        let u = (i as f64 + rng.random::<f64>()) / n;
        let ln_1m_nu_a = (-u).ln_1p() / b;
        let ln_nu = ln_1m_exp(ln_1m_nu_a) / a;
        let ln_1m_nu = ln_1m_exp(ln_nu);
        let log_q = (a * b).ln() + (a - 1.0) * ln_nu + (b - 1.0) * ln_1m_nu_a;
        let log_p = alpha.ln() + (alpha - 1.0) * ln_1m_nu;
        total += log_q - log_p;
    }
    total / n
}

fn gamma_log_pdf(x: f64, g: GammaParams) -> f64 {
    g.shape * g.rate.ln() - ln_gamma(g.shape) + (g.shape - 1.0) * x.ln() - g.rate * x
}

fn mc_kl_gamma(q: GammaParams, p: GammaParams, rng: &mut impl Rng) -> f64 {
    let dist = Gamma::new(q.shape, 1.0 / q.rate).unwrap();
    let total: f64 = (0..MC_SAMPLES)
        .map(|_| {
            let x = dist.sample(rng);
            gamma_log_pdf(x, q) - gamma_log_pdf(x, p)
        })
        .sum();
    total / MC_SAMPLES as f64
}

fn distribution_oracles() -> Outcome {
    let mut rng = seeding::stream(11, seeding::EVAL);
    let mut triples = vec![(2.0, 3.0, 10.0), (1.0, 1.0, 2.0)];
    for _ in 0..20 {
        triples.push((
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
            rng.random_range(1.0..30.0),
        ));
    }
    let mut kuma_err: f64 = 0.0;
    let mut series_err: f64 = 0.0;
    for &(a, b, alpha) in &triples {
        let mc = mc_kl_kumaraswamy(a, b, alpha, &mut rng);
        kuma_err = kuma_err.max((kl_kumaraswamy_beta_exact(a, b, alpha).unwrap() - mc).abs());
        series_err = series_err.max((kl_kumaraswamy_beta(a, b, alpha, 10).unwrap() - mc).abs());
    }

    let mut pairs = vec![(
        GammaParams::new(16.88, 4.58).unwrap(),
        GammaParams::new(1.0, 0.05).unwrap(),
    )];
    for _ in 0..10 {
        let q = GammaParams::new(rng.random_range(1.0..50.0), rng.random_range(1.0..10.0)).unwrap();
        let p = GammaParams::new(rng.random_range(0.5..3.0), rng.random_range(0.01..0.2)).unwrap();
        pairs.push((q, p));
    }
    let gamma_err = pairs
        .iter()
        .map(|&(q, p)| (kl_gamma(q, p) - mc_kl_gamma(q, p, &mut rng)).abs())
        .fold(0.0, f64::max);

    let passed = kuma_err < 1e-2 && gamma_err < 1e-2;
    outcome(
        passed,
        format!(
            "kumaraswamy {} triples max |err| {kuma_err:.1e}, gamma {} pairs max |err| {gamma_err:.1e} (<1e-2); \
             10-term series for reference {series_err:.1e}",
            triples.len(),
            pairs.len()
        ),
    )
}

// -------------------------------------------------------------- mean field

fn mean_field_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, docs) in [1usize, 5, 12, 20].into_iter().enumerate() {
        let mut config = ModelConfig::new(Variant::Hier, 20, 5);
        config.t = Some(4);
        config.hidden = vec![16];
        let mut model = TopicModel::new(config, &mut seeding::stream(seed as u64, seeding::INIT)).unwrap();
        model.beta = Some(BetaPosterior::prior(4, 20.0));
        let mut rng = seeding::stream(seed as u64, seeding::SYNTHETIC);
        let rows: Vec<Vec<f64>> = (0..docs)
            .map(|_| (0..20).map(|_| rng.random_range(0..3) as f64 + 1.0).collect())
            .collect();
        let counts = model.batch_counts(&rows).unwrap();
        let noise = Noise::sample(&model, docs, &mut rng);
        let mut g = topicvae::engine::Graph::new();
        let input = ElboInput {
            counts: &counts,
            noise: &noise,
            temperature: 1.0,
            training: true,
            kl_weight: 1.0,
        };
        let nodes = model.elbo_graph(&mut g, model.store(), &input).unwrap();
        let phi = g.value(nodes.indicator_probs.unwrap()).clone();
        let (k, t) = (5, 4);

        let mut sums = vec![0.0; t];
        for r in 0..phi.rows() {
            sums.iter_mut().zip(phi.row(r)).for_each(|(s, p)| *s += p);
        }
        let updated = mean_field_update(&BetaPosterior::prior(t, 20.0), &sums, 20.0).unwrap();

        for i in 0..t - 1 {
            let mut u = 1.0;
            let mut v = 20.0;
            for d in 0..docs {
                for stick in 0..k {
                    let row = phi.row(d * k + stick);
                    u += row[i];
                    v += row[i + 1..].iter().sum::<f64>();
                }
            }
            worst = worst.max((updated.u[i] - u).abs()).max((updated.v[i] - v).abs());
        }
    }
    outcome(
        worst < 1e-12,
        format!("max |Δ| over D ∈ {{1,5,12,20}} = {worst:.1e} (<1e-12)"),
    )
}

// ------------------------------------------------------ generative recovery

fn generative_recovery() -> Outcome {
    let spec = SyntheticSpec {
        docs: 600,
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let train = data.corpus.subset(&(0..500).collect::<Vec<_>>(), Split::Train).unwrap();
    let held_out = data
        .corpus
        .subset(&(500..600).collect::<Vec<_>>(), Split::Test)
        .unwrap();
    let oracle = common::MarginalOracle::new(&data.logits, spec.alpha, true, 200).perplexity(&held_out.documents);

    let mut config = ModelConfig::new(Variant::Prod, spec.vocab, 10);
    config.hidden = vec![64, 64];
    config.alpha = spec.alpha;
    let model = TopicModel::new(config, &mut seeding::stream(0, seeding::INIT)).unwrap();
    let schedule = TrainSchedule {
        epochs: 100,
        batch_size: 64,
        patience: None,
        ..Default::default()
    };
    let trained = fit(model, &train, &schedule, FitOptions::default()).unwrap().last;
    let ppl = evaluation::perplexity(&trained, &held_out, 20, 1).unwrap().perplexity;

    let bank = trained.bank();
    let overlaps: Vec<usize> = data
        .logits
        .iter()
        .map(|truth| {
            let truth = common::top_ids(truth, 10);
            (0..bank.topics())
                .map(|k| {
                    common::top_ids(bank.logits().row(k), 10)
                        .iter()
                        .filter(|w| truth.contains(w))
                        .count()
                })
                .max()
                .unwrap()
        })
        .collect();
    let ratio = ppl / oracle;
    let passed = (ratio - 1.0).abs() <= 0.10 && overlaps.iter().all(|&o| o >= 7);
    outcome(
        passed,
        format!("held-out perplexity {ppl:.3} vs exact generating model {oracle:.3} (ratio {ratio:.3}, within 10%); top-10 overlaps {overlaps:?} (≥7)"),
    )
}

// ------------------------------------------------------------ 20 Newsgroups

struct News {
    train: Corpus,
    valid: Corpus,
    test: Corpus,
}

fn load_news() -> News {
    let dir =
        PathBuf::from(std::env::var("ITM_20NEWS_DIR").expect("ITM_20NEWS_DIR must point at the 20 Newsgroups corpus"));
    let vocab = load_vocabulary(dir.join("vocab.txt")).unwrap();
    let (full, _) = load_bow(dir.join("train.bow"), &vocab, Split::Train).unwrap();
    let (test, _) = load_bow(dir.join("test.bow"), &vocab, Split::Test).unwrap();
    let split = SplitManifest::random(full.len(), 0, 0.1, 0.0).unwrap();
    let train = full.subset(&split.train, Split::Train).unwrap();
    let valid = full.subset(&split.valid, Split::Valid).unwrap();
    News { train, valid, test }
}

fn train_news(config: ModelConfig, train: &Corpus, valid: &Corpus, out: &Path) -> TopicModel {
    let model = TopicModel::new(config, &mut seeding::stream(0, seeding::INIT)).unwrap();
    let opts = FitOptions {
        valid: Some(valid),
        out_dir: Some(out),
        ..Default::default()
    };
    fit(model, train, &TrainSchedule::default(), opts).unwrap().model
}

fn news_config(variant: Variant, v: usize, k: usize, alpha: f64) -> ModelConfig {
    let mut c = ModelConfig::new(variant, v, k);
    c.alpha = alpha;
    c
}

fn report(model: &TopicModel, eval: &Corpus, train: &Corpus) -> Report {
    evaluation::evaluate(model, eval, train, EvalOptions::default()).unwrap()
}

fn news_reproduction(suite: &mut Suite) {
    let hours = |h: u64| Duration::from_secs(3600 * h);
    let work = tempfile::tempdir().unwrap();
    let news = load_news();
    let v = news.train.vocab_size();

    let mut prod_report = None;
    let mut mix_report = None;
    suite.run("20News perplexity (iTM-VAE-Prod K=200)", hours(8), || {
        let prod = train_news(
            news_config(Variant::Prod, v, 200, 20.0),
            &news.train,
            &news.valid,
            &work.path().join("prod"),
        );
        let mix = train_news(
            news_config(Variant::Itmvae, v, 200, 20.0),
            &news.train,
            &news.valid,
            &work.path().join("mix"),
        );
        let p = report(&prod, &news.test, &news.train);
        let m = report(&mix, &news.test, &news.train);
        let passed = p.perplexity <= 900.0 && p.perplexity < m.perplexity;
        let detail = format!(
            "prod {:.1} (≤900, reported 775), mixture {:.1} (prod must be lower)",
            p.perplexity, m.perplexity
        );
        prod_report = Some(p);
        mix_report = Some(m);
        outcome(passed, detail)
    });
    suite.run("20News coherence ordering", MINUTE, || {
        match (&prod_report, &mix_report) {
            (Some(p), Some(m)) => {
                let (pc, mc) = (p.coherence_effective, m.coherence_effective);
                outcome(pc > mc, format!("effective-topic NPMI prod {pc:.3} > mixture {mc:.3}"))
            }
            _ => outcome(false, "perplexity runs did not finish".into()),
        }
    });

    let classes = [1usize, 2, 5, 10, 20];
    let mut alphas = Vec::new();
    let mut covers = Vec::new();
    suite.run("hyper-prior adaptation across class subsets", hours(8), || {
        for &n in &classes {
            let sub = news.train.class_subset(n).unwrap();
            let split = SplitManifest::random(sub.len(), 0, 0.1, 0.0).unwrap();
            let (tr, va) = (
                sub.subset(&split.train, Split::Train).unwrap(),
                sub.subset(&split.valid, Split::Valid).unwrap(),
            );
            let model = train_news(
                news_config(Variant::Hp, v, 200, 20.0),
                &tr,
                &va,
                &work.path().join(format!("hp{n}")),
            );
            let q = model.gamma_posterior().unwrap();
            alphas.push(gamma_expectations(q).0);
            let summary = evaluation::posterior_summary(&model, &tr).unwrap();
            covers.push(topics_to_cover(&evaluation::coverage_curve(&summary).unwrap(), 0.9));
        }
        let increasing = alphas.windows(2).all(|w| w[1] > w[0]);
        let low = alphas[0] < 10.0;
        outcome(
            increasing && low,
            format!(
                "E[α] by classes {classes:?}: {alphas:.2?} (strictly increasing, 1-class < 10; reported 3.68 … 16.39)"
            ),
        )
    });
    suite.run("coverage grows with class count", MINUTE, || {
        let passed = covers.len() == classes.len() && covers.windows(2).all(|w| w[1] > w[0]);
        outcome(
            passed,
            format!("topics to reach 90% coverage: {covers:?} (strictly increasing)"),
        )
    });

    suite.run("hierarchical sparsity and effective topics", hours(8), || {
        let mut hc = news_config(Variant::Hier, v, 50, 5.0);
        hc.t = Some(200);
        hc.gamma = 20.0;
        let hier = train_news(hc, &news.train, &news.valid, &work.path().join("hier"));
        let prod20 = train_news(
            news_config(Variant::Prod, v, 200, 20.0),
            &news.train,
            &news.valid,
            &work.path().join("p20"),
        );
        let prod5 = train_news(
            news_config(Variant::Prod, v, 200, 5.0),
            &news.train,
            &news.valid,
            &work.path().join("p5"),
        );
        let (h, p20, p5) = (
            report(&hier, &news.train, &news.train),
            report(&prod20, &news.train, &news.train),
            report(&prod5, &news.train, &news.train),
        );
        let ranks = h.sparsity_log.len().min(p20.sparsity_log.len());
        let below = (9..ranks).all(|r| h.sparsity_log[r] < p20.sparsity_log[r]);
        let more = h.effective_topics > p5.effective_topics;
        outcome(
            below && more,
            format!(
                "sparsity below prod(α=20) from rank 10: {below}; effective topics hier {} vs prod(α=5) {}",
                h.effective_topics, p5.effective_topics
            ),
        )
    });
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only_ignored = args.iter().any(|a| a == "--ignored");
    // `cargo test -- --list` and friends.
    if args.iter().any(|a| a == "--list") {
        return;
    }

    let mut suite = Suite { failures: 0 };
    if !only_ignored {
        suite.run("gradient fidelity", MINUTE, gradient_fidelity);
        suite.run("distribution oracles", 5 * MINUTE, distribution_oracles);
        suite.run("mean-field correctness", MINUTE, mean_field_correctness);
        suite.run("generative recovery", 15 * MINUTE, generative_recovery);
    }
    let news = [
        "20News perplexity (iTM-VAE-Prod K=200)",
        "20News coherence ordering",
        "hyper-prior adaptation across class subsets",
        "coverage grows with class count",
        "hierarchical sparsity and effective topics",
    ];
    if ignored {
        news_reproduction(&mut suite);
    } else {
        news.iter().for_each(|n| suite.ignored(n));
    }
    println!("acceptance: {} failure(s)", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
