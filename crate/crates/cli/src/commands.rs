use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use topicvae::corpus::{load_bow, load_vocabulary, BowDocument, Corpus, Split, SplitManifest, Vocabulary};
use topicvae::evaluation::{self, average_reports, topics_to_cover, write_curve_csv, EvalOptions, Report};
use topicvae::models::{ModelError, TopicModel, Variant};
use topicvae::seeding;
use topicvae::stochastic::gamma_expectations;
use topicvae::training::{fit, FitOptions, FitResult};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

struct Data {
    train: Corpus,
    valid: Corpus,
    test: Option<Corpus>,
    split: Option<SplitManifest>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let vocab = load_vocabulary(&d.vocab)?;
    let (full, _) = load_bow(&d.train, &vocab, Split::Train)?;
    let (train, valid, split) = match &d.valid {
        Some(path) => (full, load_bow(path, &vocab, Split::Valid)?.0, None),
        None => {
            let m = SplitManifest::random(full.len(), cfg.schedule.seed, d.valid_fraction, 0.0)?;
            (
                full.subset(&m.train, Split::Train)?,
                full.subset(&m.valid, Split::Valid)?,
                Some(m),
            )
        }
    };
    let test = d
        .test
        .as_ref()
        .map(|p| load_bow(p, &vocab, Split::Test))
        .transpose()?
        .map(|c| c.0);
    Ok(Data {
        train,
        valid,
        test,
        split,
    })
}

fn train_in(
    cfg: &RunConfig,
    variant: Option<Variant>,
    train: &Corpus,
    valid: &Corpus,
    dir: &Path,
) -> Result<FitResult> {
    train.ensure_trainable()?;
    let mut model_cfg = cfg.model_config(train.vocab_size())?;
    if let Some(v) = variant {
        model_cfg.variant = v;
    }
    create_dir(dir)?;
    let model = TopicModel::new(model_cfg, &mut seeding::stream(cfg.schedule.seed, seeding::INIT))?;
    let meta = json!({
        "run_config": cfg.normalized,
        "run_config_hash": cfg.hash(),
        "vocab": absolute(&cfg.data.vocab),
        "train": absolute(&cfg.data.train),
    });
    let opts = FitOptions {
        valid: (!valid.is_empty()).then_some(valid),
        out_dir: Some(dir),
        meta,
    };
    log::info!(
        "training {} on {} documents into {}",
        model.config().variant.name(),
        train.len(),
        dir.display()
    );
    let result = fit(model, train, &cfg.schedule, opts)?;
    log::info!(
        "best epoch {} of {}{}",
        result.best_epoch,
        result.log.len(),
        if result.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(result)
}

fn write_report(dir: &Path, report: &Report, curves: bool) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    if curves {
        write_curve_csv(&dir.join("coverage.csv"), &report.coverage)?;
        write_curve_csv(&dir.join("sparsity.csv"), &report.sparsity_log)?;
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub curves: bool,
}

pub fn train(args: TrainArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(args.config, args.seed, args.out)?;
    let data = load_data(&cfg)?;
    let dir = cfg.data.out_dir.clone();
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), &cfg.normalized)?;
    if let Some(split) = &data.split {
        split.save(dir.join("split.json"))?;
    }
    let result = train_in(&cfg, None, &data.train, &data.valid, &dir)?;
    let eval = data.test.as_ref().unwrap_or(&data.valid);
    let opts = EvalOptions {
        samples: cfg.data.eval_samples,
        seed: cfg.schedule.seed,
        ..Default::default()
    };
    let mut report = evaluation::evaluate(&result.model, eval, &data.train, opts)?;
    report.config_hash = Some(cfg.hash());
    write_report(&dir, &report, args.curves)?;
    Ok(dir)
}

pub struct EvalArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub corpus: &'a Path,
    pub vocab: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub samples: usize,
    pub curves: bool,
}

fn meta_path(meta: &Value, key: &str) -> Option<PathBuf> {
    meta.get(key).and_then(Value::as_str).map(PathBuf::from)
}

fn load_checked(path: &Path, expected_hash: Option<&str>) -> Result<(TopicModel, Value)> {
    let (model, header) = TopicModel::load(path)?;
    let recorded = header.meta.get("run_config_hash").and_then(Value::as_str).unwrap_or("");
    if let Some(expected) = expected_hash {
        if expected != recorded {
            return Err(CliError::HashMismatch {
                config: expected.to_string(),
                checkpoint: recorded.to_string(),
            });
        }
    }
    Ok((model, header.meta))
}

fn check_vocab(model: &TopicModel, vocab: &Vocabulary) -> Result<()> {
    let expected = model.config().vocab_size;
    if vocab.size() != expected {
        return Err(ModelError::VocabMismatch {
            expected,
            got: vocab.size(),
        }
        .into());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<PathBuf> {
    let first = args
        .checkpoints
        .first()
        .ok_or_else(|| CliError::Usage("at least one --checkpoint is required".into()))?;
    let expected = args
        .config
        .map(|c| RunConfig::load(c, args.seed, None).map(|c| c.hash()))
        .transpose()?;
    let mut reports = Vec::new();
    let mut corpora: Option<(Corpus, Corpus)> = None;
    let mut hash = None;
    for path in args.checkpoints {
        let (model, meta) = load_checked(path, expected.as_deref())?;
        if corpora.is_none() {
            let vocab_path = args
                .vocab
                .map(Path::to_path_buf)
                .or_else(|| meta_path(&meta, "vocab"))
                .ok_or_else(|| CliError::Usage("no --vocab given and the checkpoint records none".into()))?;
            let vocab = load_vocabulary(&vocab_path)?;
            check_vocab(&model, &vocab)?;
            let reference_path = args
                .reference
                .map(Path::to_path_buf)
                .or_else(|| meta_path(&meta, "train"))
                .ok_or_else(|| CliError::Usage("no --reference given and the checkpoint records none".into()))?;
            let (eval, _) = load_bow(args.corpus, &vocab, Split::Test)?;
            let (reference, _) = load_bow(&reference_path, &vocab, Split::Train)?;
            corpora = Some((eval, reference));
            hash = meta.get("run_config_hash").and_then(Value::as_str).map(str::to_string);
        }
        let (eval, reference) = corpora.as_ref().expect("loaded above");
        check_vocab(&model, &eval.vocabulary)?;
        let opts = EvalOptions {
            samples: args.samples,
            seed: args.seed.unwrap_or(0),
            ..Default::default()
        };
        reports.push(evaluation::evaluate(&model, eval, reference, opts)?);
    }
    let mut report = average_reports(&reports).expect("at least one report");
    report.config_hash = hash;
    let dir = args
        .out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| first.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&dir)?;
    write_report(&dir, &report, args.curves)?;
    Ok(dir)
}

pub struct TopicsArgs<'a> {
    pub checkpoint: &'a Path,
    pub vocab: Option<&'a Path>,
    pub top: usize,
    pub out: Option<&'a Path>,
}

pub fn topics(args: TopicsArgs) -> Result<String> {
    let (model, meta) = load_checked(args.checkpoint, None)?;
    let vocab_path = args
        .vocab
        .map(Path::to_path_buf)
        .or_else(|| meta_path(&meta, "vocab"))
        .ok_or_else(|| CliError::Usage("no --vocab given and the checkpoint records none".into()))?;
    let vocab = load_vocabulary(&vocab_path)?;
    check_vocab(&model, &vocab)?;
    let top = evaluation::top_words(&model.bank(), args.top.min(vocab.size()))?;
    let mut out = String::new();
    for (k, words) in top.iter().enumerate() {
        let words: Vec<&str> = words.iter().map(|&w| vocab.token(w)).collect();
        out.push_str(&format!("{k}\t{}\n", words.join(" ")));
    }
    if let Some(dir) = args.out {
        create_dir(dir)?;
        let path = dir.join("topics.txt");
        fs::write(&path, &out).map_err(io_err(&path))?;
    }
    Ok(out)
}

pub struct SubsetsArgs<'a> {
    pub config: &'a Path,
    pub classes: &'a [usize],
    pub labels: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct SubsetRow {
    pub classes: usize,
    pub documents: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub e_alpha: f64,
    pub topics_90: usize,
}

#[derive(Debug, Serialize)]
pub struct SubsetSummary {
    pub rows: Vec<SubsetRow>,
    pub e_alpha_increasing: bool,
    pub coverage_increasing: bool,
}

fn apply_labels(corpus: Corpus, path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let labels: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if labels.len() != corpus.len() {
        return Err(CliError::Usage(format!(
            "{} has {} labels for {} documents",
            path.display(),
            labels.len(),
            corpus.len()
        )));
    }
    let docs = corpus
        .documents
        .iter()
        .zip(labels)
        .map(|(d, l)| BowDocument::from_counts(d.entries().to_vec(), Some(l.to_string())))
        .collect();
    Ok(Corpus::new(docs, corpus.vocabulary, corpus.split)?)
}

fn strictly_increasing<T: PartialOrd>(xs: impl Iterator<Item = T>) -> bool {
    let xs: Vec<T> = xs.collect();
    xs.windows(2).all(|w| w[1] > w[0])
}

pub fn subsets(args: SubsetsArgs) -> Result<SubsetSummary> {
    let cfg = RunConfig::load(args.config, args.seed, args.out)?;
    if let Some(v) = cfg.model.get("variant").and_then(Value::as_str) {
        if v != Variant::Hp.name() {
            return Err(CliError::Config(format!(
                "subsets trains the hp variant, config has variant={v}"
            )));
        }
    }
    if args.classes.is_empty() {
        return Err(CliError::Usage("--classes needs at least one count".into()));
    }
    let vocab = load_vocabulary(&cfg.data.vocab)?;
    let (mut full, _) = load_bow(&cfg.data.train, &vocab, Split::Train)?;
    if let Some(path) = args.labels {
        full = apply_labels(full, path)?;
    }
    let available = full.labels().len();
    if let Some(&n) = args.classes.iter().find(|&&n| n == 0 || n > available) {
        return Err(topicvae::corpus::CorpusError::NotEnoughClasses {
            requested: n,
            available,
        }
        .into());
    }
    let root = cfg.data.out_dir.clone();
    create_dir(&root)?;
    write_json(&root.join("config.json"), &cfg.normalized)?;

    let mut rows = Vec::new();
    for &n in args.classes {
        let sub = full.class_subset(n)?;
        let split = SplitManifest::random(sub.len(), cfg.schedule.seed, cfg.data.valid_fraction, 0.0)?;
        let train = sub.subset(&split.train, Split::Train)?;
        let valid = sub.subset(&split.valid, Split::Valid).unwrap_or_else(|_| train.clone());
        let dir = root.join(format!("classes-{n}"));
        let result = train_in(&cfg, Some(Variant::Hp), &train, &valid, &dir)?;
        split.save(dir.join("split.json"))?;
        let q = result.model.gamma_posterior().expect("hp variant");
        let summary = evaluation::posterior_summary(&result.model, &train)?;
        let coverage = evaluation::coverage_curve(&summary)?;
        write_curve_csv(&dir.join("coverage.csv"), &coverage)?;
        rows.push(SubsetRow {
            classes: n,
            documents: sub.len(),
            gamma1: q.shape,
            gamma2: q.rate,
            e_alpha: gamma_expectations(q).0,
            topics_90: topics_to_cover(&coverage, 0.9),
        });
    }

    let mut csv = String::from("classes,gamma1,gamma2,e_alpha,topics_90\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{}\n",
            r.classes, r.gamma1, r.gamma2, r.e_alpha, r.topics_90
        ));
    }
    let path = root.join("summary.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    let summary = SubsetSummary {
        e_alpha_increasing: strictly_increasing(rows.iter().map(|r| r.e_alpha)),
        coverage_increasing: strictly_increasing(rows.iter().map(|r| r.topics_90)),
        rows,
    };
    write_json(&root.join("summary.json"), &summary)?;
    Ok(summary)
}
