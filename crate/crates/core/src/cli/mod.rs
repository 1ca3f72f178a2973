//! Command line front end.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::dataset::{self, CategoryMap, Manifest, SplitSpec};
use crate::encoders::{cnn_output_hw, init_cnn, FeatureStore};
use crate::error::{Error, Result};
use crate::meta::{self, Episode, TaskData, TaskPool};
use crate::metrics::{self, MetricOptions, PredictionLine, Scores};
use crate::model::{AnswerEmbedding, Model};
use crate::params::{load_checkpoint, save_checkpoint, Params};
use crate::pipeline::{Corpus, FeatureBackend, Side};
use crate::selfsup::{self, HEAD_PREFIX};
use crate::tensor::io;
use crate::text::Vocabulary;
use crate::toyset::{self, ToySpec};

pub use config::{Backend, RunConfig};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_ECHO: &str = "config.json";
pub const SCORES_FILE: &str = "scores.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";

const CNN_PREFIX: &str = "cnn.";

#[derive(Debug, Parser)]
#[command(name = "metaquill", version, about = "Few-shot visual question generation")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "METAQUILL_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge, recategorise and split annotation manifests.
    Curate(CurateArgs),
    /// Per-category counts and variety ratio of a manifest.
    Stats(StatsArgs),
    /// Render the synthetic shapes corpus.
    GenToyset(ToyArgs),
    /// Joint question-generation and rotation pretraining.
    Pretrain(TrainArgs),
    /// Meta-train on episodes from the training categories.
    MetaTrain(TrainArgs),
    /// Fine-tune on test episodes and score the generated questions.
    FinetuneEval(EvalArgs),
    /// Score a predictions JSONL file.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// One or two manifests; the second is merged into the first.
    #[arg(long = "input", required = true, num_args = 1..=2)]
    pub inputs: Vec<PathBuf>,
    /// Category map JSON (ordered rule array).
    #[arg(long, conflicts_with = "vqg23")]
    pub map: Option<PathBuf>,
    /// Use the bundled 23-category map.
    #[arg(long)]
    pub vqg23: bool,
    /// Split spec JSON; writes train.jsonl and test.jsonl.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Keep the first image_ref when inputs disagree.
    #[arg(long)]
    pub override_conflicts: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for stats.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub categories: usize,
    #[arg(long, default_value_t = 60)]
    pub images_per_cat: usize,
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides `paths.init_checkpoint`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Metric options from a run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Curate(a) => cmd_curate(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::GenToyset(a) => cmd_gen_toyset(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::MetaTrain(a) => cmd_meta_train(&a),
        Command::FinetuneEval(a) => cmd_finetune_eval(&a),
        Command::Score(a) => cmd_score(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable row"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("serializable echo"));
}

pub fn cmd_curate(a: &CurateArgs) -> Result<()> {
    echo(&json!({
        "command": "curate",
        "inputs": a.inputs,
        "map": a.map,
        "vqg23": a.vqg23,
        "split": a.split,
        "override_conflicts": a.override_conflicts,
        "out": a.out,
    }));
    let mut duplicates = 0;
    let mut merged: Option<Manifest> = None;
    for path in &a.inputs {
        let (m, report) = Manifest::load(path)?;
        duplicates += report.duplicates;
        merged = Some(match merged {
            None => m,
            Some(prev) => {
                let both = dataset::merge_dedup(&prev, &m, a.override_conflicts)?;
                duplicates += prev.len() + m.len() - both.len();
                both
            }
        });
    }
    let merged = merged.expect("at least one input");
    let map = match (&a.map, a.vqg23) {
        (Some(p), _) => Some(CategoryMap::load(p)?),
        (None, true) => Some(CategoryMap::vqg23()),
        (None, false) => None,
    };
    let curated = match map {
        Some(map) => dataset::recategorize(&merged, &map)?,
        None => merged,
    };
    create_dir(&a.out)?;
    curated.save(a.out.join(toyset::MANIFEST_FILE))?;
    let mut report = json!({ "records": curated.len(), "duplicates": duplicates });
    if let Some(path) = &a.split {
        let spec = SplitSpec::load(path)?;
        let (train, test, split) = dataset::split(&curated, &spec)?;
        train.save(a.out.join("train.jsonl"))?;
        test.save(a.out.join("test.jsonl"))?;
        write_json(&a.out.join(toyset::SPLIT_FILE), &spec)?;
        report["train"] = json!(train.len());
        report["test"] = json!(test.len());
        report["straddling_images"] = json!(split.straddling_images);
        report["dropped"] = json!(split.dropped.len());
    }
    write_json(&a.out.join("curate_report.json"), &report)
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    echo(&json!({ "command": "stats", "manifest": a.manifest, "out": a.out }));
    let (m, _) = Manifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("stats.json"), &dataset::stats(&m))
}

pub fn cmd_gen_toyset(a: &ToyArgs) -> Result<()> {
    let mut echoed = serde_json::to_value(a).expect("serializable args");
    echoed["command"] = json!("gen-toyset");
    echo(&echoed);
    let spec = ToySpec {
        n_categories: a.categories,
        images_per_cat: a.images_per_cat,
        grid: a.grid,
        seed: a.seed,
    };
    let m = toyset::generate_toyset(&spec, &a.out)?;
    let failures = toyset::check_toyset(&a.out)?;
    if failures > 0 {
        return Err(Error::Data(format!(
            "checker rejected {failures} of {} generated records",
            m.len()
        )));
    }
    log::info!("wrote {} records to {}", m.len(), a.out.display());
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.set_seed(s);
    }
    if let Some(c) = &run.corpus {
        cfg.paths.corpus = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn start_run(cfg: &RunConfig, out: &Path, command: &str) -> Result<serde_json::Value> {
    let resolved = cfg.to_json();
    echo(&json!({ "command": command, "config": resolved }));
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO), &resolved)?;
    Ok(resolved)
}

/// Stream 0 initialises the generator, 1 the CNN, 2 the rotation head,
/// 3 draws evaluation episodes.
fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_model(cfg: &RunConfig, corpus: &Corpus, channels: usize) -> Result<(Model, Option<Vocabulary>)> {
    let model = Model::new(
        cfg.model.clone(),
        corpus.vocab.len(),
        corpus.categories.len(),
        channels,
    )?;
    match &cfg.model.answer_embedding {
        AnswerEmbedding::Scratch => Ok((model, None)),
        AnswerEmbedding::Pretrained { table, vocab } => {
            let answer_vocab = Vocabulary::load(vocab)?;
            let table = io::read(table)?;
            if table.shape()[0] != answer_vocab.len() {
                return Err(Error::Config(format!(
                    "answer table has {} rows for {} vocabulary entries",
                    table.shape()[0],
                    answer_vocab.len()
                )));
            }
            Ok((model.with_answer_table(table)?, Some(answer_vocab)))
        }
    }
}

/// Errors unless `got` has exactly the names and shapes of `want`.
fn check_matches(want: &Params, got: &Params, what: &str) -> Result<()> {
    let names = |p: &Params| p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    if names(want) != names(got) {
        return Err(Error::Config(format!(
            "{what} does not match the configured model"
        )));
    }
    Ok(())
}

fn fresh_cnn(cfg: &RunConfig) -> Params {
    let mut cnn = Params::new();
    init_cnn(&mut cnn, cfg.encoder.widths, cfg.encoder.channels, &mut seeded(cfg.seed, 1));
    cnn
}

/// Generator parameters, from the init checkpoint when one is configured.
fn initial_params(cfg: &RunConfig, model: &Model) -> Result<Params> {
    let fresh = model.init_params(&mut seeded(cfg.seed, 0))?;
    match &cfg.paths.init_checkpoint {
        None => Ok(fresh),
        Some(dir) => {
            let (mut p, _) = load_checkpoint(dir)?;
            p.take_prefix(HEAD_PREFIX);
            p.take_prefix(CNN_PREFIX);
            check_matches(&fresh, &p, "init checkpoint")?;
            Ok(p)
        }
    }
}

/// The CNN from the init checkpoint, or a fresh one.
fn initial_cnn(cfg: &RunConfig) -> Result<Params> {
    if let Some(dir) = &cfg.paths.init_checkpoint {
        let cnn = load_checkpoint(dir)?.0.take_prefix(CNN_PREFIX);
        if !cnn.is_empty() {
            return Ok(cnn);
        }
    }
    Ok(fresh_cnn(cfg))
}

fn backend(cfg: &RunConfig, cnn: &Params) -> Result<FeatureBackend> {
    Ok(match cfg.encoder.backend {
        Backend::TinyCnn => FeatureBackend::TinyCnn(cnn.clone()),
        Backend::Precomputed => FeatureBackend::Precomputed(FeatureStore::open(
            cfg.encoder.feature_dir.as_ref().expect("validated"),
        )?),
    })
}

/// Feature-map examples for one side plus the model sized to them.
fn load_side(
    cfg: &RunConfig,
    corpus: &Corpus,
    cnn: &Params,
    side: Side,
) -> Result<(Model, TaskPool)> {
    let channels = match cfg.encoder.backend {
        Backend::TinyCnn => cfg.encoder.channels,
        Backend::Precomputed => 0,
    };
    let (_, answer_vocab) = build_model(cfg, corpus, channels.max(1))?;
    let examples = corpus.examples(side, &backend(cfg, cnn)?, cfg.model.max_len, answer_vocab.as_ref())?;
    let first = examples
        .first()
        .ok_or_else(|| Error::Data(format!("{side:?} split is empty")))?;
    let (model, _) = build_model(cfg, corpus, first.image.shape()[2])?;
    Ok((model, TaskPool::new(examples)))
}

/// Reads `<out>/log.jsonl` rows with `iter < start`.
fn resumed_log(out: &Path, start: u64) -> Result<Vec<serde_json::Value>> {
    let path = out.join(LOG_FILE);
    if start == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if row["iter"].as_u64().is_some_and(|it| it < start) {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Appends log rows and writes periodic checkpoints.
struct Recorder {
    out: PathBuf,
    log: fs::File,
    every: u64,
    seed: u64,
    config: serde_json::Value,
}

impl Recorder {
    fn new(out: &Path, start: u64, every: u64, seed: u64, config: serde_json::Value) -> Result<Self> {
        let kept = resumed_log(out, start)?;
        let path = out.join(LOG_FILE);
        write_jsonl(&path, &kept)?;
        let log = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Recorder {
            out: out.to_path_buf(),
            log,
            every,
            seed,
            config,
        })
    }

    fn row(&mut self, iter: u64, row: &impl Serialize, params: impl FnOnce() -> Params) -> Result<()> {
        let line = serde_json::to_string(row).expect("serializable row");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.out.join(LOG_FILE), e))?;
        if self.every > 0 && (iter + 1) % self.every == 0 {
            self.checkpoint(&params(), iter + 1)?;
        }
        Ok(())
    }

    fn checkpoint(&self, params: &Params, step: u64) -> Result<()> {
        save_checkpoint(self.out.join(CHECKPOINT_DIR), params, step, self.seed, self.config.clone())
    }
}

/// Parameters and start iteration for `--resume`, or `None` for a fresh run.
fn resume_point(out: &Path, resume: bool) -> Result<Option<(Params, u64)>> {
    if !resume {
        return Ok(None);
    }
    let (p, manifest) = load_checkpoint(out.join(CHECKPOINT_DIR))?;
    Ok(Some((p, manifest.step)))
}

pub fn cmd_pretrain(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    if let Some(i) = &a.init {
        cfg.paths.init_checkpoint = Some(i.clone());
    }
    if cfg.encoder.backend != Backend::TinyCnn {
        return Err(Error::Config("pretraining needs the tiny_cnn encoder backend".into()));
    }
    let resolved = start_run(&cfg, &a.run.out, "pretrain")?;
    let corpus = Corpus::open(cfg.corpus()?)?;
    let (model, answer_vocab) = build_model(&cfg, &corpus, cfg.encoder.channels)?;
    let data = corpus.examples(Side::Train, &FeatureBackend::Raw, cfg.model.max_len, answer_vocab.as_ref())?;
    let first = data
        .first()
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let img = first.image.shape().to_vec();
    let (start, params) = match resume_point(&a.run.out, a.resume)? {
        Some((p, step)) => (step, p),
        None => {
            let mut p = initial_params(&cfg, &model)?;
            p.extend(initial_cnn(&cfg)?);
            if cfg.pretrain.rotation_weight() > 0.0 {
                selfsup::init_rotation_head(
                    &mut p,
                    cfg.encoder.channels,
                    cfg.pretrain.head_channels,
                    cnn_output_hw(img[1], img[2]),
                    &mut seeded(cfg.seed, 2),
                );
            }
            (0, p)
        }
    };
    let mut rec = Recorder::new(&a.run.out, start, cfg.checkpoint_every, cfg.seed, resolved)?;
    let params = selfsup::pretrain_joint(&model, params, &data, &cfg.pretrain, start, |row, p| {
        rec.row(row.iter, row, || p.clone())
    })?;
    rec.checkpoint(&params, cfg.pretrain.iters.max(start))?;
    let mut summary = json!({ "iters": cfg.pretrain.iters, "seed": cfg.seed });
    if params.contains("rot.conv.w") {
        let test = corpus.examples(Side::Test, &FeatureBackend::Raw, cfg.model.max_len, answer_vocab.as_ref())?;
        let images: Vec<_> = test.iter().map(|e| e.image.as_ref()).collect();
        summary["heldout_rotation_accuracy"] = json!(selfsup::rotation_accuracy(&params, &images)?);
    }
    write_json(&a.run.out.join("summary.json"), &summary)
}

pub fn cmd_meta_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    if let Some(i) = &a.init {
        cfg.paths.init_checkpoint = Some(i.clone());
    }
    let resolved = start_run(&cfg, &a.run.out, "meta-train")?;
    let corpus = Corpus::open(cfg.corpus()?)?;
    let resumed = resume_point(&a.run.out, a.resume)?;
    let (start, params, cnn) = match resumed {
        Some((mut p, step)) => {
            let cnn = p.take_prefix(CNN_PREFIX);
            (step, Some(p), cnn)
        }
        None => (0, None, initial_cnn(&cfg)?),
    };
    let (model, pool) = load_side(&cfg, &corpus, &cnn, Side::Train)?;
    let params = match params {
        Some(p) => p,
        None => initial_params(&cfg, &model)?,
    };
    check_matches(&model.init_params(&mut seeded(cfg.seed, 0))?, &params, "parameters")?;
    let with_cnn = |p: &Params| {
        let mut all = p.clone();
        all.extend(cnn.clone());
        all
    };
    let mut rec = Recorder::new(&a.run.out, start, cfg.checkpoint_every, cfg.seed, resolved)?;
    let params = meta::meta_train(&model, params, &pool, &cfg.meta, start, |row, p| {
        rec.row(row.iter, row, || with_cnn(p))
    })?;
    rec.checkpoint(&with_cnn(&params), cfg.meta.max_meta_iters.max(start))
}

fn eval_episodes(cfg: &RunConfig, pool: &TaskPool) -> Result<Vec<Episode>> {
    let mut rng = seeded(cfg.seed, 3);
    (0..cfg.eval.episodes as u64)
        .map(|i| meta::sample_episode(pool, &cfg.meta, i, &mut rng))
        .collect()
}

#[derive(Serialize)]
struct EpisodeScores {
    task_id: u64,
    categories: Vec<String>,
    scores: Scores,
}

pub fn cmd_finetune_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    cfg.paths.init_checkpoint = Some(a.checkpoint.clone());
    let resolved = start_run(&cfg, &a.run.out, "finetune-eval")?;
    let corpus = Corpus::open(cfg.corpus()?)?;
    let (mut params, _) = load_checkpoint(&a.checkpoint)?;
    params.take_prefix(HEAD_PREFIX);
    let cnn = params.take_prefix(CNN_PREFIX);
    let cnn = if cnn.is_empty() { fresh_cnn(&cfg) } else { cnn };
    let (model, pool) = load_side(&cfg, &corpus, &cnn, Side::Test)?;
    check_matches(&model.init_params(&mut seeded(cfg.seed, 0))?, &params, "checkpoint")?;

    let mut predictions = Vec::new();
    let mut per_episode = Vec::new();
    let mut total = Scores::default();
    for ep in eval_episodes(&cfg, &pool)? {
        let task = TaskData::from_episode(&pool, &ep);
        let adapted = meta::finetune(&model, &params, &task.support, cfg.meta.finetune_steps, cfg.meta.finetune_lr())?;
        let items = meta::generate_corpus(&model, &adapted, &task.query, &corpus.vocab)?;
        let scores = metrics::score_corpus_with(&items, &cfg.metrics)?;
        for (j, (e, item)) in task.query.iter().zip(&items).enumerate() {
            predictions.push(PredictionLine {
                id: format!("{}/{}/{}", ep.task_id, j, e.image_id),
                candidate: item.candidate.join(" "),
                references: item.references.iter().map(|r| r.join(" ")).collect(),
            });
        }
        total = Scores {
            bleu4: total.bleu4 + scores.bleu4,
            meteor_s: total.meteor_s + scores.meteor_s,
            rouge_l: total.rouge_l + scores.rouge_l,
            cider: total.cider + scores.cider,
        };
        per_episode.push(EpisodeScores {
            task_id: ep.task_id,
            categories: ep.categories.iter().map(|&c| corpus.categories[c].clone()).collect(),
            scores,
        });
    }
    let mean = total.scaled(1.0 / per_episode.len() as f64);
    write_jsonl(&a.run.out.join(PREDICTIONS_FILE), &predictions)?;
    write_json(
        &a.run.out.join(SCORES_FILE),
        &json!({
            "scores": mean,
            "scores_x100": mean.scaled(100.0),
            "episodes": per_episode,
            "seed": cfg.seed,
            "config": resolved,
        }),
    )
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let opts = match &a.config {
        Some(p) => RunConfig::load(p)?.metrics,
        None => MetricOptions::default(),
    };
    opts.validate()?;
    echo(&json!({ "command": "score", "predictions": a.predictions, "metrics": opts, "out": a.out }));
    let lines = metrics::load_predictions(&a.predictions)?;
    let corpus = metrics::corpus_from_predictions(&lines);
    let scores = metrics::score_corpus_with(&corpus, &opts)?;
    let items = metrics::score_items(&corpus, &opts)?;
    create_dir(&a.out)?;
    let rows: Vec<_> = lines
        .iter()
        .zip(&items)
        .map(|(l, s)| json!({ "id": l.id, "scores": s }))
        .collect();
    write_jsonl(&a.out.join(ITEMS_FILE), &rows)?;
    write_json(
        &a.out.join(SCORES_FILE),
        &json!({
            "scores": scores,
            "scores_x100": scores.scaled(100.0),
            "items": lines.len(),
            "metrics": opts,
        }),
    )
}
