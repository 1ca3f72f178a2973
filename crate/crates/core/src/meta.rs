//! Episodic sampling and bi-level (MAML-style) meta-training.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, ScoredItem, Scores};
use crate::model::{Example, Model};
use crate::params::{Bound, GradMap, Params};
use crate::text::{Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f32,
    pub outer_lr: f32,
    pub adaptation_steps: usize,
    pub meta_batch: usize,
    pub first_order: bool,
    pub k_way: usize,
    pub n_shot: usize,
    pub q_query: usize,
    pub seed: u64,
    pub max_meta_iters: u64,
    /// Global-norm clip applied to the outer gradient; `null` disables it.
    pub clip_norm: Option<f64>,
    pub finetune_steps: usize,
    /// Fine-tuning rate; defaults to `inner_lr`.
    pub finetune_lr: Option<f32>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            adaptation_steps: 3,
            meta_batch: 4,
            first_order: false,
            k_way: 3,
            n_shot: 10,
            q_query: 5,
            seed: 0,
            max_meta_iters: 1000,
            clip_norm: Some(10.0),
            finetune_steps: 10,
            finetune_lr: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("inner_lr and outer_lr must be positive".into()));
        }
        if self.k_way == 0 || self.n_shot == 0 || self.q_query == 0 || self.meta_batch == 0 {
            return Err(Error::Config("k_way, n_shot, q_query and meta_batch must be at least 1".into()));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn inner(&self) -> InnerLoop {
        InnerLoop {
            lr: self.inner_lr,
            steps: self.adaptation_steps,
            first_order: self.first_order,
        }
    }

    pub fn finetune_lr(&self) -> f32 {
        self.finetune_lr.unwrap_or(self.inner_lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoop {
    pub lr: f32,
    pub steps: usize,
    pub first_order: bool,
}

/// A differentiable loss over a batch of items.
pub trait Objective: Sync {
    type Item: Sync;
    fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&Self::Item]) -> Result<Var<'t>>;
}

impl Objective for Model {
    type Item = Example;
    fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&Example]) -> Result<Var<'t>> {
        Model::loss(self, tape, p, batch)
    }
}

/// Examples indexed by category.
#[derive(Clone, Debug, Default)]
pub struct TaskPool {
    pub examples: Vec<Example>,
    pub by_category: BTreeMap<usize, Vec<usize>>,
}

impl TaskPool {
    pub fn new(examples: Vec<Example>) -> Self {
        let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            by_category.entry(e.category).or_default().push(i);
        }
        TaskPool {
            examples,
            by_category,
        }
    }

    pub fn categories(&self) -> Vec<usize> {
        self.by_category.keys().copied().collect()
    }

    pub fn refs(&self, idx: &[usize]) -> Vec<&Example> {
        idx.iter().map(|&i| &self.examples[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: u64,
    pub categories: Vec<usize>,
    /// Indices into the pool's examples.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws `k_way` categories, then `n_shot` support and `q_query` query
/// examples per category, all without replacement. Query examples never
/// share an image with the support set.
pub fn sample_episode(
    pool: &TaskPool,
    cfg: &MetaConfig,
    task_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let need = cfg.n_shot + cfg.q_query;
    if let Some((c, idx)) = pool.by_category.iter().find(|(_, v)| v.len() < need) {
        return Err(Error::Data(format!(
            "category {c} has {} examples, needs {need} for {}-shot with {} queries",
            idx.len(),
            cfg.n_shot,
            cfg.q_query
        )));
    }
    let cats = pool.categories();
    if cats.len() < cfg.k_way {
        return Err(Error::Data(format!(
            "{} categories available for a {}-way episode",
            cats.len(),
            cfg.k_way
        )));
    }
    let chosen: Vec<usize> = cats.choose_multiple(rng, cfg.k_way).copied().collect();
    let mut shuffled = Vec::with_capacity(chosen.len());
    let mut support = Vec::new();
    for c in &chosen {
        let mut idx = pool.by_category[c].clone();
        idx.shuffle(rng);
        support.extend_from_slice(&idx[..cfg.n_shot]);
        shuffled.push(idx);
    }
    let support_images: HashSet<&str> = support
        .iter()
        .map(|&i| pool.examples[i].image_id.as_str())
        .collect();
    let mut query = Vec::new();
    for (c, idx) in chosen.iter().zip(&shuffled) {
        let picked: Vec<usize> = idx[cfg.n_shot..]
            .iter()
            .copied()
            .filter(|&i| !support_images.contains(pool.examples[i].image_id.as_str()))
            .take(cfg.q_query)
            .collect();
        if picked.len() < cfg.q_query {
            return Err(Error::Data(format!(
                "category {c} lacks {} query examples on images outside the support set",
                cfg.q_query
            )));
        }
        query.extend(picked);
    }
    Ok(Episode {
        task_id,
        categories: chosen,
        support,
        query,
    })
}

/// Episode sampler stream for a given training iteration; independent of
/// earlier iterations so that resumed runs draw the same tasks.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

/// `steps` gradient steps on the support loss. With `first_order` the step
/// directions are constants; otherwise the whole update chain stays on the
/// tape so the outer gradient can pass through it.
pub fn inner_adapt<'t, O: Objective>(
    tape: &'t Tape,
    obj: &O,
    p: &Bound<'t>,
    support: &[&O::Item],
    inner: &InnerLoop,
) -> Result<Bound<'t>> {
    let mut cur = p.clone();
    for _ in 0..inner.steps {
        let loss = obj.loss(tape, &cur, support)?;
        let names = cur.names();
        let vars = cur.vars();
        let grads = tape.grad(loss, &vars, !inner.first_order)?;
        let mut next = Vec::with_capacity(vars.len());
        for ((name, v), g) in names.into_iter().zip(&vars).zip(&grads) {
            next.push((name, v.sub(&g.scale(inner.lr)?)?));
        }
        cur = Bound::from_pairs(next);
    }
    Ok(cur)
}

/// Support and query items of one task.
#[derive(Clone, Debug)]
pub struct TaskData<'a, T> {
    pub support: Vec<&'a T>,
    pub query: Vec<&'a T>,
}

impl<'a> TaskData<'a, Example> {
    pub fn from_episode(pool: &'a TaskPool, ep: &Episode) -> Self {
        TaskData {
            support: pool.refs(&ep.support),
            query: pool.refs(&ep.query),
        }
    }
}

fn episode_gradient<O: Objective>(
    obj: &O,
    params: &Params,
    task: &TaskData<'_, O::Item>,
    inner: &InnerLoop,
) -> Result<(GradMap, f64)> {
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let adapted = inner_adapt(&tape, obj, &p, &task.support, inner)?;
    let loss = obj.loss(&tape, &adapted, &task.query)?;
    let value = loss.value().item() as f64;
    Ok((GradMap::from_backward(&tape, loss, &p)?, value))
}

/// Gradient of the summed query losses, each taken after adapting on the
/// task's support set. Tasks run in parallel and are summed in task order.
/// Returns the gradient and the per-task query losses.
pub fn meta_gradient<O: Objective>(
    obj: &O,
    params: &Params,
    tasks: &[TaskData<'_, O::Item>],
    inner: &InnerLoop,
) -> Result<(GradMap, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::Data("meta_gradient needs at least one episode".into()));
    }
    let parts: Vec<(GradMap, f64)> = tasks
        .par_iter()
        .map(|t| episode_gradient(obj, params, t, inner))
        .collect::<Result<_>>()?;
    let mut total = GradMap::new();
    let mut losses = Vec::with_capacity(parts.len());
    for (g, l) in &parts {
        total.accumulate(g)?;
        losses.push(*l);
    }
    Ok((total, losses))
}

/// Query loss after adaptation, averaged over tasks; no outer gradient.
pub fn adapted_query_loss<O: Objective>(
    obj: &O,
    params: &Params,
    tasks: &[TaskData<'_, O::Item>],
    inner: &InnerLoop,
) -> Result<f64> {
    let inner = InnerLoop {
        first_order: true,
        ..*inner
    };
    let losses: Vec<f64> = tasks
        .par_iter()
        .map(|t| {
            let tape = Tape::new();
            let p = params.bind(&tape, true);
            let adapted = inner_adapt(&tape, obj, &p, &t.support, &inner)?;
            Ok(obj.loss(&tape, &adapted, &t.query)?.value().item() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub iter: u64,
    pub mean_query_loss: f64,
    pub wallclock_ms: f64,
}

/// One outer update on `meta_batch` freshly sampled episodes.
pub fn meta_step(
    model: &Model,
    params: &mut Params,
    pool: &TaskPool,
    cfg: &MetaConfig,
    iter: u64,
) -> Result<f64> {
    let mut rng = iteration_rng(cfg.seed, iter);
    let episodes: Vec<Episode> = (0..cfg.meta_batch as u64)
        .map(|j| sample_episode(pool, cfg, iter * cfg.meta_batch as u64 + j, &mut rng))
        .collect::<Result<_>>()?;
    let tasks: Vec<_> = episodes
        .iter()
        .map(|e| TaskData::from_episode(pool, e))
        .collect();
    let (mut grads, losses) = meta_gradient(model, params, &tasks, &cfg.inner())?;
    if let Some(c) = cfg.clip_norm {
        grads.clip_global_norm(c);
    }
    params.sgd_step(&grads, cfg.outer_lr)?;
    if !params.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite parameters after meta iteration {iter}"
        )));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs outer iterations `start..cfg.max_meta_iters`, calling `on_iter` after
/// each update with the log row and the current parameters.
pub fn meta_train(
    model: &Model,
    mut params: Params,
    pool: &TaskPool,
    cfg: &MetaConfig,
    start: u64,
    mut on_iter: impl FnMut(&MetaLogRow, &Params) -> Result<()>,
) -> Result<Params> {
    cfg.validate()?;
    for iter in start..cfg.max_meta_iters {
        let t0 = Instant::now();
        let loss = meta_step(model, &mut params, pool, cfg, iter)?;
        let row = MetaLogRow {
            iter,
            mean_query_loss: loss,
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_iter(&row, &params)?;
    }
    Ok(params)
}

/// Plain gradient descent on one batch for `steps` steps.
pub fn finetune(
    model: &Model,
    params: &Params,
    batch: &[&Example],
    steps: usize,
    lr: f32,
) -> Result<Params> {
    let mut p = params.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let bound = p.bind(&tape, true);
        let loss = model.loss(&tape, &bound, batch)?;
        let grads = GradMap::from_backward(&tape, loss, &bound)?;
        p.sgd_step(&grads, lr)?;
    }
    if !p.is_finite() {
        return Err(Error::Diverged(
            "non-finite parameters after fine-tuning".into(),
        ));
    }
    Ok(p)
}

/// Placeholder token for an empty generation, so it scores zero instead of
/// being rejected by the metrics.
pub const EMPTY_CANDIDATE: &str = "<empty>";

pub fn question_tokens(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .filter(|&&t| t != BOS && t != EOS && t != PAD)
        .map(|&t| vocab.token(t).to_string())
        .collect()
}

/// Greedy generations for `items` paired with their gold questions.
pub fn generate_corpus(
    model: &Model,
    params: &Params,
    items: &[&Example],
    vocab: &Vocabulary,
) -> Result<Vec<ScoredItem>> {
    items
        .par_iter()
        .map(|e| {
            let mut candidate = question_tokens(vocab, &model.generate(params, e)?);
            if candidate.is_empty() {
                candidate.push(EMPTY_CANDIDATE.into());
            }
            Ok(ScoredItem {
                candidate,
                references: vec![question_tokens(vocab, &e.question)],
            })
        })
        .collect()
}

/// Adapts on the episode's support set, then scores greedy generations for
/// its query set.
pub fn finetune_and_eval(
    model: &Model,
    params: &Params,
    pool: &TaskPool,
    episode: &Episode,
    steps: usize,
    lr: f32,
    vocab: &Vocabulary,
) -> Result<Scores> {
    if episode.query.is_empty() {
        return Err(Error::Data("episode has an empty query set".into()));
    }
    let task = TaskData::from_episode(pool, episode);
    let adapted = finetune(model, params, &task.support, steps, lr)?;
    let corpus = generate_corpus(model, &adapted, &task.query, vocab)?;
    metrics::score_corpus(&corpus)
}
