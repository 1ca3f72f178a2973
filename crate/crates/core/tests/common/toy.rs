//! Shared setup for the small synthetic-shapes experiments.

use metaquill::conditioning::ConditioningMode;
use metaquill::encoders::init_cnn;
use metaquill::meta::{self, Episode, MetaConfig, TaskPool};
use metaquill::model::{Model, ModelConfig, SideInfoUse};
use metaquill::pipeline::{Corpus, FeatureBackend, Side};
use metaquill::toyset::{generate_toyset, ToySpec};
use metaquill::Params;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CNN_WIDTHS: [usize; 3] = [8, 16, 16];
pub const CHANNELS: usize = 16;

pub struct ToyData {
    pub dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub cnn: Params,
    pub train: TaskPool,
    pub test: TaskPool,
}

pub fn toy_data(seed: u64, images_per_cat: usize) -> ToyData {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        images_per_cat,
        seed,
        ..ToySpec::default()
    };
    generate_toyset(&spec, dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let mut cnn = Params::new();
    init_cnn(&mut cnn, CNN_WIDTHS, CHANNELS, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee));
    let backend = FeatureBackend::TinyCnn(cnn.clone());
    let cfg = toy_model_config(SideInfoUse::Category);
    let train = TaskPool::new(corpus.examples(Side::Train, &backend, cfg.max_len, None).unwrap());
    let test = TaskPool::new(corpus.examples(Side::Test, &backend, cfg.max_len, None).unwrap());
    ToyData { dir, corpus, cnn, train, test }
}

pub fn toy_model_config(side_info: SideInfoUse) -> ModelConfig {
    ModelConfig {
        mode: ConditioningMode::ScaleShift,
        side_info,
        d_c: 16,
        d_a: 16,
        film_hidden: 32,
        d_h: 32,
        d_att: 32,
        d_p: 32,
        d_w: 16,
        max_len: 12,
        ..ModelConfig::default()
    }
}

pub fn toy_model(data: &ToyData, side_info: SideInfoUse) -> Model {
    Model::new(
        toy_model_config(side_info),
        data.corpus.vocab.len(),
        data.corpus.categories.len(),
        CHANNELS,
    )
    .unwrap()
}

pub fn toy_meta_config(seed: u64) -> MetaConfig {
    MetaConfig {
        inner_lr: 0.1,
        outer_lr: 0.05,
        adaptation_steps: 3,
        meta_batch: 4,
        first_order: false,
        k_way: 3,
        n_shot: 5,
        q_query: 5,
        seed,
        max_meta_iters: 200,
        clip_norm: Some(10.0),
        finetune_steps: 10,
        finetune_lr: None,
    }
}

/// A fixed set of episodes drawn with their own seed.
pub fn fixed_episodes(pool: &TaskPool, cfg: &MetaConfig, seed: u64, n: usize) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|i| meta::sample_episode(pool, cfg, i, &mut rng).unwrap())
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct ToySeedReport {
    pub seed: u64,
    pub query_loss_start: f64,
    pub query_loss_end: f64,
    pub bleu_meta: f64,
    pub bleu_random: f64,
    pub cider_category: f64,
    pub cider_none: f64,
    pub seconds: f64,
}

const EVAL_EPISODES: usize = 6;

fn mean_scores(
    model: &Model,
    params: &Params,
    pool: &TaskPool,
    episodes: &[Episode],
    cfg: &MetaConfig,
    vocab: &metaquill::text::Vocabulary,
) -> (f64, f64) {
    let (mut bleu, mut cider) = (0.0, 0.0);
    for ep in episodes {
        let s = meta::finetune_and_eval(model, params, pool, ep, cfg.finetune_steps, cfg.finetune_lr(), vocab)
            .unwrap();
        bleu += s.bleu4;
        cider += s.cider;
    }
    (bleu / episodes.len() as f64, cider / episodes.len() as f64)
}

/// Meta-trains a category-conditioned and an unconditioned model on one seed.
///
/// Query loss is measured on fixed train-category episodes. BLEU-4 compares
/// the meta-trained and a random initialisation on held-out categories.
/// CIDEr compares the two conditionings on train-category episodes, where
/// the category embedding has been learned.
pub fn run_toy_seed(seed: u64) -> ToySeedReport {
    let start = std::time::Instant::now();
    let data = toy_data(seed, 60);
    let cfg = toy_meta_config(seed);
    let vocab = &data.corpus.vocab;
    let loss_eps = fixed_episodes(&data.train, &cfg, 1000 + seed, EVAL_EPISODES);
    let test_eps = fixed_episodes(&data.test, &cfg, 2000 + seed, EVAL_EPISODES);
    let train_eps = fixed_episodes(&data.train, &cfg, 3000 + seed, EVAL_EPISODES);
    let tasks: Vec<_> = loss_eps
        .iter()
        .map(|e| meta::TaskData::from_episode(&data.train, e))
        .collect();

    let mut out = ToySeedReport {
        seed,
        query_loss_start: 0.0,
        query_loss_end: 0.0,
        bleu_meta: 0.0,
        bleu_random: 0.0,
        cider_category: 0.0,
        cider_none: 0.0,
        seconds: 0.0,
    };
    for side in [SideInfoUse::Category, SideInfoUse::None] {
        let model = toy_model(&data, side);
        let init = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let trained = meta::meta_train(&model, init.clone(), &data.train, &cfg, 0, |_, _| Ok(())).unwrap();
        let (_, cider) = mean_scores(&model, &trained, &data.train, &train_eps, &cfg, vocab);
        if side == SideInfoUse::Category {
            out.query_loss_start = meta::adapted_query_loss(&model, &init, &tasks, &cfg.inner()).unwrap();
            out.query_loss_end = meta::adapted_query_loss(&model, &trained, &tasks, &cfg.inner()).unwrap();
            out.bleu_meta = mean_scores(&model, &trained, &data.test, &test_eps, &cfg, vocab).0;
            out.bleu_random = mean_scores(&model, &init, &data.test, &test_eps, &cfg, vocab).0;
            out.cider_category = cider;
        } else {
            out.cider_none = cider;
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}
