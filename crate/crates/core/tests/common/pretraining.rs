//! Raw-image toy data and model setup for joint pretraining.

use metaquill::encoders::{cnn_output_hw, init_cnn};
use metaquill::model::{Example, Model, SideInfoUse};
use metaquill::pipeline::{Corpus, FeatureBackend, Side};
use metaquill::selfsup::{self, PretrainConfig, PretrainLogRow};
use metaquill::toyset::{generate_toyset, ToySpec};
use metaquill::{GradMap, Params, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy::{toy_model_config, CHANNELS, CNN_WIDTHS};

pub struct RawToy {
    pub dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn raw_toy(seed: u64, images_per_cat: usize) -> RawToy {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        images_per_cat,
        seed,
        ..ToySpec::default()
    };
    generate_toyset(&spec, dir.path()).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let max_len = toy_model_config(SideInfoUse::Category).max_len;
    let train = corpus.examples(Side::Train, &FeatureBackend::Raw, max_len, None).unwrap();
    let test = corpus.examples(Side::Test, &FeatureBackend::Raw, max_len, None).unwrap();
    RawToy {
        dir,
        corpus,
        train,
        test,
    }
}

pub fn model(data: &RawToy) -> Model {
    Model::new(
        toy_model_config(SideInfoUse::Category),
        data.corpus.vocab.len(),
        data.corpus.categories.len(),
        CHANNELS,
    )
    .unwrap()
}

/// Generator and CNN parameters, plus the rotation head when `head` is set.
pub fn initial_params(model: &Model, data: &RawToy, cfg: &PretrainConfig, head: bool) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = model.init_params(&mut rng).unwrap();
    init_cnn(&mut p, CNN_WIDTHS, CHANNELS, &mut rng);
    if head {
        let s = data.train[0].image.shape();
        selfsup::init_rotation_head(&mut p, CHANNELS, cfg.head_channels, cnn_output_hw(s[1], s[2]), &mut rng);
    }
    p
}

pub fn pretrain(model: &Model, params: Params, data: &RawToy, cfg: &PretrainConfig) -> (Params, Vec<PretrainLogRow>) {
    let mut rows = Vec::new();
    let out = selfsup::pretrain_joint(model, params, &data.train, cfg, 0, |r, _| {
        rows.push(r.clone());
        Ok(())
    })
    .unwrap();
    (out, rows)
}

/// Plain supervised training of the CNN and generator: uniform mini-batches
/// with replacement, clipped gradient step. Returns the loss per iteration.
pub fn supervised_loop(model: &Model, mut params: Params, data: &[Example], cfg: &PretrainConfig) -> (Params, Vec<f64>) {
    let mut losses = Vec::new();
    for iter in 0..cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter);
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let features = selfsup::cnn_feature_batch(&tape, &p, &batch).unwrap();
        let loss = model.loss_with_features(&tape, &p, &features, &batch).unwrap();
        losses.push(loss.value().item() as f64);
        let mut grads = GradMap::from_backward(&tape, loss, &p).unwrap();
        if let Some(c) = cfg.clip_norm {
            grads.clip_global_norm(c);
        }
        params.sgd_step(&grads, cfg.lr).unwrap();
    }
    (params, losses)
}

pub fn heldout_accuracy(params: &Params, data: &RawToy) -> f64 {
    let images: Vec<_> = data.test.iter().map(|e| e.image.as_ref()).collect();
    selfsup::rotation_accuracy(params, &images).unwrap()
}
