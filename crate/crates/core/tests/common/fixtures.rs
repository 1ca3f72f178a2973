//! Tiny models and random examples for decoder-level tests.

use std::sync::Arc;

use metaquill::conditioning::ConditioningMode;
use metaquill::model::{Example, Model, ModelConfig, SideInfoUse};
use metaquill::text::{BOS, EOS};
use metaquill::{Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 9;
pub const CHANNELS: usize = 3;

pub fn tiny_config(mode: ConditioningMode, side_info: SideInfoUse) -> ModelConfig {
    ModelConfig {
        mode,
        side_info,
        d_c: 3,
        d_a: 2,
        film_hidden: 3,
        d_h: 4,
        d_att: 3,
        d_p: 3,
        d_w: 2,
        max_len: 6,
        max_answer_len: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(mode: ConditioningMode, side_info: SideInfoUse) -> Model {
    Model::new(tiny_config(mode, side_info), VOCAB, 3, CHANNELS).unwrap()
}

/// Random `[2, 2, c]` features, category, answer and a gold question of
/// 1–4 words drawn from the non-special tokens.
pub fn random_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let words = rng.gen_range(1..=4);
            let mut question = vec![BOS];
            question.extend((0..words).map(|_| rng.gen_range(4..VOCAB)));
            question.push(EOS);
            Example {
                image_id: format!("img{i}"),
                image: Arc::new(Tensor::uniform(&[2, 2, CHANNELS], 1.0, &mut rng)),
                category: rng.gen_range(0..3),
                answer: (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(4..VOCAB)).collect(),
                question,
            }
        })
        .collect()
}

pub fn init(model: &Model, seed: u64) -> Params {
    model.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn refs(v: &[Example]) -> Vec<&Example> {
    v.iter().collect()
}
