//! Randomised split fixtures.

use metaquill::dataset::{self, Manifest, Record, Source, SplitSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SplitTrials {
    pub trials: usize,
    /// Image ids found on both sides, summed over trials.
    pub overlapping: usize,
    /// Trials where train + test + dropped did not account for every record.
    pub lost_records: usize,
}

/// Random manifests of up to 30 images with 1–4 records each, split at a
/// random cut of 2–6 categories.
pub fn split_trials(trials: usize, seed: u64) -> SplitTrials {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitTrials { trials, overlapping: 0, lost_records: 0 };
    for _ in 0..trials {
        let n_cats = rng.gen_range(2..7);
        let mut records = Vec::new();
        for i in 0..rng.gen_range(1..30) {
            for k in 0..rng.gen_range(1..=4) {
                let c = rng.gen_range(0..n_cats);
                records.push(Record {
                    image_id: format!("i{i}"),
                    image_ref: format!("images/i{i}.tnsr"),
                    question: format!("q{k}"),
                    answer: "a".into(),
                    answer_category: format!("c{c}"),
                    question_category: None,
                    source: Source::A,
                });
            }
        }
        let m = Manifest::new(records);
        let cut = rng.gen_range(1..n_cats);
        let cats: Vec<String> = (0..n_cats).map(|c| format!("c{c}")).collect();
        let s = SplitSpec {
            train_categories: cats[..cut].iter().cloned().collect(),
            test_categories: cats[cut..].iter().cloned().collect(),
        };
        let (train, test, report) = dataset::split(&m, &s).unwrap();
        out.overlapping += train.image_ids().intersection(&test.image_ids()).count();
        if train.len() + test.len() + report.dropped.len() != m.len() {
            out.lost_records += 1;
        }
    }
    out
}
