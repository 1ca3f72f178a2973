//! Small objectives for checking the bi-level gradient.

use metaquill::conditioning::ConditioningMode;
use metaquill::meta::{self, InnerLoop, Objective, TaskData};
use metaquill::model::{Example, Model, SideInfoUse};
use metaquill::params::{Bound, GradMap};
use metaquill::{Params, Tape, Tensor, Var};

use super::fixtures;
use super::{FdReport, FD_STEP, FD_TOL};

/// `L(θ) = mean over targets of (θ − a)²`.
pub struct Quadratic;

impl Objective for Quadratic {
    type Item = f32;
    fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&f32]) -> metaquill::Result<Var<'t>> {
        let theta = p.get("theta")?;
        let mut acc: Option<Var<'t>> = None;
        for &&a in batch {
            let d = theta.sub(&tape.constant(Tensor::scalar(a)))?;
            let sq = d.mul(&d)?;
            acc = Some(match acc {
                Some(s) => s.add(&sq)?,
                None => sq,
            });
        }
        acc.expect("nonempty batch").scale(1.0 / batch.len() as f32)
    }
}

pub fn theta(v: f32) -> Params {
    let mut p = Params::new();
    p.insert("theta", Tensor::scalar(v));
    p
}

/// One full-order and one first-order meta-gradient of the quadratic with
/// `θ = 0`, support and query target `a = 1`, one step at rate 0.25.
pub fn quadratic_meta_grads() -> (f32, f32) {
    let task = TaskData {
        support: vec![&1.0f32],
        query: vec![&1.0f32],
    };
    let grad = |first_order| {
        let inner = InnerLoop {
            lr: 0.25,
            steps: 1,
            first_order,
        };
        let (g, _) = meta::meta_gradient(&Quadratic, &theta(0.0), std::slice::from_ref(&task), &inner).unwrap();
        g.get("theta").unwrap().item()
    };
    (grad(false), grad(true))
}

/// A decoder whose trainable part is a named subset of its parameters; the
/// rest are held as constants.
pub struct Subset {
    pub model: Model,
    pub frozen: Params,
}

impl Objective for Subset {
    type Item = Example;
    fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&Example]) -> metaquill::Result<Var<'t>> {
        let pairs = self.frozen.iter().map(|(name, t)| {
            let v = if p.contains(name) {
                p.get(name).unwrap()
            } else {
                tape.constant(t.clone())
            };
            (name.to_string(), v)
        });
        self.model.loss(tape, &Bound::from_pairs(pairs), batch)
    }
}

pub const SUBSET_NAMES: [&str; 2] = ["dec.lstm.b", "att.theta"];

/// A scale-shift, category-conditioned decoder with 20 trainable scalars:
/// the LSTM bias (16) and the attention scoring vector (4).
pub fn subset_decoder(seed: u64) -> (Subset, Params) {
    let cfg = metaquill::model::ModelConfig {
        d_att: 4,
        ..fixtures::tiny_config(ConditioningMode::ScaleShift, SideInfoUse::Category)
    };
    let model = Model::new(cfg, fixtures::VOCAB, 3, fixtures::CHANNELS).unwrap();
    let all = fixtures::init(&model, seed);
    let mut trainable = Params::new();
    for name in SUBSET_NAMES {
        trainable.insert(name, all.get(name).unwrap().clone());
    }
    (Subset { model, frozen: all }, trainable)
}

/// Summed post-adaptation query loss, forward only.
pub fn meta_objective<O: Objective>(
    obj: &O,
    params: &Params,
    tasks: &[TaskData<'_, O::Item>],
    inner: &InnerLoop,
) -> f64 {
    meta::adapted_query_loss(obj, params, tasks, inner).unwrap() * tasks.len() as f64
}

pub const META_FD_INNER: InnerLoop = InnerLoop {
    lr: 0.1,
    steps: 2,
    first_order: false,
};

/// Central differences of the meta-objective against the full-order outer
/// gradient, for every trainable scalar of the 20-parameter decoder.
pub fn meta_fd_report(seed: u64) -> FdReport {
    let (obj, params) = subset_decoder(seed);
    let examples = fixtures::random_examples(12, seed + 100);
    let tasks: Vec<TaskData<'_, Example>> = examples
        .chunks(6)
        .map(|c| TaskData {
            support: c[..3].iter().collect(),
            query: c[3..].iter().collect(),
        })
        .collect();
    let (grads, _) = meta::meta_gradient(&obj, &params, &tasks, &META_FD_INNER).unwrap();
    let mut report = FdReport::new("meta_gradient_20");
    let mut outcome = super::FdOutcome {
        checked: 0,
        failed: 0,
        worst: 0.0,
    };
    for name in SUBSET_NAMES {
        let ad = grads.get(name).unwrap();
        for i in 0..ad.numel() {
            let shifted = |delta: f32| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                let h = p.get(name).unwrap().data()[i] as f64;
                (meta_objective(&obj, &p, &tasks, &META_FD_INNER), h)
            };
            let (fp, xp) = shifted(FD_STEP as f32);
            let (fm, xm) = shifted(-FD_STEP as f32);
            let fd = (fp - fm) / (xp - xm);
            let err = (ad.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            outcome.checked += 1;
            outcome.worst = outcome.worst.max(err);
            if err > FD_TOL {
                outcome.failed += 1;
            }
        }
    }
    report.absorb(outcome);
    report
}

fn gap(a: &GradMap, b: &GradMap) -> f64 {
    a.iter()
        .map(|(name, g)| {
            let h = b.get(name).unwrap();
            g.data()
                .iter()
                .zip(h.data())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖g_full − g_first_order‖` of the tiny decoder for each inner rate.
pub fn collapse_gaps(rates: &[f32], seed: u64) -> Vec<f64> {
    let model = fixtures::tiny_model(ConditioningMode::ScaleShift, SideInfoUse::Category);
    let params = fixtures::init(&model, seed);
    let examples = fixtures::random_examples(8, seed + 7);
    let tasks = vec![TaskData {
        support: examples[..4].iter().collect(),
        query: examples[4..].iter().collect(),
    }];
    rates
        .iter()
        .map(|&lr| {
            let run = |first_order| {
                let inner = InnerLoop {
                    lr,
                    steps: 1,
                    first_order,
                };
                meta::meta_gradient(&model, &params, &tasks, &inner).unwrap().0
            };
            gap(&run(false), &run(true))
        })
        .collect()
}
