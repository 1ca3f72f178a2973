#![allow(dead_code)]

pub mod bilevel;
pub mod cli;
pub mod conformance;
pub mod fdsuite;
pub mod fixtures;
pub mod oracles;
pub mod pretraining;
pub mod splits;
pub mod toy;

use metaquill::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Outcome of checking one function at one point.
pub struct FdOutcome {
    pub checked: usize,
    pub failed: usize,
    pub worst: f64,
}

/// Compares reverse-mode gradients of `<r, f(inputs)>` (random projection `r`)
/// with central differences. The projection and differencing are done in f64.
pub fn fd_check(
    inputs: &[Tensor],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> metaquill::Result<Var<'t>>,
    rng: &mut ChaCha8Rng,
) -> FdOutcome {
    let eval = |xs: &[Tensor]| -> Tensor {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        f(&tape, &vars).expect("forward").value().as_ref().clone()
    };
    let out = eval(inputs);
    let proj: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let project = |t: &Tensor| -> f64 {
        t.data().iter().zip(&proj).map(|(&y, &r)| y as f64 * r).sum()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&tape, &vars).expect("forward");
    let r = tape.constant(
        Tensor::new(y.value().shape(), proj.iter().map(|&v| v as f32).collect()).unwrap(),
    );
    let loss = y.mul(&r).unwrap().sum().unwrap();
    let grads = tape.grad(loss, &vars, false).expect("backward");

    let mut outcome = FdOutcome {
        checked: 0,
        failed: 0,
        worst: 0.0,
    };
    for (k, x) in inputs.iter().enumerate() {
        let ad = grads[k].value();
        for i in 0..x.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP as f32;
            minus[k].data_mut()[i] -= FD_STEP as f32;
            // Actual perturbation after f32 rounding.
            let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let fd = (project(&eval(&plus)) - project(&eval(&minus))) / h;
            let err = (ad.data()[i] as f64 - fd).abs() / fd.abs().max(1.0);
            outcome.checked += 1;
            outcome.worst = outcome.worst.max(err);
            if err > FD_TOL {
                outcome.failed += 1;
            }
        }
    }
    outcome
}

pub struct FdReport {
    pub name: String,
    pub cases: usize,
    pub entries: usize,
    pub failed: usize,
    pub worst: f64,
}

impl FdReport {
    pub fn new(name: &str) -> Self {
        FdReport {
            name: name.to_string(),
            cases: 0,
            entries: 0,
            failed: 0,
            worst: 0.0,
        }
    }

    pub fn absorb(&mut self, o: FdOutcome) {
        self.cases += 1;
        self.entries += o.checked;
        self.failed += o.failed;
        self.worst = self.worst.max(o.worst);
    }

    pub fn passed(&self) -> bool {
        self.failed == 0
    }

    pub fn print_and_assert(&mut self) {
        println!(
            "{:<28} cases={:<4} entries={:<6} failed={:<3} worst={:.2e}",
            self.name, self.cases, self.entries, self.failed, self.worst
        );
        assert!(self.passed(), "{} failed {} FD entries", self.name, self.failed);
    }
}
