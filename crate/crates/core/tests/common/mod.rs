//! Shared test utilities: the central finite-difference gradient oracle and
//! a tiny reference matmul. The oracle only ever runs forward passes, so it
//! stays independent of the reverse-mode implementation it checks.

use kgner_core::rng::Rng;
use kgner_core::tensor::{Tape, Tensor, Var};

/// Builds a scalar loss from leaf tensors placed on the given tape and
/// returns the loss var plus the leaf vars (in input order).
pub type BuildFn<'a> = dyn Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>) + 'a;

/// Maximum relative error between reverse-mode and central-difference
/// gradients over every input coordinate.
pub fn max_rel_error(build: &BuildFn, inputs: &[Tensor], eps: f64, tape_seed: u64) -> f64 {
    let mut tape = Tape::new(tape_seed, true);
    let (loss, vars) = build(&mut tape, inputs);
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("tracked leaf").clone();
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= eps;

            let mut tp = Tape::new(tape_seed, true);
            let (lp, _) = build(&mut tp, &plus);
            let mut tm = Tape::new(tape_seed, true);
            let (lm, _) = build(&mut tm, &minus);
            let numeric =
                (tp.value(lp).scalar_value() - tm.value(lm).scalar_value()) / (2.0 * eps);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| rng.normal(0.0, 1.0)).collect())
        .unwrap()
        .with_grad()
}

/// Plain reference matmul used by independent score recomputations.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}
