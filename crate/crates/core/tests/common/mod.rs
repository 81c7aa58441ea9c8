#![allow(dead_code)]

use headpurify_core::rng::{self, SeededRng};
use headpurify_core::{Result, Tape, Tensor, Var};

/// Uniform values in [-1, 1].
pub fn uniform(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 2.0 * rng::uniform(r) - 1.0)
}

pub fn seeded(seed: u64) -> SeededRng {
    rng::stream(seed, "tests")
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

/// Worst element-wise relative error between tape gradients and central
/// differences of `f` with respect to every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.reverse_grad(out, &vars).expect("backward");
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let o = f(&mut t, &v).expect("forward");
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], num, FLOOR));
        }
    }
    worst
}

/// `Σ out ⊙ weights`: a random linear functional turning any node into a scalar.
pub fn functional(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Overwrite every parameter of `group` with uniform values times `scale`.
pub fn randomize(
    ps: &mut headpurify_core::param::ParamSet,
    group: headpurify_core::param::ParamGroup,
    scale: f64,
    seed: u64,
) {
    let mut r = rng::stream(seed, "randomize");
    let names: Vec<String> = ps
        .iter()
        .filter(|p| p.group == group)
        .map(|p| p.name.clone())
        .collect();
    for n in names {
        let shape = ps.value(&n).unwrap().shape().to_vec();
        ps.set(&n, uniform(&mut r, &shape).scale(scale)).unwrap();
    }
}
