#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpred::engine::{EngineError, Tape, Tensor, Var};

pub const FD_EPS: f32 = 1e-3;
pub const FD_REL_TOL: f32 = 1e-2;
/// Denominator floor for the relative error so that near-zero adjoints are
/// compared on an absolute scale comparable to f32 central-difference noise.
pub const FD_FLOOR: f32 = 5e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Worst relative error between reverse-mode adjoints and central
/// differences of a scalar function of `inputs`.
///
/// `f` rebuilds the computation on a fresh tape from the given leaves, so
/// every perturbed evaluation is independent of the reverse sweep.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f32
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let eval = |ts: &[Tensor]| -> f32 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.value(l).item().unwrap()
    };

    let mut worst = 0.0f32;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let a = analytic[k][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn assert_gradcheck<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, EngineError>,
{
    let err = gradcheck(inputs, f);
    assert!(
        err < FD_REL_TOL,
        "{name}: finite-difference relative error {err} >= {FD_REL_TOL}"
    );
}

/// Weighted sum `sum(w * y)` with fixed random weights, turning any tensor
/// into a scalar whose gradient exercises every output element.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, EngineError> {
    let shape = tape.shape(y).to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}
