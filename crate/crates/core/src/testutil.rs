//! Finite-difference oracle and fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generator::GeneratorConfig;
use crate::numerics::{Tape, Tensor, Var};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Norm-wise relative error between tape gradients and central differences
/// (step 1e-5), maximized over inputs. `build` must be deterministic.
pub fn fd_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item().unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut xs = inputs.to_vec();
        for j in 0..analytic.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale }
}

/// `Σ out ⊙ R` for fixed random `R`, so every output element matters.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

/// A generator small enough for finite-difference checks.
pub fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        input_shape: [2, 20, 8],
        c1_filters: vec![3, 3, 4],
        c2_filters: vec![4, 4, 5],
        patch_size: 2,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_units: vec![6, 5],
        ..GeneratorConfig::default()
    }
}
