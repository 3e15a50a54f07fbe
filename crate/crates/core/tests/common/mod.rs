#![allow(dead_code)]

pub mod layers;

use gfcn::graph::{Graph, Var};
use gfcn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Scalar loss: the op output weighted elementwise by fixed random weights.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = g.input(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Analytic and central-difference gradients of `f` with respect to each
/// input, compared per tensor. Returns the worst relative error.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    h: f64,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut work = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work);
            work[i].data_mut()[j] = x - h;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}
