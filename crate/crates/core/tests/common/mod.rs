//! Oracles shared by the integration tests.
#![allow(dead_code)]

pub mod cases;

use docir_lab::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for double-precision gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor so gradients that are zero up to rounding do not
/// inflate the relative error.
pub const FD_FLOOR: f64 = 1e-3;
pub const CONV_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(f(inputs) ⊙ w)` for a fixed random `w`, so every output
/// element carries a distinct weight.
fn scalar_loss(
    g: &mut Graph<f64>,
    out: Var,
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Var {
    let shape = g.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| random_tensor(&mut rng(seed), &shape, 0.1)).clone();
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

/// Largest relative error over every input element between backprop and
/// central differences.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut weights = None;
    let eval = |xs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = scalar_loss(&mut g, out, weights, 99);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = scalar_loss(&mut g, out, &mut weights, 99);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, &mut weights) - eval(&minus, &mut weights)) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Direct-loop valid convolution: input `B×C×H×W`, kernels `O×C×K×K`.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, stride: usize) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for r in 0..oh {
                for s in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += xd[((n * c + ic) * h + r * stride + u) * w + s * stride + v]
                                    * kd[((oc * c + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + r) * ow + s] = acc;
                }
            }
        }
    }
    out
}

/// One line of acceptance output.
pub fn report(id: &str, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {id}: {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
