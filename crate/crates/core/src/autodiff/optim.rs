use serde::{Deserialize, Serialize};

use super::{shape_err, ParamStore, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(0.5),
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: OptimState<T>,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Adam {
            config,
            state: OptimState {
                step: 0,
                v: m.clone(),
                m,
            },
        }
    }

    /// One bias-corrected adaptive-moment step. `grads` is ordered like
    /// `params.iter()`; it is clipped in place when `max_grad_norm` is set.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &mut [Vec<T>]) -> Result<f64> {
        if grads.len() != params.len() || grads.len() != self.state.m.len() {
            return shape_err("adam", "gradient list does not match parameters");
        }
        for ((_, p), g) in params.iter().zip(grads.iter()) {
            if p.len() != g.len() {
                return shape_err("adam", "gradient length does not match parameter");
            }
        }
        let norm = match self.config.max_grad_norm {
            Some(max) => clip_grad_norm(grads, max),
            None => clip_grad_norm(grads, f64::INFINITY),
        };
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (idx, (p, g)) in params.values_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.state.m[idx], &mut self.state.v[idx]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                *x = *x - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.state.m[0] = vec![0.5, 0.5];
        adam.state.v[0] = vec![0.25, 0.25];
        let mut zero = vec![vec![0.0, 0.0]];
        adam.step(&mut p, &mut zero).unwrap();
        assert_eq!(adam.state.m[0], vec![0.45, 0.45]);
        assert!((adam.state.v[0][0] - 0.25 * 0.999).abs() < 1e-15);

        let mut p = store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &mut vec![vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = g, v̂ = g², so Δ = -lr · g / (|g| + ε).
        let cfg = AdamConfig {
            lr: 0.1,
            max_grad_norm: None,
            ..AdamConfig::default()
        };
        let mut p = store(&[1.0, 1.0, 1.0]);
        let mut adam = Adam::new(cfg, &p);
        let g = [0.3, -2.0, 1e-3];
        adam.step(&mut p, &mut vec![g.to_vec()]).unwrap();
        for (x, gi) in p.get("w").unwrap().data().iter().zip(g) {
            let expected = 1.0 - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
        }
    }

    #[test]
    fn norm_clipping_scales_by_ratio() {
        let mut grads = vec![vec![3.0f64, 0.0], vec![4.0]];
        let n = clip_grad_norm(&mut grads, 0.5);
        assert_eq!(n, 5.0);
        assert!((grads[0][0] - 0.3).abs() < 1e-15);
        assert!((grads[1][0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut p = store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &mut vec![vec![1.0, 2.0]]).is_err());
    }
}
