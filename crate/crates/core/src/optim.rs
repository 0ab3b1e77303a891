//! Bias-corrected adaptive-moment (Adam) updates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Gradients, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One update of every parameter. Rejects the whole step, leaving
/// everything untouched, if any gradient entry is non-finite.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, ((p, (_, g)), (m, v))) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        debug_assert_eq!(p.shape(), g.shape(), "parameter {k}");
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_param(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    /// Gradient of `g * w`, i.e. exactly `g`.
    fn grad(params: &Params, g: f64) -> Gradients {
        let mut graph = crate::graph::Graph::new(params);
        let w = graph.param_named("w").unwrap();
        let s = graph.scale(w, g);
        graph.backward(s).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(1.5);
        let mut st = AdamState::new(&p);
        let gr = grad(&p, 0.0);
        adam_step(&mut p, &gr, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().get(0, 0), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // m̂ = g, v̂ = g², step = lr·g/(|g|+eps)
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        for g in [3.0, -0.5] {
            let mut p = one_param(0.0);
            let mut st = AdamState::new(&p);
            let gr = grad(&p, g);
            adam_step(&mut p, &gr, &mut st, &cfg).unwrap();
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert_abs_diff_eq!(p.get("w").unwrap().get(0, 0), expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = one_param(0.2);
            let mut st = AdamState::new(&p);
            let mut traj = Vec::new();
            for i in 0..20 {
                let g = (i as f64 * 0.7).sin();
                let gr = grad(&p, g);
                adam_step(&mut p, &gr, &mut st, &AdamConfig::default()).unwrap();
                traj.push(p.get("w").unwrap().get(0, 0));
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = one_param(1.0);
        let mut st = AdamState::new(&p);
        let gr = grad(&p, f64::NAN);
        let err = adam_step(&mut p, &gr, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().get(0, 0), 1.0);
    }
}
