//! Central finite-difference verification of [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Params, Var};

/// Gradient magnitudes below this are compared by absolute error.
pub const ABS_FALLBACK: f64 = 1e-8;

/// Worst disagreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|analytic - numeric|` among entries at or above the tolerance.
    pub max_failing_diff: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tol
    }

    /// Like [`passed`](Self::passed), but also accepts entries whose absolute
    /// disagreement is below `abs_floor`.
    pub fn passed_with_floor(&self, abs_floor: f64) -> bool {
        self.params.iter().all(|p| p.max_failing_diff < abs_floor)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

/// Relative error with an absolute fallback for near-zero gradients.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Compares the backward-pass gradient of a scalar `forward` against
/// `(f(θ+h) - f(θ-h)) / 2h` for every entry of every parameter.
///
/// `forward` must be deterministic (stochastic layers in eval mode).
pub fn grad_check<F>(params: &mut Params, step: f64, tol: f64, forward: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = forward(&mut g)?;
        g.backward(loss)?
    };
    let eval = |params: &Params| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = forward(&mut g)?;
        Ok(g.value(loss).get(0, 0))
    };

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let id = params.id(&name)?;
        let grad = analytic.tensor(id).clone();
        let mut check = ParamCheck {
            name,
            entries: grad.len(),
            max_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_failing_diff: 0.0,
        };
        for k in 0..grad.len() {
            let orig = params.tensor(id).data()[k];
            params.tensor_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params)?;
            params.tensor_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params)?;
            params.tensor_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = gradient_error(grad.data()[k], numeric);
            if err >= tol {
                check.max_failing_diff = check.max_failing_diff.max((grad.data()[k] - numeric).abs());
            }
            if k == 0 || err > check.max_error {
                check.max_error = err;
                check.worst_index = k;
                check.analytic = grad.data()[k];
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        step,
        tol,
        params: checks,
    })
}
