//! Central finite-difference verification of the engine's gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradReport {
    fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Error measure: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Checks gradients with respect to `inputs`; `f` builds a scalar loss from
/// the input leaves.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut empty = ParamStore::new();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss, &mut empty)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &analytic_j) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_error =
                report
                    .max_rel_error
                    .max(relative_error(analytic_j, numeric, DEFAULT_FLOOR));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks parameter gradients on at most `per_param` randomly chosen entries of
/// each parameter in `ids`.
pub fn check_params<F, R>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    rng: &mut R,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for &id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).len();
        let analytic = store
            .grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let picks = sample(rng, n, per_param.min(n));
        let mut local = GradReport {
            max_rel_error: 0.0,
            checked: 0,
        };
        for j in picks {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = {
                let mut g = Graph::new();
                let l = f(&mut g, store)?;
                g.value(l).item()
            };
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = {
                let mut g = Graph::new();
                let l = f(&mut g, store)?;
                g.value(l).item()
            };
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            local.max_rel_error =
                local
                    .max_rel_error
                    .max(relative_error(analytic[j], numeric, DEFAULT_FLOOR));
            local.checked += 1;
        }
        report = report.merge(local);
    }
    store.zero_grad();
    Ok(report)
}
