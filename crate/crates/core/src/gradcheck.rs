//! Central finite-difference checks of graph gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-group comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// `‖g_num − g_ana‖₂ / max(‖g_num‖₂, ‖g_ana‖₂)` over the probed entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Deviations below this (absolute, in gradient units) count as agreement
/// even when both gradients are essentially zero.
const ABS_FLOOR: f64 = 1e-7;

fn rel_error(num: &[f64], ana: &[f64]) -> f64 {
    let diff = num.iter().zip(ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(ana.iter().map(|v| v * v).sum::<f64>().sqrt());
    if diff < ABS_FLOOR {
        0.0
    } else {
        diff / scale
    }
}

/// Checks gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let empty = ParamStore::new();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(&empty);
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new(&empty);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out);
    let mut report = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let ana = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut num = vec![0.0; inputs[i].len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * step;
            let down = eval(&xs)?;
            *slot = (up - down) / (2.0 * step);
        }
        report.push(GroupCheck {
            name: format!("input{i}"),
            checked: num.len(),
            rel_error: rel_error(&num, ana.data()),
            analytic_norm: ana.l2_norm(),
        });
    }
    Ok(report)
}

/// Checks parameter gradients of `f`, probing up to `per_group` randomly
/// chosen entries of every parameter tensor.
pub fn check_params<F, R>(
    store: &ParamStore,
    per_group: usize,
    step: f64,
    rng: &mut R,
    f: F,
) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
    R: Rng,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let grads = g.backward(out).for_params(store);
    let mut work = store.clone();
    let mut report = Vec::new();
    for (id, name, t) in store.iter() {
        let picks = sample(rng, t.len(), per_group.min(t.len())).into_vec();
        let mut num = Vec::with_capacity(picks.len());
        let mut ana = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = t.data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            num.push((up - down) / (2.0 * step));
            ana.push(grads[id.index()].data()[j]);
        }
        report.push(GroupCheck {
            name: name.to_string(),
            checked: picks.len(),
            rel_error: rel_error(&num, &ana),
            analytic_norm: ana.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(report)
}
