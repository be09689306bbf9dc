//! Central finite-difference verification of analytic gradients.

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error (flat index, or position in the
    /// selection for parameter checks).
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

fn report(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1e-12, |numeric|)`.
pub fn grad_check<Func>(f: Func, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    grad_check_with(f, point, eps, false)
}

/// [`grad_check`] with optional fault injection in the analytic pass.
pub fn grad_check_with<Func>(
    f: Func,
    point: &Tensor<f64>,
    eps: f64,
    fault_injection: bool,
) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let store = ParameterStore::<f64>::new();
    let analytic = {
        let mut g = Graph::new(&store).with_fault_injection(fault_injection);
        let x = g.leaf(point.clone())?;
        let y = f(&mut g, x)?;
        scalar_of(&g, y)?;
        let grads = g.backward(y)?;
        grads
            .leaf(x)
            .map(Tensor::to_f64_vec)
            .unwrap_or_else(|| vec![0.0; point.len()])
    };
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new(&store).frozen();
        let x = g.input(p)?;
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(report(analytic, numeric))
}

/// Finite-difference check over selected parameter coordinates
/// `(parameter, flat element index)` of a scalar model loss.
pub fn grad_check_params<Build>(
    build: Build,
    store: &ParameterStore<f64>,
    selection: &[(ParamId, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    Build: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_params_with(build, store, selection, eps, false)
}

/// [`grad_check_params`] with optional fault injection in the analytic pass.
pub fn grad_check_params_with<Build>(
    build: Build,
    store: &ParameterStore<f64>,
    selection: &[(ParamId, usize)],
    eps: f64,
    fault_injection: bool,
) -> Result<GradCheckReport>
where
    Build: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store).with_fault_injection(fault_injection);
        let y = build(&mut g)?;
        scalar_of(&g, y)?;
        g.backward(y)?
    };
    let analytic = selection
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i]))
        .collect();
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s).frozen();
        let y = build(&mut g)?;
        scalar_of(&g, y)
    };
    let mut numeric = Vec::with_capacity(selection.len());
    for &(id, i) in selection {
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[i] += eps;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[i] -= eps;
        numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * eps));
    }
    Ok(report(analytic, numeric))
}
