//! Central finite-difference checks of analytic gradients (64-bit only).

use serde::Serialize;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero compare on absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Smallest derivative a central difference with step `h` can tell from
/// zero when each of the two evaluations of a loss near `f` is off by up to
/// one ulp.
pub fn fd_resolution(f: f64, h: f64) -> f64 {
    2.0 * f64::EPSILON * f.abs() / h
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Absolute disagreement below which an entry scores zero error.
    pub resolution: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_leaves(leaves: Vec<LeafReport>, tol: f64, resolution: f64) -> Self {
        let max_rel_err = leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
        GradCheckReport {
            leaves,
            max_rel_err,
            tol,
            resolution,
            passed: max_rel_err < tol,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], resolution: f64) -> LeafReport {
    let mut rep = LeafReport {
        name: name.to_string(),
        scalars: analytic.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let r = if (a - n).abs() <= resolution {
            0.0
        } else {
            rel_err(a, n)
        };
        rep.max_abs_err = rep.max_abs_err.max((a - n).abs());
        if r > rep.max_rel_err {
            rep.max_rel_err = r;
            rep.worst_index = i;
        }
    }
    rep
}

/// Checks `f` with respect to free-standing leaves.
///
/// `f` receives the graph and one tracked [`Var`] per leaf and must return a
/// scalar. It is re-run from scratch for every perturbed coordinate, so any
/// randomness inside it has to be reseeded per call.
pub fn grad_check<F>(leaves: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let resolution = fd_resolution(g.value(out).item(), h);
    g.backward(out)?;

    let mut reports = Vec::with_capacity(leaves.len());
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(vars[li]) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; leaf.numel()],
        };
        let mut numeric = vec![0.0; leaf.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = leaf.data()[i];
            work[li].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[li].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[li].data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        reports.push(compare(
            &format!("leaf{li}"),
            &analytic,
            &numeric,
            resolution,
        ));
    }
    Ok(GradCheckReport::from_leaves(reports, tol, resolution))
}

/// Checks `f` with respect to every parameter in `store`.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let resolution = fd_resolution(g.value(out).item(), h);
    let grads = g.backward(out)?;

    let mut work = store.clone();
    let mut reports = Vec::with_capacity(store.len());
    for (id, name, value) in store.iter() {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; value.numel()],
        };
        let mut numeric = vec![0.0; value.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = value.data()[i];
            work.get_mut(id).data_mut()[i] = x0 + h;
            let mut gp = Graph::new();
            let op = f(&mut gp, &work)?;
            let fp = gp.value(op).item();
            work.get_mut(id).data_mut()[i] = x0 - h;
            let mut gm = Graph::new();
            let om = f(&mut gm, &work)?;
            let fm = gm.value(om).item();
            work.get_mut(id).data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        reports.push(compare(name, &analytic, &numeric, resolution));
    }
    Ok(GradCheckReport::from_leaves(reports, tol, resolution))
}
