//! Finite-difference verification of reverse-mode gradients.
//!
//! Losses are rebuilt from scratch for every probe, so the check exercises
//! the same builder code paths training uses. Runs in f64: the probe step
//! would drown in f32 rounding noise.

use std::collections::HashMap;
use std::sync::Arc;

use super::graph::{BufId, Graph, GraphFlags, TrainFilter};
use super::registry::{ParamRegistry, ParamSnapshot};
use super::scalar::Real;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckCfg {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg { eps: 1e-5, rel_tol: 1e-4, abs_tol: 1e-7 }
    }
}

#[derive(Debug)]
pub struct ProbeReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Deterministically spreads up to `per_param` probe indices over each
/// parameter tensor: first, last, and evenly spaced interior points.
pub fn default_probes(reg: &ParamRegistry, per_param: usize) -> Vec<(String, usize)> {
    let mut probes = Vec::new();
    for (name, t) in reg.iter() {
        let n = t.numel();
        let k = per_param.min(n);
        for j in 0..k {
            let idx = if k == 1 { 0 } else { j * (n - 1) / (k - 1) };
            if probes.last().map(|(pn, pi): &(String, usize)| (pn.as_str(), *pi)) != Some((name, idx)) {
                probes.push((name.to_string(), idx));
            }
        }
    }
    probes
}

/// Compares reverse-mode gradients against central differences. The builder
/// is called with rounding replaced by identity; see `GraphFlags`.
pub fn finite_difference_check<F>(
    reg: &ParamRegistry,
    probes: &[(String, usize)],
    cfg: GradCheckCfg,
    build: F,
) -> Result<Vec<ProbeReport>>
where
    F: Fn(&mut Graph<f64>) -> Result<BufId>,
{
    let flags = GraphFlags { round_as_identity: true, coding_mode: false };
    let base: Arc<ParamSnapshot<f64>> = reg.snapshot();

    let mut g = Graph::new(Arc::clone(&base), TrainFilter::All, flags);
    let loss = build(&mut g)?;
    let grads: HashMap<String, Vec<f64>> = g.backward(loss)?.into_iter().collect();

    let eval = |snap: Arc<ParamSnapshot<f64>>| -> Result<f64> {
        let mut g = Graph::new(snap, TrainFilter::None, flags);
        let loss = build(&mut g)?;
        g.scalar_value(loss).map(|v| v.to_f64())
    };

    let mut reports = Vec::with_capacity(probes.len());
    for (name, index) in probes {
        let up = eval(Arc::new(base.with_perturbed(name, *index, cfg.eps)?))?;
        let dn = eval(Arc::new(base.with_perturbed(name, *index, -cfg.eps)?))?;
        let numeric = (up - dn) / (2.0 * cfg.eps);
        let analytic = grads.get(name.as_str()).map(|g| g[*index]).unwrap_or(0.0);
        let err = (analytic - numeric).abs();
        let pass = err <= cfg.abs_tol + cfg.rel_tol * analytic.abs().max(numeric.abs());
        reports.push(ProbeReport { name: name.clone(), index: *index, analytic, numeric, pass });
    }
    Ok(reports)
}

pub fn assert_all_pass(reports: &[ProbeReport]) {
    for r in reports {
        assert!(
            r.pass,
            "gradient mismatch at {}[{}]: analytic {} vs numeric {}",
            r.name, r.index, r.analytic, r.numeric
        );
    }
}
