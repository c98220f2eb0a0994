use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Result of comparing tape gradients against central differences.
///
/// The headline error is measured per parameter tensor as
/// `||analytic - numeric|| / max(||analytic||, 1e-8)` and maximised over
/// tensors. Individual elements whose derivative sits below the resolution
/// of a central difference (roughly `ulp(f) / eps`) can show a large ratio
/// even when the tape is exact, so the element-wise figure is reported
/// separately.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor where `max_rel_error` occurred.
    pub worst: Option<usize>,
    /// Largest `|a - n| / max(|a|, 1e-8)` over single elements.
    pub max_elementwise_error: f64,
    /// Largest `|a - n|` over single elements.
    pub max_abs_error: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.item(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective evaluated to {v}")));
    }
    Ok((v, g, vars, out))
}

const FLOOR: f64 = 1e-8;

pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be positive, got {eps}")));
    }
    let (_, g, vars, out) = evaluate(&f, params)?;
    let grads = g.backward(out);
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, max_elementwise_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let (mut diff_sq, mut norm_sq) = (0.0, 0.0);
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let (fp, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let (fm, ..) = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ei];
            let d = (a - numeric).abs();
            diff_sq += d * d;
            norm_sq += a * a;
            report.max_abs_error = report.max_abs_error.max(d);
            report.max_elementwise_error = report.max_elementwise_error.max(d / a.abs().max(FLOOR));
            report.checked += 1;
        }
        let rel = diff_sq.sqrt() / norm_sq.sqrt().max(FLOOR);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(pi);
        }
    }
    Ok(report)
}
