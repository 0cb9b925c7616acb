use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over entries of `|a − n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `(parameter, entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], which: Option<(usize, usize)>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars).map_err(|e| match (e, which) {
            (Error::NonFinite { op, .. }, Some((param, entry))) => Error::GradCheck {
                param,
                entry,
                reason: format!("perturbed evaluation produced a non-finite value in `{op}`"),
            },
            (e, _) => e,
        })?;
        let v = g.value(root);
        if v.numel() != 1 {
            return Err(Error::Usage("grad_check objective must be scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work, Some((pi, ei)))?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work, Some((pi, ei)))?;
            work[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck {
                    param: pi,
                    entry: ei,
                    reason: "objective is non-finite under perturbation".into(),
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}
