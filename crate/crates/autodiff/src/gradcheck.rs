use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub eps: f64,
    /// Check at most this many entries of each parameter tensor (evenly
    /// strided). `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            eps: 1e-8,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of `forward` against central finite
/// differences.
///
/// `forward` receives a fresh graph and one [`Var`] per tensor of `params`
/// (created with [`Graph::param`]) and must return a scalar. The error for
/// each entry is `|analytic - numeric| / (|analytic| + |numeric| + eps)`.
pub fn finite_difference_check<F>(
    mut forward: F,
    params: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Var,
{
    assert!(config.step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = forward(&mut g, &vars);
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    drop(g);

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = forward(&mut g, &vars);
        g.check()?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_entry: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in selected_entries(p.len(), config.max_entries_per_param, pi) {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + config.step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - config.step;
            let dn = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - dn) / (2.0 * config.step);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + config.eps);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_entry = k;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn selected_entries(len: usize, cap: Option<usize>, salt: usize) -> Vec<usize> {
    match cap {
        Some(k) if k < len => {
            let offset = (salt * 7919) % (len / k).max(1);
            (0..k).map(|j| (j * len / k + offset).min(len - 1)).collect()
        }
        _ => (0..len).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::row(vec![0.3, -1.2, 2.5, 0.0]);
        let report = finite_difference_check(
            |g, v| {
                let sq = g.mul(v[0], v[0]);
                let s = g.sum(sq);
                g.scale(s, 0.5)
            },
            &[p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn strided_selection_caps_entries() {
        let e = selected_entries(100, Some(10), 3);
        assert_eq!(e.len(), 10);
        assert!(e.iter().all(|&i| i < 100));
        assert_eq!(selected_entries(5, Some(10), 0), vec![0, 1, 2, 3, 4]);
    }
}
