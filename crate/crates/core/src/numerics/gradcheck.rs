//! Central-difference gradient oracle.

use crate::error::Result;
use crate::exec::Exec;
use crate::numerics::{Graph, ParamId, ParameterSet, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1e-8, |g_fd|)` over every scalar parameter.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Rounding bound of a central difference at this loss value,
    /// `8·ε·|L|/δ`.
    pub resolution: f64,
    /// Like `max_rel_error`, with `resolution` subtracted from each absolute
    /// error first.
    pub max_resolved_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn passes_resolved(&self, tol: f64) -> bool {
        self.max_resolved_error < tol
    }
}

fn loss_value<F>(f: &F, ps: &ParameterSet) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = f(&mut g, ps)?;
    Ok(g.scalar_value(l))
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `delta` on every parameter in `params`.
pub fn finite_diff_check<F>(params: &ParameterSet, f: F, delta: f64, exec: Exec) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParameterSet) -> Result<Var> + Sync,
{
    let mut ad = params.clone();
    ad.zero_grads();
    let (grads, base) = {
        let mut g = Graph::new();
        let l = f(&mut g, &ad)?;
        (g.backward(l)?, g.scalar_value(l))
    };
    ad.accumulate(&grads)?;

    let jobs: Vec<usize> = (0..params.len()).collect();
    let per_tensor = exec.map(jobs, |idx| -> Result<Vec<f64>> {
        let mut work = params.clone();
        let id = ParamId(idx);
        let n = work.get(id).len();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + delta;
            let plus = loss_value(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig - delta;
            let minus = loss_value(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig;
            out.push((plus - minus) / (2.0 * delta));
        }
        Ok(out)
    });

    let resolution = 8.0 * f64::EPSILON * base.abs() / delta;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        resolution,
        max_resolved_error: 0.0,
        checked: 0,
    };
    for (idx, fd) in per_tensor.into_iter().enumerate() {
        let fd = fd?;
        let t = ad.get(ParamId(idx));
        let zeros = vec![0.0; fd.len()];
        let g_ad = t.grad().unwrap_or(&zeros);
        for (k, (&a, &n)) in g_ad.iter().zip(&fd).enumerate() {
            let err = (a - n).abs() / n.abs().max(1e-8);
            let resolved = ((a - n).abs() - resolution).max(0.0) / n.abs().max(1e-8);
            report.max_resolved_error = if resolved.is_nan() {
                f64::INFINITY
            } else {
                report.max_resolved_error.max(resolved)
            };
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((ad.names()[idx].clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{Activation, Mlp, Mode};
    use crate::numerics::Tensor;
    use crate::rng::rng_for;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParameterSet::new();
        let w = ps.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
        let r = finite_diff_check(
            &ps,
            |g, ps| {
                let x = g.param(ps, w);
                let s = g.square(x);
                Ok(g.sum(s))
            },
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn two_layer_mlp() {
        let mut rng = rng_for(11, &[]);
        let mut ps = ParameterSet::new();
        let mlp = Mlp::new(&mut ps, "mlp", 3, &[5], 2, Activation::Tanh, 0.0, &mut rng).unwrap();
        let r = finite_diff_check(
            &ps,
            |g, ps| {
                let x = g.constant_rows(2, 3, vec![0.2, -0.4, 0.9, -0.3, 0.8, 0.1])?;
                let y = mlp.forward(g, ps, x, &mut Mode::Eval)?;
                let s = g.square(y);
                Ok(g.mean(s))
            },
            1e-5,
            Exec::Parallel,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn rounding_bound_separates_noise_from_wrong_gradients() {
        let mut ps = ParameterSet::new();
        let w = ps.insert("w", Tensor::vector(vec![0.3, -0.7])).unwrap();
        let offset = finite_diff_check(
            &ps,
            |g, ps| {
                let x = g.param(ps, w);
                let s = g.square(x);
                let s = g.sum(s);
                let s = g.scale(s, 1e-6);
                Ok(g.add_scalar(s, 1e4))
            },
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(!offset.passes(1e-4), "{offset:?}");
        assert!(offset.passes_resolved(1e-4), "{offset:?}");

        let wrong = finite_diff_check(
            &ps,
            |g, ps| {
                let x = g.param(ps, w);
                let d = g.detach(x);
                let p = g.mul(x, d)?;
                Ok(g.sum(p))
            },
            1e-5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(!wrong.passes_resolved(1e-4), "{wrong:?}");
    }
}
