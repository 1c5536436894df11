use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Relative error of every probed coordinate, in probe order.
    pub errors: Vec<f64>,
}

impl GradcheckReport {
    pub fn count_above(&self, tol: f64) -> usize {
        self.errors.iter().filter(|&&e| e >= tol).count()
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step [`GRADCHECK_STEP`], in f64.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`,
/// where `floor` is `1e-3` times the largest gradient magnitude seen, so that
/// coordinates with negligible gradients are compared on an absolute scale.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_sampled(f, inputs, usize::MAX)
}

/// Like [`gradcheck`] but probes at most `max_coords` evenly spaced
/// coordinates per input.
pub fn gradcheck_sampled<F>(f: F, inputs: &[Tensor<f64>], max_coords: usize) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with_step(f, inputs, max_coords, GRADCHECK_STEP)
}

/// [`gradcheck_sampled`] with a custom finite-difference step.
pub fn gradcheck_with_step<F>(f: F, inputs: &[Tensor<f64>], max_coords: usize, step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::dim("gradcheck", format!("non-scalar output {:?}", g.shape(out))));
        }
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck objective evaluated to {v}")));
        }
        if !track {
            return Ok((v, Vec::new()));
        }
        g.backward(out)?;
        Ok((v, vars.iter().map(|&x| g.grad(x).map(<[f64]>::to_vec)).collect()))
    };

    let (_, grads) = eval(inputs, true)?;
    let mut probes = Vec::new();
    let mut values = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = n.div_ceil(max_coords.min(n).max(1));
        for j in (0..n).step_by(stride.max(1)) {
            let orig = t.data()[j];
            values[i].data_mut()[j] = orig + step;
            let (plus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig - step;
            let (minus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
            if !analytic.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of input {i}[{j}] is {analytic}")));
            }
            probes.push(((i, j), analytic, numeric));
        }
    }
    let scale = probes
        .iter()
        .map(|&(_, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (scale * 1e-3).max(1e-12);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: probes.len(),
        errors: Vec::with_capacity(probes.len()),
    };
    for (at, a, n) in probes {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        report.errors.push(err);
        if err > report.max_rel_error {
            report = GradcheckReport {
                max_rel_error: err,
                worst: at,
                analytic: a,
                numeric: n,
                ..report
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_all_ones_gradient() {
        let x = Tensor::from_fn([7], |i| i as f64 * 0.3 - 1.0);
        let rep = gradcheck(|g, v| Ok(g.sum(v[0])), &[x]).unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 7);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // log at a negative point is NaN: must surface as an error, not a pass.
        let x = Tensor::from_fn([2], |_| -1.0);
        let err = gradcheck(
            |g, v| {
                let y = g.log(v[0]);
                Ok(g.sum(y))
            },
            &[x],
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampling_limits_probes() {
        let x = Tensor::from_fn([100], |i| i as f64);
        let rep = gradcheck_sampled(|g, v| Ok(g.sum(v[0])), &[x], 10).unwrap();
        assert_eq!(rep.checked, 10);
    }
}
