use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at every coordinate of `point`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(op: &str, f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g
        .backward(y)?
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_default();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(point.shape().to_vec(), data)?);
        let y = f(&mut g, x)?;
        let v = g.data(y)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{op}: non-finite function value")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        worst_coordinate: 0,
    };
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += h;
        let mut minus = point.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let p = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 7.5, -0.25]).unwrap();
        let r = grad_check("sum", |g, x| g.sum(x), &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn non_finite_function_value_is_reported() {
        let p = Tensor::new(vec![1], vec![1e200]).unwrap();
        let r = grad_check(
            "cube",
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
