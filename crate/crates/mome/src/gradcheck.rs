//! Central finite-difference gradient checking.
//!
//! The checker is deliberately independent of the backward pass it audits:
//! the numeric side only ever runs forward passes on perturbed copies of
//! the parameters.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamTensor, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked_elements: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`,
/// reduced to the elementwise maximum.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compare the tape's analytic gradients for `params` against central
/// differences `(f(p+eps) - f(p-eps)) / (2 eps)` of the scalar function
/// built by `build`. `build` must be deterministic: it is re-run for every
/// perturbed element.
pub fn grad_check<F>(
    params: &[(String, ParamTensor)],
    build: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "grad_check eps must be positive");

    let eval = |values: &[ParamTensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|p| tape.leaf_from(p, with_grad))
            .collect();
        let loss = build(&mut tape, &ids)?;
        if !tape.node(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "grad_check function must return a scalar, got shape {:?}",
                tape.shape(loss)
            )));
        }
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::Train(format!("grad_check: non-finite loss {value}")));
        }
        let grads = if with_grad {
            tape.backward(loss)?;
            ids.iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.node(id).numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let base: Vec<ParamTensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let (_, analytic) = eval(&base, true)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked_elements: 0,
    };

    for (pi, (name, _)) in params.iter().enumerate() {
        for j in 0..base[pi].numel() {
            let mut plus = base.clone();
            plus[pi].data[j] += eps;
            let (f_plus, _) = eval(&plus, false)?;

            let mut minus = base.clone();
            minus[pi].data[j] -= eps;
            let (f_minus, _) = eval(&minus, false)?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked_elements += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;
    use rand::Rng;

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let mut rng = rng_from_seed(42);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = vec![("p".to_string(), ParamTensor::new(vec![6], data))];
        let report = grad_check(
            &params,
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                Ok(t.sum(sq))
            },
            1e-4,
        )
        .unwrap();
        // central differences are exact for quadratics up to roundoff
        assert!(report.max_rel_error < 1e-8, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn two_layer_toy_model_checks_out() {
        let mut rng = rng_from_seed(7);
        let mut mk = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ParamTensor::new(shape, data)
        };
        let params = vec![
            ("w1".to_string(), mk(vec![3, 5])),
            ("b1".to_string(), mk(vec![5])),
            ("w2".to_string(), mk(vec![5, 4])),
        ];
        let x = mk(vec![2, 3]);
        let report = grad_check(
            &params,
            move |t, ids| {
                let xn = t.leaf_from(&x, false);
                let h = t.matmul(xn, ids[0])?;
                let h = t.add_row_vec(h, ids[1])?;
                let h = t.relu(h);
                let logits = t.matmul(h, ids[2])?;
                t.cross_entropy_rows(logits, &[0, 3])
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let params = vec![("p".to_string(), ParamTensor::new(vec![1], vec![0.0]))];
        let err = grad_check(
            &params,
            |t, _ids| {
                let inf = t.leaf(vec![1], vec![f64::INFINITY], false);
                Ok(t.sum(inf))
            },
            1e-5,
        );
        assert!(err.is_err());
    }
}
