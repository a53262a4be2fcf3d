//! Central finite-difference verification of reverse-mode gradients.

use super::tensor::{Gradients, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Compares the gradient returned by `f` against central differences on
/// every coordinate and returns the largest relative error, using
/// `max(|a|, |b|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    grad_check_report(f, params, eps, None).map(|r| r.max_relative_error)
}

/// Like [`grad_check`], optionally limiting each parameter to at most
/// `per_param` evenly spaced coordinates.
pub fn grad_check_report<F>(mut f: F, params: &ParamSet, eps: f64, per_param: Option<usize>) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective value {value}")));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = params.tensor(id).len();
        let stride = match per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = params.tensor(id).data()[j];
            probe.get_mut(id).tensor.data_mut()[j] = orig + eps;
            let (plus, _) = f(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig - eps;
            let (minus, _) = f(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at {}[{j}] ± eps",
                    params.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id)[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = params.get(id).name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_exact() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::vector(vec![0.5, -1.5, 2.0])).unwrap();
        ps.insert("b", Tensor::vector(vec![3.0])).unwrap();
        let err = grad_check(
            |p| {
                let mut tape = Tape::new(p);
                let mut terms = Vec::new();
                for (id, _) in p.iter() {
                    let v = tape.param(id);
                    terms.push((tape.dot(v, v), 1.0));
                }
                let total = tape.combine(&terms);
                Ok((tape.scalar(total), tape.backward(total)))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn log_softmax_component() {
        let mut ps = ParamSet::new();
        let v = ps.insert("v", Tensor::vector(vec![0.3, -1.2, 2.2, 0.0])).unwrap();
        let err = grad_check(
            |p| {
                let mut tape = Tape::new(p);
                let x = tape.param(v);
                let ls = tape.log_softmax(x)?;
                let y = tape.pick(ls, 1)?;
                Ok((tape.scalar(y), tape.backward(y)))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_finite_objective() {
        let mut ps = ParamSet::new();
        ps.insert("v", Tensor::vector(vec![1.0])).unwrap();
        let r = grad_check(|p| Ok((f64::NAN, Gradients::zeros_like(p))), &ps, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(grad_check(|p| Ok((0.0, Gradients::zeros_like(p))), &ps, 0.0).is_err());
    }

    /// Exercises every tape op in one scalar objective.
    fn kitchen_sink(p: &ParamSet) -> Result<(f64, Gradients)> {
        let w = p.id("w").unwrap();
        let b = p.id("b").unwrap();
        let e = p.id("e").unwrap();
        let u = p.id("u").unwrap();
        let mut tape = Tape::new(p);
        let x = tape.constant(vec![0.4, -0.7, 1.1]);
        let h = tape.affine(w, x, Some(b))?;
        let t = tape.tanh(h);
        let s = tape.sigmoid(h);
        let m = tape.mul(t, s);
        let r0 = tape.embed(e, 1)?;
        let r1 = tape.embed(e, 1)?;
        let r = tape.add(r0, r1);
        let d = tape.sub(m, r);
        let c = tape.concat(&[d, r0]);
        let sl = tape.slice(c, 1, 4);
        let uv = tape.param(u);
        let dt = tape.dot(sl, uv);
        let ls = tape.log_softmax(c)?;
        let pk = tape.pick(ls, 2)?;
        let lsg = tape.log_sigmoid(dt);
        let lms = tape.log_one_minus_sigmoid(h);
        let sm = tape.sum(lms);
        let sc = tape.scale(sm, 0.3);
        let custom = tape.custom_scalar(2.0 * tape.scalar(pk) + tape.scalar(lsg), vec![(pk, 2.0), (lsg, 1.0)]);
        let weights = [0.5, -1.0, 0.25, 2.0, 0.1, -0.3, 0.7, 1.5];
        let lin: f64 = tape.value(ls).iter().zip(&weights).map(|(a, b)| a * b).sum();
        let cv = tape.custom_vector(lin, vec![(ls, weights.to_vec())]);
        let total = tape.combine(&[(custom, 1.0), (sc, -0.5), (pk, 0.25), (cv, 1.0)]);
        Ok((tape.scalar(total), tape.backward(total)))
    }

    #[test]
    fn every_kernel_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for draw in 0..100 {
            let mut ps = ParamSet::new();
            ps.insert_uniform("w", vec![4, 3], &mut rng).unwrap();
            let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            ps.insert("b", Tensor::vector(bias)).unwrap();
            ps.insert_uniform("e", vec![3, 4], &mut rng).unwrap();
            ps.insert_uniform("u", vec![4], &mut rng).unwrap();
            let err = grad_check(kitchen_sink, &ps, 1e-5).unwrap();
            assert!(err < 1e-4, "draw {draw}: {err}");
        }
    }
}
