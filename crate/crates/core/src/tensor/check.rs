use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamSet, TensorError, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F, E>(params: &ParamSet<f64>, f: &F) -> Result<f64, E>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()).into());
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()).into());
    }
    Ok(v)
}

fn check_coordinates<F, E>(
    params: &ParamSet<f64>,
    eps: f64,
    f: &F,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            reason: format!("step size must be positive, got {eps}"),
        }
        .into());
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.check_finite(out, "grad_check objective")?;
        g.backward(out)?
    };
    if !analytic.is_finite() {
        return Err(TensorError::NonFinite("analytic gradient".into()).into());
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for &(id, j) in coords {
        let original = probe.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = original + eps;
        let up = evaluate(&probe, f)?;
        probe.get_mut(id).data_mut()[j] = original - eps;
        let down = evaluate(&probe, f)?;
        probe.get_mut(id).data_mut()[j] = original;
        let numeric = (up - down) / (2.0 * eps);
        let exact = analytic.get(id).data()[j];
        let err = (exact - numeric).abs() / exact.abs().max(1.0);
        if report.worst.is_none() || err > report.max_error {
            report.max_error = err;
            report.worst = Some((params.name(id).to_string(), j));
        }
    }
    Ok(report)
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F, E>(params: &ParamSet<f64>, eps: f64, f: F) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<_> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |j| (id, j)))
        .collect();
    check_coordinates(params, eps, &f, &coords)
}

/// Checks `count` coordinates drawn uniformly (with replacement) under `seed`.
pub fn grad_check_sampled<F, E>(
    params: &ParamSet<f64>,
    eps: f64,
    count: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let all: Vec<_> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |j| (id, j)))
        .collect();
    if all.is_empty() {
        return check_coordinates(params, eps, &f, &[]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<_> = (0..count)
        .map(|_| all[rng.gen_range(0..all.len())])
        .collect();
    check_coordinates(params, eps, &f, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_is_exact_up_to_roundoff() {
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::scalar(3.0));
        let report = grad_check(&p, 1e-5, |g: &mut Graph<f64>| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            Ok::<_, TensorError>(sq)
        })
        .unwrap();
        assert!(report.max_error < 1e-6, "{report:?}");
        assert_eq!(report.coordinates, 1);
    }

    #[test]
    fn bilinear_form() {
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::vector(vec![0.3, -1.2, 0.8]));
        let w = p.insert(
            "w",
            Tensor::matrix(3, 2, vec![0.5, -0.1, 0.2, 0.9, -0.7, 0.4]).unwrap(),
        );
        let y = p.insert("y", Tensor::vector(vec![1.1, -0.6]));
        let report = grad_check(&p, 1e-5, |g: &mut Graph<f64>| {
            let (xv, wv, yv) = (g.param(x), g.param(w), g.param(y));
            let wy = g.matmul(wv, yv)?;
            g.dot(xv, wy)
        })
        .unwrap();
        assert!(report.max_error < 1e-6, "{report:?}");
        assert_eq!(report.coordinates, 11);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // |x| has a kink at 0: max(x, -x) with x exactly 0 routes the
        // whole gradient to one branch while the central difference sees 0.
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::vector(vec![0.0]));
        let report = grad_check(&p, 1e-5, |g: &mut Graph<f64>| {
            let v = g.param(x);
            let neg = g.scale(v, -1.0);
            let both = g.concat(&[v, neg])?;
            g.max_over_axis(both, 0)
        })
        .unwrap();
        assert!(report.max_error > 0.5);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn non_positive_step_rejected() {
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::scalar(1.0));
        let res = grad_check(&p, 0.0, |g: &mut Graph<f64>| {
            Ok::<_, TensorError>(g.param(x))
        });
        assert!(res.is_err());
    }

    #[test]
    fn non_finite_objective_rejected() {
        let mut p = ParamSet::new();
        let x = p.insert("x", Tensor::vector(vec![1.0, 0.0]));
        let res = grad_check(&p, 1e-5, |g: &mut Graph<f64>| {
            let v = g.param(x);
            let big = g.scale(v, f64::MAX);
            let bigger = g.scale(big, 10.0);
            Ok::<_, TensorError>(g.sum(bigger))
        });
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
