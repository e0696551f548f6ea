//! Central-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Bindings, Graph, NodeId};
use super::params::ParamSet;
use super::TensorError;

fn scalar_loss<F>(params: &ParamSet, build_loss: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let loss = build_loss(&mut g)?;
    let v = g.evaluate(loss, &Bindings::new(), params)?;
    let out = v.item();
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    Ok(out as f64)
}

fn central_difference<F>(
    params: &ParamSet,
    name: &str,
    idx: usize,
    epsilon: f32,
    build_loss: &F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    let mut bumped = params.clone();
    let original = bumped.get(name).expect("trainable param").value().data()[idx];
    bumped.get_mut(name).unwrap().value_mut().data_mut()[idx] = original + epsilon;
    let plus = scalar_loss(&bumped, build_loss)?;
    bumped.get_mut(name).unwrap().value_mut().data_mut()[idx] = original - epsilon;
    let minus = scalar_loss(&bumped, build_loss)?;
    Ok((plus - minus) / (2.0 * epsilon as f64))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every entry of every trainable parameter against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The closure must build the whole loss graph (inputs baked in as
/// constants) so that perturbed parameter sets can be re-evaluated.
pub fn grad_check<F>(params: &ParamSet, epsilon: f32, build_loss: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    check_entries(params, epsilon, build_loss, None)
}

/// Like [`grad_check`] but only probes `samples` randomly chosen parameter
/// entries; intended for models too large for the exhaustive sweep.
pub fn grad_check_sampled<F>(
    params: &ParamSet,
    epsilon: f32,
    samples: usize,
    seed: u64,
    build_loss: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    check_entries(params, epsilon, build_loss, Some((samples, seed)))
}

fn check_entries<F>(
    params: &ParamSet,
    epsilon: f32,
    build_loss: F,
    sample: Option<(usize, u64)>,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph) -> Result<NodeId, TensorError>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(TensorError::BadEpsilon(epsilon));
    }

    let mut g = Graph::new();
    let loss = build_loss(&mut g)?;
    let v = g.evaluate(loss, &Bindings::new(), params)?;
    if !v.item().is_finite() {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    let grads = g.backward(loss)?;

    let mut entries: Vec<(String, usize)> = Vec::new();
    for (name, grad) in &grads {
        for idx in 0..grad.numel() {
            entries.push((name.clone(), idx));
        }
    }
    if let Some((samples, seed)) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(samples.min(entries.len()));
        for _ in 0..samples.min(entries.len()) {
            picked.push(entries[rng.gen_range(0..entries.len())].clone());
        }
        entries = picked;
    }

    let mut max_rel = 0.0f64;
    for (name, idx) in entries {
        let analytic = grads[&name].data()[idx] as f64;
        let numeric = central_difference(params, &name, idx, epsilon, &build_loss)?;
        let rel = relative_error(analytic, numeric);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    #[test]
    fn quadratic_loss_checks_out() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new(
                "p",
                Tensor::vector(vec![1.0, -2.0, 0.5]),
                true,
            ))
            .unwrap();
        let err = grad_check(&params, 1e-4, |g| {
            let p = g.parameter(&params, "p")?;
            let sq = g.square(p);
            Ok(g.reduce_sum(sq))
        })
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn linear_loss_is_nearly_exact() {
        // Dyadic values keep f32 arithmetic exact, so central differences
        // reproduce the analytic gradient bit-for-bit.
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new(
                "p",
                Tensor::vector(vec![0.5, 0.25, -1.0, 2.0]),
                true,
            ))
            .unwrap();
        let err = grad_check(&params, 0.0009765625, |g| {
            let p = g.parameter(&params, "p")?;
            Ok(g.reduce_sum(p))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn epsilon_domain_enforced() {
        let params = ParamSet::new();
        assert!(matches!(
            grad_check(&params, 0.5, |g| {
                let c = g.constant_owned(Tensor::scalar(1.0));
                Ok(g.reduce_sum(c))
            }),
            Err(TensorError::BadEpsilon(_))
        ));
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new("p", Tensor::vector(vec![-1.0]), true))
            .unwrap();
        // log of a negative number is NaN.
        let res = grad_check(&params, 1e-4, |g| {
            let p = g.parameter(&params, "p")?;
            let l = g.log(p);
            Ok(g.reduce_sum(l))
        });
        assert!(res.is_err());
    }
}
