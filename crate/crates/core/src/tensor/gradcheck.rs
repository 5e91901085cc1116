//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{no_grad, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares analytic gradients of a scalar-valued forward pass against
/// central finite differences with the given step, element by element. For
/// tensors larger than `sample_cap` elements, a seeded sample of
/// `sample_cap` (>= 64) elements is checked instead of all of them.
///
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(
    params: &[Parameter],
    mut forward: impl FnMut() -> Result<Tensor>,
    step: f64,
    seed: u64,
    sample_cap: usize,
) -> Result<GradCheckReport> {
    let sample_cap = sample_cap.max(64);
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = forward()?;
    if loss.len() != 1 {
        return Err(Error::invalid("grad_check", "forward must produce a scalar"));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("grad_check forward pass".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        elements_checked: 0,
    };
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.tensor.len();
        let indices: Vec<usize> = if n <= sample_cap {
            (0..n).collect()
        } else {
            sample(&mut rng, n, sample_cap).into_vec()
        };
        for idx in indices {
            let orig = p.tensor.with_data(|d| d[idx]);
            p.tensor.with_data_mut(|d| d[idx] = orig + step);
            let f_plus = no_grad(&mut forward)?.item();
            p.tensor.with_data_mut(|d| d[idx] = orig - step);
            let f_minus = no_grad(&mut forward)?.item();
            p.tensor.with_data_mut(|d| d[idx] = orig);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!("grad_check probe at {}[{idx}]", p.name)));
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grads[idx];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{idx}]", p.name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::ops::{linear, sigmoid, sum_all};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_function_has_zero_error() {
        let p = Parameter::new("w", Tensor::zeros(vec![3]));
        let report = grad_check(
            std::slice::from_ref(&p),
            || Ok(Tensor::scalar(0.0)),
            1e-5,
            0,
            64,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn linear_layer_under_1e6() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let w = Parameter::new("w", Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng));
        let b = Parameter::new("b", Tensor::rand_uniform(vec![3], -1.0, 1.0, &mut rng));
        let x = Tensor::rand_uniform(vec![2, 4], -1.0, 1.0, &mut rng);
        let params = vec![w.clone(), b.clone()];
        let report = grad_check(
            &params,
            || {
                let y = linear(&x, &w.tensor, Some(&b.tensor))?;
                Ok(sum_all(&sigmoid(&y)))
            },
            1e-5,
            1,
            64,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sum_of_sigmoid_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Parameter::new("x", Tensor::rand_uniform(vec![5], -2.0, 2.0, &mut rng));
        let params = vec![x.clone()];
        let report = grad_check(&params, || Ok(sum_all(&sigmoid(&x.tensor))), 1e-5, 2, 64).unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }
}
