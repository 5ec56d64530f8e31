//! Central-difference verification of backward passes.

use super::{no_grad, Result, Scalar, SeededRng, Tensor};

/// Checks every coordinate of every parameter. `f` must be a deterministic
/// forward pass producing a scalar loss from the given parameter tensors.
///
/// Returns the maximum discrepancy `|fd - analytic| / max(1, |fd|, |analytic|)`
/// (relative where gradients are large, absolute near zero).
pub fn grad_check<T: Scalar>(
    f: impl Fn() -> Result<Tensor<T>>,
    params: &[Tensor<T>],
    eps: f64,
) -> Result<f64> {
    grad_check_inner(f, params, eps, None, &mut None)
}

/// Like [`grad_check`] but probes at most `max_coords` randomly chosen
/// coordinates per parameter; used for whole-model checks.
pub fn grad_check_sampled<T: Scalar>(
    f: impl Fn() -> Result<Tensor<T>>,
    params: &[Tensor<T>],
    eps: f64,
    max_coords: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    grad_check_inner(f, params, eps, Some(max_coords), &mut Some(rng))
}

fn grad_check_inner<T: Scalar>(
    f: impl Fn() -> Result<Tensor<T>>,
    params: &[Tensor<T>],
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut Option<&mut SeededRng>,
) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut max_err = 0.0f64;
    for (p, an) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match (max_coords, rng.as_deref_mut()) {
            (Some(limit), Some(rng)) if n > limit => {
                (0..limit).map(|_| rng.uniform_usize(n)).collect()
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            let e = T::from_f64(eps);
            p.update_data(|d| d[i] = orig + e);
            let hi = no_grad(&f)?.item().to_f64();
            p.update_data(|d| d[i] = orig - e);
            let lo = no_grad(&f)?.item().to_f64();
            p.update_data(|d| d[i] = orig);
            let fd = (hi - lo) / (2.0 * eps);
            let err = (fd - an[i]).abs() / 1.0f64.max(fd.abs()).max(an[i].abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_calculus() {
        let x = Tensor::parameter(&[1], vec![3.0f64]).unwrap();
        let err = grad_check(|| x.mul(&x)?.sum_all(), &[x.clone()], 1e-5).unwrap();
        assert!(err < 1e-8, "quadratic gradcheck err {err}");
        // Analytic gradient is 2x = 6.
        x.zero_grad();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_gives_zero_both_ways() {
        let x = Tensor::parameter(&[2], vec![1.0f64, -2.0]).unwrap();
        let err = grad_check(|| Ok(Tensor::scalar(4.0)), &[x.clone()], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sampled_check_respects_limit() {
        let x = Tensor::parameter(&[100], vec![0.1f64; 100]).unwrap();
        let mut rng = SeededRng::new(5);
        let err =
            grad_check_sampled(|| x.tanh()?.mean_all(), &[x.clone()], 1e-5, 10, &mut rng).unwrap();
        assert!(err < 1e-9);
    }
}
