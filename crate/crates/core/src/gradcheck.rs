//! Central finite differences, used as the independent oracle for every
//! backward implementation.

use crate::tensor::{Scalar, Tensor};

/// Estimates `∇f(x)` with `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    assert!(h > T::zero(), "finite-difference step must be positive");
    let two_h = h + h;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let norm = |v: &[T]| v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -1.2, 7.0]);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-3);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn quadratic_at_one() {
        let x = Tensor::<f64>::from_vec(vec![1.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-3);
        assert!((g.item() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_basics() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 0.0]);
        let b = Tensor::<f64>::from_vec(vec![1.0, 0.0]);
        assert_eq!(relative_error(&a, &b), 0.0);
        let z = Tensor::<f64>::zeros(&[2]);
        assert_eq!(relative_error(&z, &z), 0.0);
        let c = Tensor::<f64>::from_vec(vec![0.0, 1.0]);
        assert!((relative_error(&a, &c) - 2f64.sqrt()).abs() < 1e-12);
    }
}
