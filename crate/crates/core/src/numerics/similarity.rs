use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn l2_norm<T: Scalar>(v: &Tensor<T>) -> T {
    v.dot(v).sqrt()
}

/// `u·v / (‖u‖‖v‖)`, clamped into `[-1, 1]` against rounding.
pub fn cosine_sim<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            expected: u.shape().to_vec(),
            actual: v.shape().to_vec(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let s = u.dot(v) / (nu * nv);
    Ok(s.max(-T::one()).min(T::one()))
}

/// Gradients of `grad · cos(u, v)` w.r.t. `u` and `v`.
pub fn cosine_sim_backward<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    grad: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let s = u.dot(v) / (nu * nv);
    // d cos / du = v/(|u||v|) - s·u/|u|²
    let mut gu = v.scale(grad / (nu * nv));
    gu.axpy(-grad * s / (nu * nu), u);
    let mut gv = u.scale(grad / (nu * nv));
    gv.axpy(-grad * s / (nv * nv), v);
    Ok((gu, gv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::vector(data).unwrap()
    }

    #[test]
    fn identical_orthogonal_and_scaled() {
        let u = v(&[1.0, -2.0, 3.0]);
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_sim(&u, &u.scale(2.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_rejected() {
        let err = cosine_sim(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm vector");
    }
}
