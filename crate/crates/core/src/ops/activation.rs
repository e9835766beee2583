//! ReLU and Clipped ReLU, `max(0, min(x, 1))`.
//!
//! Subgradients at the kinks are 0: ReLU passes gradient only for `x > 0`,
//! Clipped ReLU only on the open interval `0 < x < 1`.

use crate::tensor::{Real, Result, Tensor, TensorError};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn clipped_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(clip_unit)
}

#[inline]
pub fn clip_unit<T: Real>(v: T) -> T {
    if v > T::ONE {
        T::ONE
    } else if v > T::ZERO {
        v
    } else {
        T::ZERO
    }
}

fn masked_grad<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    pass: impl Fn(T) -> bool,
) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("input {} vs upstream {}", input.shape(), upstream.shape()),
        });
    }
    let data = input.data().iter().zip(upstream.data()).map(|(&x, &g)| if pass(x) { g } else { T::ZERO }).collect();
    Tensor::new(input.shape(), data)
}

pub fn relu_grad<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    masked_grad("relu_grad", input, upstream, |x| x > T::ZERO)
}

pub fn clipped_relu_grad<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    masked_grad("clipped_relu_grad", input, upstream, |x| x > T::ZERO && x < T::ONE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn clipped_relu_values() {
        let y = clipped_relu(&t(&[-0.5, 0.3, 1.7, 0.0, 1.0]));
        assert_eq!(y.data(), &[0.0, 0.3, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_non_negatives() {
        let x = t(&[0.0, 0.25, 3.0, 1e9]);
        assert_eq!(relu(&x), x);
        assert_eq!(relu(&t(&[-2.0])).data(), &[0.0]);
    }

    #[test]
    fn kink_subgradients_are_zero() {
        let x = t(&[0.5, 2.0, 0.0, 1.0, -1.0]);
        let ones = t(&[1.0; 5]);
        assert_eq!(clipped_relu_grad(&x, &ones).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(relu_grad(&x, &ones).unwrap().data(), &[1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(relu_grad(&x, &t(&[1.0])).is_err());
    }
}
