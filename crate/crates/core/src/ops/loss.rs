use crate::tensor::{Real, Result, Tensor, TensorError};

/// Charbonnier epsilon used for training.
pub const CHARBONNIER_EPSILON: f64 = 0.1;

fn check_same_shape<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("prediction {} vs target {}", pred.shape(), target.shape()),
        });
    }
    if pred.shape().is_empty() {
        return Err(TensorError::InvalidArgument { op, detail: "empty tensors".into() });
    }
    Ok(())
}

/// Mean of `sqrt((pred - target)² + ε²)` over every element.
pub fn charbonnier_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, epsilon: f64) -> Result<f64> {
    check_same_shape("charbonnier_loss", pred, target)?;
    let eps2 = epsilon * epsilon;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64() - t.to_f64();
            (d * d + eps2).sqrt()
        })
        .sum();
    let loss = sum / pred.data().len() as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "charbonnier_loss" });
    }
    Ok(loss)
}

/// d loss / d pred.
pub fn charbonnier_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    check_same_shape("charbonnier_loss_grad", pred, target)?;
    let eps2 = T::from_f64(epsilon * epsilon);
    let inv_n = T::from_f64(1.0 / pred.data().len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            d / (d * d + eps2).sqrt() * inv_n
        })
        .collect();
    Tensor::new(pred.shape(), data)
}
