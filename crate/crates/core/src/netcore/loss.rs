use crate::error::{Error, Result};

/// Smooth L1: quadratic inside `|y - y_hat| < alpha`, linear outside.
pub fn smooth_l1(y_hat: f64, y: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let d = (y - y_hat).abs();
    Ok(if d < alpha {
        0.5 * d * (d / alpha)
    } else {
        d - 0.5 * alpha
    })
}

/// Derivative of [`smooth_l1`] with respect to `y_hat`; magnitude never
/// exceeds 1.
pub fn smooth_l1_grad(y_hat: f64, y: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let d = y_hat - y;
    Ok(if d.abs() < alpha {
        d / alpha
    } else if d > 0.0 {
        1.0
    } else {
        -1.0
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("smooth L1 threshold {alpha} must be positive")))
    }
}

/// Softmax probabilities with max-shift stabilization.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[class]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = log_total - (logits[class] - max);
    let mut grad = softmax(logits);
    grad[class] -= 1.0;
    Ok((loss, grad))
}
