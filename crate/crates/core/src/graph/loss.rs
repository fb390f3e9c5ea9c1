//! Scalar losses over batched outputs.
//!
//! The loss is the mean of per-sample losses over batch columns, so its
//! scale does not depend on the batch size; reverse mode then sums each
//! parameter's contributions across columns as usual.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{Activations, Network, NodeSpec};

/// Supervision for one batch: regression targets (same shape as the output)
/// or one class label per column.
#[derive(Debug, Clone)]
pub enum Target {
    Values(Matrix),
    Labels(Vec<usize>),
}

/// Mean over the batch of 0.5 * squared error. Returns the loss and its
/// gradient with respect to the predictions.
pub fn loss_mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, target is {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.rows() == 0 || pred.cols() == 0 {
        return Err(Error::Shape("loss over an empty batch".into()));
    }
    let b = pred.cols() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for i in 0..pred.rows() {
        for n in 0..pred.cols() {
            let diff = pred.get(i, n) - target.get(i, n);
            loss += 0.5 * diff * diff;
            grad.set(i, n, diff / b);
        }
    }
    Ok((loss / b, grad))
}

/// Mean over the batch of cross-entropy after a softmax, computed with the
/// usual max-shift for stability. Returns the loss and its gradient with
/// respect to the logits.
pub fn loss_softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::Shape("loss over an empty batch".into()));
    }
    if labels.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.cols()
        )));
    }
    let k = logits.rows();
    let b = logits.cols() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(k, logits.cols());
    for n in 0..logits.cols() {
        let label = labels[n];
        if label >= k {
            return Err(Error::Shape(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            max = max.max(logits.get(i, n));
        }
        let mut denom = 0.0;
        for i in 0..k {
            denom += (logits.get(i, n) - max).exp();
        }
        loss += denom.ln() + max - logits.get(label, n);
        for i in 0..k {
            let p = (logits.get(i, n) - max).exp() / denom;
            let onehot = if i == label { 1.0 } else { 0.0 };
            grad.set(i, n, (p - onehot) / b);
        }
    }
    Ok((loss / b, grad))
}

/// Evaluates the loss matching the network's terminal node and returns the
/// upstream gradient for backward passes.
pub fn loss_and_grad(net: &Network, acts: &Activations, target: &Target) -> Result<(f64, Matrix)> {
    let out = acts.output(net).as_mat()?;
    match (&net.node(net.output_id()).spec, target) {
        (NodeSpec::Output, Target::Values(t)) => loss_mse(out, t),
        (NodeSpec::SoftmaxXentOutput, Target::Labels(l)) => loss_softmax_xent(out, l),
        (NodeSpec::Output, Target::Labels(_)) => Err(Error::Config(
            "plain output node requires value targets".into(),
        )),
        (NodeSpec::SoftmaxXentOutput, Target::Values(_)) => Err(Error::Config(
            "softmax output node requires class labels".into(),
        )),
        _ => Err(Error::Shape("network has no terminal loss node".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn mse_of_identical_values_is_zero() {
        let y = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (loss, grad) = loss_mse(&y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.data(), &[0.0; 4]);
    }

    #[test]
    fn mse_known_value() {
        let pred = mat(1, 2, &[1.0, 3.0]);
        let target = mat(1, 2, &[0.0, 0.0]);
        let (loss, grad) = loss_mse(&pred, &target).unwrap();
        // (0.5*1 + 0.5*9) / 2 = 2.5; grad = diff / batch.
        assert_eq!(loss, 2.5);
        assert_eq!(grad.data(), &[0.5, 1.5]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let (loss, grad) = loss_softmax_xent(&mat(2, 1, &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() <= 1e-15);
        assert!((grad.get(0, 0) + 0.5).abs() <= 1e-15);
        assert!((grad.get(1, 0) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let (loss, grad) = loss_softmax_xent(&mat(2, 1, &[1000.0, 0.0]), &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss >= 0.0);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-6;
        let pred = mat(3, 2, &[0.3, -0.7, 1.2, 0.1, -0.4, 0.9]);
        let target = mat(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let (_, grad) = loss_mse(&pred, &target).unwrap();
        for idx in 0..6 {
            let mut plus = pred.clone();
            plus.data_mut()[idx] += h;
            let mut minus = pred.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_mse(&plus, &target).unwrap().0 - loss_mse(&minus, &target).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[idx];
            assert!((fd - a).abs() / a.abs().max(1e-6) <= 1e-6, "{fd} vs {a}");
        }
        let logits = mat(3, 2, &[0.5, -1.0, 0.2, 0.8, -0.3, 1.5]);
        let labels = [2usize, 0];
        let (_, grad) = loss_softmax_xent(&logits, &labels).unwrap();
        for idx in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += h;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_softmax_xent(&plus, &labels).unwrap().0
                - loss_softmax_xent(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[idx];
            assert!((fd - a).abs() / a.abs().max(1e-6) <= 1e-6, "{fd} vs {a}");
        }
    }

    #[test]
    fn shape_errors() {
        assert!(loss_mse(&mat(1, 1, &[1.0]), &mat(2, 1, &[1.0, 2.0])).is_err());
        assert!(loss_softmax_xent(&mat(2, 1, &[0.0, 0.0]), &[0, 1]).is_err());
        assert!(loss_softmax_xent(&mat(2, 1, &[0.0, 0.0]), &[5]).is_err());
    }
}
