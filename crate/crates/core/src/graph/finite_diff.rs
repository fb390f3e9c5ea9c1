//! Central-difference gradient oracle.
//!
//! Perturbs every scalar parameter (and every input entry) by ±h and
//! differences the loss. Evaluation points sitting within 10·h of a
//! nonlinearity kink are flagged: the two-sided difference straddles the
//! kink there, so disagreement with reverse mode is expected, not a bug.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{forward, loss_and_grad, GradientSet, Network, NodeSpec, ParamGrad, Target, Value};

/// Finite-difference gradients plus the kink reliability flag.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub grads: GradientSet,
    /// True when some nonlinearity preactivation magnitude is below 10·h at
    /// the unperturbed point.
    pub kink_flagged: bool,
}

fn loss_at(net: &Network, x: &Value, target: &Target) -> Result<f64> {
    let acts = forward(net, x)?;
    Ok(loss_and_grad(net, &acts, target)?.0)
}

/// Central differences (L(θ+h) − L(θ−h)) / 2h for every parameter and input
/// entry.
pub fn finite_diff_grad(net: &Network, x: &Value, target: &Target, h: f64) -> Result<FiniteDiffReport> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let acts = forward(net, x)?;
    let mut kink_flagged = false;
    for node in net.nodes() {
        if let NodeSpec::Nonlin(_) = node.spec {
            let z = acts.value(node.inputs[0]);
            let near = match z {
                Value::Mat(m) => m.data().iter().any(|v| v.abs() < 10.0 * h),
                Value::Img(i) => i.data().iter().any(|v| v.abs() < 10.0 * h),
            };
            kink_flagged |= near;
        }
    }

    let mut work = net.clone();
    let base = net.params_flat();
    let mut grad_flat = vec![0.0; base.len()];
    for idx in 0..base.len() {
        let mut theta = base.clone();
        theta[idx] = base[idx] + h;
        work.set_params_flat(&theta)?;
        let plus = loss_at(&work, x, target)?;
        theta[idx] = base[idx] - h;
        work.set_params_flat(&theta)?;
        let minus = loss_at(&work, x, target)?;
        grad_flat[idx] = (plus - minus) / (2.0 * h);
    }
    work.set_params_flat(&base)?;

    let input = match x {
        Value::Mat(m) => {
            let mut g = Matrix::zeros(m.rows(), m.cols());
            for idx in 0..m.data().len() {
                let mut probe = m.clone();
                probe.data_mut()[idx] = m.data()[idx] + h;
                let plus = loss_at(net, &Value::Mat(probe.clone()), target)?;
                probe.data_mut()[idx] = m.data()[idx] - h;
                let minus = loss_at(net, &Value::Mat(probe), target)?;
                g.data_mut()[idx] = (plus - minus) / (2.0 * h);
            }
            Value::Mat(g)
        }
        Value::Img(img) => {
            let mut g = img.clone();
            for v in g.data_mut() {
                *v = 0.0;
            }
            for idx in 0..img.data().len() {
                let mut probe = img.clone();
                probe.data_mut()[idx] = img.data()[idx] + h;
                let plus = loss_at(net, &Value::Img(probe.clone()), target)?;
                probe.data_mut()[idx] = img.data()[idx] - h;
                let minus = loss_at(net, &Value::Img(probe), target)?;
                g.data_mut()[idx] = (plus - minus) / (2.0 * h);
            }
            Value::Img(g)
        }
    };

    Ok(FiniteDiffReport {
        grads: GradientSet::from_flat(net, &grad_flat, input)?,
        kink_flagged,
    })
}

fn tensor_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut mag_a = 0.0f64;
    let mut mag_b = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).abs());
        mag_a = mag_a.max(x.abs());
        mag_b = mag_b.max(y.abs());
    }
    diff / mag_a.max(mag_b).max(1e-12)
}

/// Max over parameter tensors (and the input) of the per-tensor relative
/// error max|a−b| / max(‖a‖_∞, ‖b‖_∞, 1e-12).
pub fn gradient_rel_error(net: &Network, a: &GradientSet, b: &GradientSet) -> f64 {
    let mut worst = 0.0f64;
    for id in 0..net.nodes().len() {
        match (&a.params[id], &b.params[id]) {
            (None, None) => {}
            (Some(ParamGrad::Dense { w: wa, b: ba }), Some(ParamGrad::Dense { w: wb, b: bb })) => {
                worst = worst.max(tensor_rel_error(wa.data(), wb.data()));
                if let (Some(ba), Some(bb)) = (ba, bb) {
                    worst = worst.max(tensor_rel_error(ba, bb));
                }
            }
            (Some(ParamGrad::Conv { k: ka, b: ba }), Some(ParamGrad::Conv { k: kb, b: bb })) => {
                worst = worst.max(tensor_rel_error(ka.data(), kb.data()));
                if let (Some(ba), Some(bb)) = (ba, bb) {
                    worst = worst.max(tensor_rel_error(ba, bb));
                }
            }
            (Some(ParamGrad::Affine { a: aa, c: ca }), Some(ParamGrad::Affine { a: ab, c: cb })) => {
                worst = worst.max(tensor_rel_error(aa, ab));
                worst = worst.max(tensor_rel_error(ca, cb));
            }
            _ => return f64::INFINITY,
        }
    }
    match (&a.input, &b.input) {
        (Value::Mat(ma), Value::Mat(mb)) => worst.max(tensor_rel_error(ma.data(), mb.data())),
        (Value::Img(ia), Value::Img(ib)) => worst.max(tensor_rel_error(ia.data(), ib.data())),
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{backward_euclidean, NetworkBuilder, NonlinKind};

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    fn analytic(net: &Network, x: &Value, target: &Target) -> GradientSet {
        let acts = forward(net, x).unwrap();
        let (_, up) = loss_and_grad(net, &acts, target).unwrap();
        backward_euclidean(net, &acts, &Value::Mat(up)).unwrap()
    }

    #[test]
    fn linear_net_matches_backward_tightly() {
        let mut b = NetworkBuilder::vector_input(3).unwrap();
        let d = b
            .dense(0, mat(2, 3, &[0.4, -1.1, 0.7, 2.0, 0.3, -0.5]), Some(vec![0.1, -0.2]))
            .unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(3, 2, &[0.5, -0.7, 1.2, 0.3, -0.9, 0.8]));
        let target = Target::Values(mat(2, 2, &[0.2, -0.1, 0.6, 1.0]));
        let report = finite_diff_grad(&net, &x, &target, 1e-5).unwrap();
        assert!(!report.kink_flagged);
        let exact = analytic(&net, &x, &target);
        assert!(gradient_rel_error(&net, &exact, &report.grads) <= 1e-8);
    }

    #[test]
    fn quadratic_in_one_weight_near_exact() {
        // L = 0.5 (w x)^2 is quadratic in w: central difference is exact up
        // to rounding.
        let mut b = NetworkBuilder::vector_input(1).unwrap();
        let d = b.dense(0, mat(1, 1, &[1.7]), None).unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(1, 1, &[2.0]));
        let target = Target::Values(mat(1, 1, &[0.0]));
        let report = finite_diff_grad(&net, &x, &target, 1e-5).unwrap();
        let exact = analytic(&net, &x, &target);
        assert!(gradient_rel_error(&net, &exact, &report.grads) <= 1e-10);
    }

    #[test]
    fn relu_mlp_generic_points() {
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d1 = b
            .dense(0, mat(3, 2, &[0.9, -0.4, 0.3, 1.2, -0.8, 0.5]), Some(vec![0.2, -0.3, 0.4]))
            .unwrap();
        let r1 = b.nonlin(d1, NonlinKind::ReLU).unwrap();
        let d2 = b.dense(r1, mat(2, 3, &[0.7, 0.1, -0.6, -1.0, 0.4, 0.2]), None).unwrap();
        let net = b.output(d2).unwrap();
        let x = Value::Mat(mat(2, 1, &[0.8, -0.6]));
        let target = Target::Values(mat(2, 1, &[0.5, -0.5]));
        let report = finite_diff_grad(&net, &x, &target, 1e-5).unwrap();
        assert!(!report.kink_flagged);
        let exact = analytic(&net, &x, &target);
        assert!(gradient_rel_error(&net, &exact, &report.grads) <= 1e-5);
    }

    #[test]
    fn kink_flag_raised_near_zero_preactivation() {
        let mut b = NetworkBuilder::vector_input(1).unwrap();
        let d = b.dense(0, mat(1, 1, &[1.0]), None).unwrap();
        let r = b.nonlin(d, NonlinKind::ReLU).unwrap();
        let net = b.output(r).unwrap();
        let target = Target::Values(mat(1, 1, &[1.0]));
        let h = 1e-5;
        // Preactivation 5e-5 < 10h: flagged.
        let near = finite_diff_grad(&net, &Value::Mat(mat(1, 1, &[5e-5])), &target, h).unwrap();
        assert!(near.kink_flagged);
        // Preactivation 0.5: unflagged.
        let far = finite_diff_grad(&net, &Value::Mat(mat(1, 1, &[0.5])), &target, h).unwrap();
        assert!(!far.kink_flagged);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut b = NetworkBuilder::vector_input(1).unwrap();
        let d = b.dense(0, mat(1, 1, &[1.0]), None).unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(1, 1, &[1.0]));
        let target = Target::Values(mat(1, 1, &[0.0]));
        assert!(finite_diff_grad(&net, &x, &target, 0.0).is_err());
    }
}
