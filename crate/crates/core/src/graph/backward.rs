//! Reverse-mode differentiation.
//!
//! One walker serves two propagation modes: Euclidean (transpose of each
//! linear map, plus parameter gradients) and canonical (the scale-consistent
//! adjoint, i.e. the transpose of each linear map's canonical representative,
//! error signals only). Elementwise and structural nodes propagate
//! identically in both modes.

use crate::canon::{canonical_project, canonicalize_kernel, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::tensor::{matmul, transpose, Matrix, Tensor4};

use super::{Activations, GradientSet, ImageBatch, Network, NodeSpec, ParamGrad, Value};

#[derive(Clone, Copy, PartialEq)]
enum AdjointMode {
    Euclidean,
    Canonical,
}

fn accumulate_into(slot: &mut Option<Value>, contribution: Value) {
    match slot {
        Some(v) => v.accumulate(&contribution),
        None => *slot = Some(contribution),
    }
}

fn dense_input_grad(w: &Matrix, g: &Matrix) -> Result<Matrix> {
    matmul(&transpose(w), g)
}

fn conv_input_grad(
    k: &Tensor4,
    g: &ImageBatch,
    x_shape: (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> ImageBatch {
    let (c_in, h, w) = x_shape;
    let (c_out, _, kh, kw) = k.dims();
    let mut gx = ImageBatch::zeros(c_in, h, w, g.batch);
    for n in 0..g.batch {
        for o in 0..c_out {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let gy = g.get(n, o, oy, ox);
                    if gy == 0.0 {
                        continue;
                    }
                    for i in 0..c_in {
                        for u in 0..kh {
                            let iy = (oy * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ix = (ox * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let cur = gx.get(n, i, iy as usize, ix as usize);
                                gx.set(n, i, iy as usize, ix as usize, cur + k.get(o, i, u, v) * gy);
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_param_grads(
    k: &Tensor4,
    has_bias: bool,
    x: &ImageBatch,
    g: &ImageBatch,
    stride: usize,
    padding: usize,
) -> (Tensor4, Option<Vec<f64>>) {
    let (c_out, c_in, kh, kw) = k.dims();
    let mut gk = Tensor4::zeros(c_out, c_in, kh, kw);
    let mut gb = if has_bias { Some(vec![0.0; c_out]) } else { None };
    for n in 0..g.batch {
        for o in 0..c_out {
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let gy = g.get(n, o, oy, ox);
                    if let Some(gb) = gb.as_mut() {
                        gb[o] += gy;
                    }
                    if gy == 0.0 {
                        continue;
                    }
                    for i in 0..c_in {
                        for u in 0..kh {
                            let iy = (oy * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let ix = (ox * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let cur = gk.get(o, i, u, v);
                                gk.set(o, i, u, v, cur + x.get(n, i, iy as usize, ix as usize) * gy);
                            }
                        }
                    }
                }
            }
        }
    }
    (gk, gb)
}

fn backprop(
    net: &Network,
    acts: &Activations,
    upstream: &Value,
    mode: AdjointMode,
) -> Result<(Vec<Option<Value>>, Vec<Option<ParamGrad>>)> {
    let out_id = net.output_id();
    if !upstream.matches(&net.node(out_id).shape) || upstream.batch() != acts.batch() {
        return Err(Error::Shape(
            "upstream gradient does not match the network output".into(),
        ));
    }
    let n_nodes = net.nodes().len();
    let mut signals: Vec<Option<Value>> = vec![None; n_nodes];
    let mut params: Vec<Option<ParamGrad>> = vec![None; n_nodes];
    signals[out_id] = Some(upstream.clone());

    for id in (0..n_nodes).rev() {
        let g = match signals[id].clone() {
            Some(g) => g,
            None => continue,
        };
        let node = net.node(id);
        match &node.spec {
            NodeSpec::Input => {}
            NodeSpec::Dense { w, b } => {
                let src = node.inputs[0];
                let gm = g.as_mat()?;
                if mode == AdjointMode::Euclidean {
                    let x = acts.value(src).as_mat()?;
                    let gw = matmul(gm, &transpose(x))?;
                    let gb = b.as_ref().map(|_| {
                        (0..gm.rows())
                            .map(|i| (0..gm.cols()).map(|n| gm.get(i, n)).sum())
                            .collect()
                    });
                    params[id] = Some(ParamGrad::Dense { w: gw, b: gb });
                    accumulate_into(&mut signals[src], Value::Mat(dense_input_grad(w, gm)?));
                } else {
                    let wp = canonical_project(w)?;
                    accumulate_into(&mut signals[src], Value::Mat(dense_input_grad(&wp, gm)?));
                }
            }
            NodeSpec::Conv2d {
                k,
                b,
                stride,
                padding,
            } => {
                let src = node.inputs[0];
                let gi = g.as_img()?;
                let x = acts.value(src).as_img()?;
                if mode == AdjointMode::Euclidean {
                    let (gk, gb) = conv_param_grads(k, b.is_some(), x, gi, *stride, *padding);
                    params[id] = Some(ParamGrad::Conv { k: gk, b: gb });
                    let gx = conv_input_grad(k, gi, (x.c, x.h, x.w), *stride, *padding);
                    accumulate_into(&mut signals[src], Value::Img(gx));
                } else {
                    let kp = canonicalize_kernel(k, DEFAULT_TOL, DEFAULT_MAX_ITER)?.kp;
                    let gx = conv_input_grad(&kp, gi, (x.c, x.h, x.w), *stride, *padding);
                    accumulate_into(&mut signals[src], Value::Img(gx));
                }
            }
            NodeSpec::Nonlin(kind) => {
                let src = node.inputs[0];
                let gz = match (&g, acts.value(src)) {
                    (Value::Mat(gm), Value::Mat(z)) => {
                        let data = gm
                            .data()
                            .iter()
                            .zip(z.data())
                            .map(|(&gv, &zv)| gv * kind.derivative(zv))
                            .collect();
                        Value::Mat(Matrix::from_vec_unchecked(gm.rows(), gm.cols(), data))
                    }
                    (Value::Img(gi), Value::Img(z)) => {
                        let mut out = gi.clone();
                        for (gv, &zv) in out.data_mut().iter_mut().zip(z.data()) {
                            *gv *= kind.derivative(zv);
                        }
                        Value::Img(out)
                    }
                    _ => unreachable!("nonlin input/gradient kinds agree by construction"),
                };
                accumulate_into(&mut signals[src], gz);
            }
            NodeSpec::Add => {
                accumulate_into(&mut signals[node.inputs[0]], g.clone());
                accumulate_into(&mut signals[node.inputs[1]], g);
            }
            NodeSpec::Concat => {
                let gm = g.as_mat()?;
                let mut offset = 0;
                for &p in &node.inputs {
                    let dim = net.node(p).shape.len();
                    let mut part = Matrix::zeros(dim, gm.cols());
                    for i in 0..dim {
                        for n in 0..gm.cols() {
                            part.set(i, n, gm.get(offset + i, n));
                        }
                    }
                    offset += dim;
                    accumulate_into(&mut signals[p], Value::Mat(part));
                }
            }
            NodeSpec::Split { start, len } => {
                let src = node.inputs[0];
                let gm = g.as_mat()?;
                let src_dim = net.node(src).shape.len();
                let mut full = Matrix::zeros(src_dim, gm.cols());
                for i in 0..*len {
                    for n in 0..gm.cols() {
                        full.set(start + i, n, gm.get(i, n));
                    }
                }
                accumulate_into(&mut signals[src], Value::Mat(full));
            }
            NodeSpec::Permute { perm } => {
                let src = node.inputs[0];
                let gm = g.as_mat()?;
                let mut back = Matrix::zeros(perm.len(), gm.cols());
                for (i, &p) in perm.iter().enumerate() {
                    for n in 0..gm.cols() {
                        back.set(p, n, gm.get(i, n));
                    }
                }
                accumulate_into(&mut signals[src], Value::Mat(back));
            }
            NodeSpec::AffineGain { a, .. } => {
                let src = node.inputs[0];
                let gm = g.as_mat()?;
                if mode == AdjointMode::Euclidean {
                    let x = acts.value(src).as_mat()?;
                    let mut ga = vec![0.0; a.len()];
                    let mut gc = vec![0.0; a.len()];
                    for i in 0..a.len() {
                        for n in 0..gm.cols() {
                            ga[i] += gm.get(i, n) * x.get(i, n);
                            gc[i] += gm.get(i, n);
                        }
                    }
                    params[id] = Some(ParamGrad::Affine { a: ga, c: gc });
                }
                let mut gx = gm.clone();
                for i in 0..a.len() {
                    for n in 0..gm.cols() {
                        gx.set(i, n, a[i] * gm.get(i, n));
                    }
                }
                accumulate_into(&mut signals[src], Value::Mat(gx));
            }
            NodeSpec::Flatten => {
                let src = node.inputs[0];
                let gm = g.as_mat()?;
                let x = acts.value(src).as_img()?;
                let per = x.c * x.h * x.w;
                let mut gi = ImageBatch::zeros(x.c, x.h, x.w, gm.cols());
                for n in 0..gm.cols() {
                    for i in 0..per {
                        gi.data_mut()[n * per + i] = gm.get(i, n);
                    }
                }
                accumulate_into(&mut signals[src], Value::Img(gi));
            }
            NodeSpec::Output | NodeSpec::SoftmaxXentOutput => {
                accumulate_into(&mut signals[node.inputs[0]], g);
            }
        }
    }
    Ok((signals, params))
}

/// Exact reverse-mode gradients with respect to every parameter and the
/// network input.
pub fn backward_euclidean(net: &Network, acts: &Activations, upstream: &Value) -> Result<GradientSet> {
    let (mut signals, params) = backprop(net, acts, upstream, AdjointMode::Euclidean)?;
    let input = signals[net.input_id()]
        .take()
        .unwrap_or_else(|| Value::zeros(&net.input_shape(), acts.batch()));
    Ok(GradientSet { params, input })
}

/// Error signals propagated through every linear node via the canonical
/// (scale-consistent) adjoint instead of the plain transpose. Returns the
/// accumulated signal on each node's output edge; nodes the loss never
/// reaches stay None.
pub fn backward_uc(net: &Network, acts: &Activations, upstream: &Value) -> Result<Vec<Option<Value>>> {
    let (signals, _) = backprop(net, acts, upstream, AdjointMode::Canonical)?;
    Ok(signals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::uc_adjoint;
    use crate::graph::{forward, NetworkBuilder, NonlinKind};
    use crate::tensor::rel_frobenius;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn dense_grad_matches_hand_oracle() {
        // y = Wx, L = 0.5*|y|^2: grad_W = y x^T, grad_x = W^T y.
        let w = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d = b.dense(0, w.clone(), None).unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(2, 1, &[1.0, 1.0]));
        let acts = forward(&net, &x).unwrap();
        let y = acts.output(&net).as_mat().unwrap().clone();
        assert_eq!(y.data(), &[3.0, 7.0]);
        let gs = backward_euclidean(&net, &acts, &Value::Mat(y)).unwrap();
        match gs.params[d].as_ref().unwrap() {
            ParamGrad::Dense { w: gw, .. } => {
                assert_eq!(gw.data(), &[3.0, 3.0, 7.0, 7.0]);
            }
            _ => panic!("expected dense gradient"),
        }
        assert_eq!(gs.input.as_mat().unwrap().data(), &[24.0, 34.0]);
    }

    #[test]
    fn relu_all_negative_zeroes_gradient() {
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d = b.dense(0, Matrix::identity(2), None).unwrap();
        let r = b.nonlin(d, NonlinKind::ReLU).unwrap();
        let net = b.output(r).unwrap();
        let acts = forward(&net, &Value::Mat(mat(2, 1, &[-1.0, -2.0]))).unwrap();
        let gs = backward_euclidean(&net, &acts, &Value::Mat(mat(2, 1, &[1.0, 1.0]))).unwrap();
        match gs.params[d].as_ref().unwrap() {
            ParamGrad::Dense { w: gw, .. } => assert_eq!(gw.data(), &[0.0; 4]),
            _ => panic!("expected dense gradient"),
        }
        assert_eq!(gs.input.as_mat().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn uc_signal_is_canonical_adjoint_times_upstream() {
        let w = mat(2, 2, &[1.0, 2.0, 4.0, 8.0]);
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d = b.dense(0, w.clone(), None).unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(2, 1, &[0.5, -0.25]));
        let acts = forward(&net, &x).unwrap();
        let gy = mat(2, 1, &[1.0, -2.0]);
        let signals = backward_uc(&net, &acts, &Value::Mat(gy.clone())).unwrap();
        let expected = matmul(&uc_adjoint(&w).unwrap(), &gy).unwrap();
        let got = signals[0].as_ref().unwrap().as_mat().unwrap();
        assert!(rel_frobenius(got, &expected, 1e-30).unwrap() <= 1e-14);
    }

    #[test]
    fn uc_equals_euclidean_on_canonical_weights() {
        // Rows and columns of |W| have unit geometric means, so W is its own
        // canonical representative and both adjoints coincide.
        let w1 = mat(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let w2 = mat(2, 2, &[0.25, 4.0, 4.0, 0.25]);
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d1 = b.dense(0, w1, None).unwrap();
        let r = b.nonlin(d1, NonlinKind::ReLU).unwrap();
        let d2 = b.dense(r, w2, None).unwrap();
        let net = b.output(d2).unwrap();
        let x = Value::Mat(mat(2, 1, &[1.0, -0.5]));
        let acts = forward(&net, &x).unwrap();
        let gy = Value::Mat(mat(2, 1, &[0.3, -0.7]));
        let gs = backward_euclidean(&net, &acts, &gy).unwrap();
        let signals = backward_uc(&net, &acts, &gy).unwrap();
        let uc_in = signals[0].as_ref().unwrap().as_mat().unwrap();
        let eu_in = gs.input.as_mat().unwrap();
        assert!(rel_frobenius(uc_in, eu_in, 1e-30).unwrap() <= 1e-12);
    }

    #[test]
    fn permute_backward_unscrambles() {
        let mut b = NetworkBuilder::vector_input(3).unwrap();
        let p = b.permute(0, vec![2, 0, 1]).unwrap();
        let net = b.output(p).unwrap();
        let acts = forward(&net, &Value::Mat(mat(3, 1, &[1.0, 2.0, 3.0]))).unwrap();
        let gs = backward_euclidean(&net, &acts, &Value::Mat(mat(3, 1, &[10.0, 20.0, 30.0]))).unwrap();
        // y = (x2, x0, x1): dL/dx = (20, 30, 10).
        assert_eq!(gs.input.as_mat().unwrap().data(), &[20.0, 30.0, 10.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x doubles the input gradient.
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let s = b.add(0, 0).unwrap();
        let net = b.output(s).unwrap();
        let acts = forward(&net, &Value::Mat(mat(2, 1, &[1.0, 2.0]))).unwrap();
        let gs = backward_euclidean(&net, &acts, &Value::Mat(mat(2, 1, &[1.0, 1.0]))).unwrap();
        assert_eq!(gs.input.as_mat().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn batch_gradients_sum_over_columns() {
        let w = mat(1, 2, &[1.0, -1.0]);
        let mut b = NetworkBuilder::vector_input(2).unwrap();
        let d = b.dense(0, w, Some(vec![0.0])).unwrap();
        let net = b.output(d).unwrap();
        let x = Value::Mat(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let acts = forward(&net, &x).unwrap();
        let gs = backward_euclidean(&net, &acts, &Value::Mat(mat(1, 2, &[1.0, 1.0]))).unwrap();
        match gs.params[d].as_ref().unwrap() {
            ParamGrad::Dense { w: gw, b: gb } => {
                // grad_W = sum_n g_n x_n^T = (1+2, 3+4); grad_b = 2.
                assert_eq!(gw.data(), &[3.0, 7.0]);
                assert_eq!(gb.as_deref().unwrap(), &[2.0]);
            }
            _ => panic!("expected dense gradient"),
        }
    }
}
