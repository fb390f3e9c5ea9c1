//! Batched forward evaluation.
//!
//! Evaluates nodes in topological (construction) order, retaining every
//! intermediate value so backward passes can replay the computation.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix, Tensor4};

use super::{EdgeShape, ImageBatch, Network, NodeSpec, Value};

/// All node outputs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Value>,
    batch: usize,
}

impl Activations {
    pub fn value(&self, id: usize) -> &Value {
        &self.values[id]
    }

    pub fn output<'a>(&'a self, net: &Network) -> &'a Value {
        &self.values[net.output_id()]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn dense_forward(w: &Matrix, b: &Option<Vec<f64>>, x: &Matrix) -> Result<Matrix> {
    let mut y = matmul(w, x)?;
    if let Some(b) = b {
        for i in 0..y.rows() {
            for n in 0..y.cols() {
                let v = y.get(i, n) + b[i];
                y.set(i, n, v);
            }
        }
    }
    Ok(y)
}

pub(super) fn conv_forward(
    k: &Tensor4,
    b: &Option<Vec<f64>>,
    x: &ImageBatch,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> ImageBatch {
    let (c_out, c_in, kh, kw) = k.dims();
    let mut y = ImageBatch::zeros(c_out, out_h, out_w, x.batch);
    for n in 0..x.batch {
        for o in 0..c_out {
            let bias = b.as_ref().map_or(0.0, |b| b[o]);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias;
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
                                acc += k.get(o, i, u, v) * x.get(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    y
}

/// Evaluates the network on a batched input, returning every activation.
/// Rejects inputs whose shape disagrees with the input node and fails with
/// a numeric error if any node produces a non-finite value.
pub fn forward(net: &Network, x: &Value) -> Result<Activations> {
    if !x.matches(&net.input_shape()) {
        return Err(Error::Shape(format!(
            "input does not match network input shape {:?}",
            net.input_shape()
        )));
    }
    let batch = x.batch();
    if batch == 0 {
        return Err(Error::Shape("batch must contain at least one sample".into()));
    }
    let mut values: Vec<Value> = Vec::with_capacity(net.nodes().len());
    for (id, node) in net.nodes().iter().enumerate() {
        let out = match &node.spec {
            NodeSpec::Input => x.clone(),
            NodeSpec::Dense { w, b } => {
                let src = values[node.inputs[0]].as_mat()?;
                Value::Mat(dense_forward(w, b, src)?)
            }
            NodeSpec::Conv2d {
                k,
                b,
                stride,
                padding,
            } => {
                let src = values[node.inputs[0]].as_img()?;
                let (oh, ow) = match node.shape {
                    EdgeShape::Img { h, w, .. } => (h, w),
                    EdgeShape::Vec(_) => unreachable!("conv output is an image"),
                };
                Value::Img(conv_forward(k, b, src, *stride, *padding, oh, ow))
            }
            NodeSpec::Nonlin(kind) => match &values[node.inputs[0]] {
                Value::Mat(m) => {
                    let data = m.data().iter().map(|&z| kind.apply(z)).collect();
                    Value::Mat(Matrix::from_vec_unchecked(m.rows(), m.cols(), data))
                }
                Value::Img(img) => {
                    let mut out = img.clone();
                    for v in out.data_mut() {
                        *v = kind.apply(*v);
                    }
                    Value::Img(out)
                }
            },
            NodeSpec::Add => {
                let mut out = values[node.inputs[0]].clone();
                out.accumulate(&values[node.inputs[1]]);
                out
            }
            NodeSpec::Concat => {
                let dim = node.shape.len();
                let mut out = Matrix::zeros(dim, batch);
                let mut offset = 0;
                for &p in &node.inputs {
                    let part = values[p].as_mat()?;
                    for i in 0..part.rows() {
                        for n in 0..batch {
                            out.set(offset + i, n, part.get(i, n));
                        }
                    }
                    offset += part.rows();
                }
                Value::Mat(out)
            }
            NodeSpec::Split { start, len } => {
                let src = values[node.inputs[0]].as_mat()?;
                let mut out = Matrix::zeros(*len, batch);
                for i in 0..*len {
                    for n in 0..batch {
                        out.set(i, n, src.get(start + i, n));
                    }
                }
                Value::Mat(out)
            }
            NodeSpec::Permute { perm } => {
                let src = values[node.inputs[0]].as_mat()?;
                let mut out = Matrix::zeros(perm.len(), batch);
                for (i, &p) in perm.iter().enumerate() {
                    for n in 0..batch {
                        out.set(i, n, src.get(p, n));
                    }
                }
                Value::Mat(out)
            }
            NodeSpec::AffineGain { a, c } => {
                let src = values[node.inputs[0]].as_mat()?;
                let mut out = src.clone();
                for i in 0..out.rows() {
                    for n in 0..batch {
                        out.set(i, n, a[i] * src.get(i, n) + c[i]);
                    }
                }
                Value::Mat(out)
            }
            NodeSpec::Flatten => {
                let src = values[node.inputs[0]].as_img()?;
                let dim = node.shape.len();
                let mut out = Matrix::zeros(dim, batch);
                let per = src.c * src.h * src.w;
                for n in 0..batch {
                    for i in 0..per {
                        out.set(i, n, src.data()[n * per + i]);
                    }
                }
                Value::Mat(out)
            }
            NodeSpec::Output | NodeSpec::SoftmaxXentOutput => values[node.inputs[0]].clone(),
        };
        if !out.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced at node {id}"
            )));
        }
        values.push(out);
    }
    Ok(Activations { values, batch })
}
