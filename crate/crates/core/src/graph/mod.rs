//! Network DAG: typed nodes, shape-checked construction, batched values.
//!
//! A network is a topologically ordered node list built through
//! [`NetworkBuilder`]; node inputs always reference earlier nodes, so the
//! graph is acyclic by construction. Each node has exactly one output edge
//! whose shape is fixed at build time. Vector edges carry batches as matrix
//! columns; image edges carry batches of (channel, height, width) tensors.
//!
//! Only positively homogeneous nonlinearities are representable inside the
//! graph; softmax exists solely as the terminal loss node, where the gauge
//! is pinned to identity anyway.

mod backward;
mod finite_diff;
mod forward;
pub mod io;
mod loss;

pub use backward::{backward_euclidean, backward_uc};
pub use finite_diff::{finite_diff_grad, gradient_rel_error, FiniteDiffReport};
pub use forward::{forward, Activations};
pub use loss::{loss_and_grad, loss_mse, loss_softmax_xent, Target};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

pub type NodeId = usize;

/// Shape of a node's output edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeShape {
    Vec(usize),
    Img { c: usize, h: usize, w: usize },
}

impl EdgeShape {
    /// Number of scalar coordinates per sample.
    pub fn len(&self) -> usize {
        match self {
            EdgeShape::Vec(n) => *n,
            EdgeShape::Img { c, h, w } => c * h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Positively homogeneous elementwise nonlinearities. The derivative at
/// exactly zero is taken from the negative-side branch (0 for ReLU).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinKind {
    ReLU,
    LeakyReLU(f64),
    Abs,
}

impl NonlinKind {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            NonlinKind::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            NonlinKind::LeakyReLU(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            NonlinKind::Abs => z.abs(),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            NonlinKind::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            NonlinKind::LeakyReLU(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            NonlinKind::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Node kinds with their parameters.
#[derive(Debug, Clone)]
pub enum NodeSpec {
    Input,
    Dense {
        w: Matrix,
        b: Option<Vec<f64>>,
    },
    Conv2d {
        k: Tensor4,
        b: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
    },
    Nonlin(NonlinKind),
    Add,
    Concat,
    /// Extracts coordinates [start, start + len) of the input; a multi-way
    /// split is a fan of these nodes sharing one source.
    Split {
        start: usize,
        len: usize,
    },
    /// y[i] = x[perm[i]].
    Permute {
        perm: Vec<usize>,
    },
    AffineGain {
        a: Vec<f64>,
        c: Vec<f64>,
    },
    Flatten,
    Output,
    SoftmaxXentOutput,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub spec: NodeSpec,
    pub inputs: Vec<NodeId>,
    pub shape: EdgeShape,
}

/// Batch of image activations, layout (sample, channel, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub batch: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn zeros(c: usize, h: usize, w: usize, batch: usize) -> Self {
        Self {
            c,
            h,
            w,
            batch,
            data: vec![0.0; c * h * w * batch],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, batch: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w * batch {
            return Err(Error::Shape(format!(
                "expected {} entries for a batch of {} ({},{},{}) images, got {}",
                c * h * w * batch,
                batch,
                c,
                h,
                w,
                data.len()
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            batch,
            data,
        })
    }

    #[inline]
    pub fn get(&self, n: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + ch) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, ch: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + ch) * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets a matrix of flattened columns (channel-major per sample)
    /// as an image batch.
    pub fn from_columns(m: &Matrix, c: usize, h: usize, w: usize) -> Result<Self> {
        if m.rows() != c * h * w {
            return Err(Error::Shape(format!(
                "matrix has {} rows, image needs {}",
                m.rows(),
                c * h * w
            )));
        }
        let batch = m.cols();
        let mut img = ImageBatch::zeros(c, h, w, batch);
        for n in 0..batch {
            for i in 0..c * h * w {
                img.data[n * c * h * w + i] = m.get(i, n);
            }
        }
        Ok(img)
    }
}

/// A batched activation or gradient value on an edge.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Mat(Matrix),
    Img(ImageBatch),
}

impl Value {
    pub fn as_mat(&self) -> Result<&Matrix> {
        match self {
            Value::Mat(m) => Ok(m),
            Value::Img(_) => Err(Error::Shape("expected a vector value, got an image".into())),
        }
    }

    pub fn as_img(&self) -> Result<&ImageBatch> {
        match self {
            Value::Img(i) => Ok(i),
            Value::Mat(_) => Err(Error::Shape("expected an image value, got a vector".into())),
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            Value::Mat(m) => m.cols(),
            Value::Img(i) => i.batch,
        }
    }

    pub fn zeros(shape: &EdgeShape, batch: usize) -> Value {
        match shape {
            EdgeShape::Vec(n) => Value::Mat(Matrix::zeros(*n, batch)),
            EdgeShape::Img { c, h, w } => Value::Img(ImageBatch::zeros(*c, *h, *w, batch)),
        }
    }

    pub fn matches(&self, shape: &EdgeShape) -> bool {
        match (self, shape) {
            (Value::Mat(m), EdgeShape::Vec(n)) => m.rows() == *n,
            (Value::Img(i), EdgeShape::Img { c, h, w }) => i.c == *c && i.h == *h && i.w == *w,
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Mat(m) => m.is_finite(),
            Value::Img(i) => i.data.iter().all(|v| v.is_finite()),
        }
    }

    /// Elementwise in-place accumulation; shapes must already agree.
    pub(crate) fn accumulate(&mut self, other: &Value) {
        match (self, other) {
            (Value::Mat(a), Value::Mat(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (Value::Img(a), Value::Img(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            _ => unreachable!("accumulate called with mismatched value kinds"),
        }
    }
}

/// Per-parameter gradients for one node.
#[derive(Debug, Clone)]
pub enum ParamGrad {
    Dense { w: Matrix, b: Option<Vec<f64>> },
    Conv { k: Tensor4, b: Option<Vec<f64>> },
    Affine { a: Vec<f64>, c: Vec<f64> },
}

/// Gradients of the loss with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct GradientSet {
    /// Aligned with node ids; None for parameterless nodes.
    pub params: Vec<Option<ParamGrad>>,
    /// Gradient with respect to the network input.
    pub input: Value,
}

impl GradientSet {
    /// Rebuilds per-node gradients from a flat vector in the network's
    /// parameter walk order.
    pub fn from_flat(net: &Network, flat: &[f64], input: Value) -> Result<Self> {
        if flat.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "flat gradient has {} entries, network has {} parameters",
                flat.len(),
                net.param_count()
            )));
        }
        let mut params: Vec<Option<ParamGrad>> = vec![None; net.nodes.len()];
        let mut pos = 0;
        for (id, n) in net.nodes.iter().enumerate() {
            match &n.spec {
                NodeSpec::Dense { w, b } => {
                    let len = w.data().len();
                    let gw = Matrix::from_vec_unchecked(w.rows(), w.cols(), flat[pos..pos + len].to_vec());
                    pos += len;
                    let gb = b.as_ref().map(|b| {
                        let out = flat[pos..pos + b.len()].to_vec();
                        pos += b.len();
                        out
                    });
                    params[id] = Some(ParamGrad::Dense { w: gw, b: gb });
                }
                NodeSpec::Conv2d { k, b, .. } => {
                    let len = k.data().len();
                    let (co, ci, kh, kw) = k.dims();
                    let gk = Tensor4::from_vec_unchecked(co, ci, kh, kw, flat[pos..pos + len].to_vec());
                    pos += len;
                    let gb = b.as_ref().map(|b| {
                        let out = flat[pos..pos + b.len()].to_vec();
                        pos += b.len();
                        out
                    });
                    params[id] = Some(ParamGrad::Conv { k: gk, b: gb });
                }
                NodeSpec::AffineGain { a, c } => {
                    let ga = flat[pos..pos + a.len()].to_vec();
                    pos += a.len();
                    let gc = flat[pos..pos + c.len()].to_vec();
                    pos += c.len();
                    params[id] = Some(ParamGrad::Affine { a: ga, c: gc });
                }
                _ => {}
            }
        }
        Ok(GradientSet { params, input })
    }

    /// Flattens per-node gradients in the network's parameter walk order.
    pub fn to_flat(&self, net: &Network) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.param_count());
        for id in 0..net.nodes.len() {
            if let Some(p) = &self.params[id] {
                match p {
                    ParamGrad::Dense { w, b } => {
                        out.extend_from_slice(w.data());
                        if let Some(b) = b {
                            out.extend_from_slice(b);
                        }
                    }
                    ParamGrad::Conv { k, b } => {
                        out.extend_from_slice(k.data());
                        if let Some(b) = b {
                            out.extend_from_slice(b);
                        }
                    }
                    ParamGrad::Affine { a, c } => {
                        out.extend_from_slice(a);
                        out.extend_from_slice(c);
                    }
                }
            }
        }
        out
    }

    /// Euclidean norm over every parameter gradient entry.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in self.params.iter().flatten() {
            match p {
                ParamGrad::Dense { w, b } => {
                    acc += w.data().iter().map(|v| v * v).sum::<f64>();
                    if let Some(b) = b {
                        acc += b.iter().map(|v| v * v).sum::<f64>();
                    }
                }
                ParamGrad::Conv { k, b } => {
                    acc += k.data().iter().map(|v| v * v).sum::<f64>();
                    if let Some(b) = b {
                        acc += b.iter().map(|v| v * v).sum::<f64>();
                    }
                }
                ParamGrad::Affine { a, c } => {
                    acc += a.iter().map(|v| v * v).sum::<f64>();
                    acc += c.iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
        acc.sqrt()
    }
}

/// A validated, topologically ordered network.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    input: NodeId,
    output: NodeId,
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    pub fn input_id(&self) -> NodeId {
        self.input
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> EdgeShape {
        self.nodes[self.input].shape
    }

    pub fn output_shape(&self) -> EdgeShape {
        self.nodes[self.output].shape
    }

    /// Total scalar parameter count, in the fixed walk order (node id order;
    /// within a node: weights/kernel, then bias; gain, then shift).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.spec {
                NodeSpec::Dense { w, b } => w.data().len() + b.as_ref().map_or(0, |b| b.len()),
                NodeSpec::Conv2d { k, b, .. } => k.data().len() + b.as_ref().map_or(0, |b| b.len()),
                NodeSpec::AffineGain { a, c } => a.len() + c.len(),
                _ => 0,
            })
            .sum()
    }

    /// Reads the flat parameter vector in walk order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in &self.nodes {
            match &n.spec {
                NodeSpec::Dense { w, b } => {
                    out.extend_from_slice(w.data());
                    if let Some(b) = b {
                        out.extend_from_slice(b);
                    }
                }
                NodeSpec::Conv2d { k, b, .. } => {
                    out.extend_from_slice(k.data());
                    if let Some(b) = b {
                        out.extend_from_slice(b);
                    }
                }
                NodeSpec::AffineGain { a, c } => {
                    out.extend_from_slice(a);
                    out.extend_from_slice(c);
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites all parameters from a flat vector in walk order.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for n in &mut self.nodes {
            match &mut n.spec {
                NodeSpec::Dense { w, b } => {
                    let len = w.data().len();
                    w.data_mut().copy_from_slice(&flat[pos..pos + len]);
                    pos += len;
                    if let Some(b) = b {
                        let blen = b.len();
                        b.copy_from_slice(&flat[pos..pos + blen]);
                        pos += blen;
                    }
                }
                NodeSpec::Conv2d { k, b, .. } => {
                    let len = k.data().len();
                    k.data_mut().copy_from_slice(&flat[pos..pos + len]);
                    pos += len;
                    if let Some(b) = b {
                        let blen = b.len();
                        b.copy_from_slice(&flat[pos..pos + blen]);
                        pos += blen;
                    }
                }
                NodeSpec::AffineGain { a, c } => {
                    let alen = a.len();
                    a.copy_from_slice(&flat[pos..pos + alen]);
                    pos += alen;
                    let clen = c.len();
                    c.copy_from_slice(&flat[pos..pos + clen]);
                    pos += clen;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Ids of nodes carrying trainable parameters, in walk order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(
                    n.spec,
                    NodeSpec::Dense { .. } | NodeSpec::Conv2d { .. } | NodeSpec::AffineGain { .. }
                )
            })
            .map(|(id, _)| id)
            .collect()
    }
}

/// Incremental shape-checked network construction. The input node is created
/// first; finishing with an output node yields the validated [`Network`].
pub struct NetworkBuilder {
    nodes: Vec<Node>,
}

impl NetworkBuilder {
    pub fn vector_input(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("input dimension must be positive".into()));
        }
        Ok(Self {
            nodes: vec![Node {
                spec: NodeSpec::Input,
                inputs: vec![],
                shape: EdgeShape::Vec(dim),
            }],
        })
    }

    pub fn image_input(c: usize, h: usize, w: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        Ok(Self {
            nodes: vec![Node {
                spec: NodeSpec::Input,
                inputs: vec![],
                shape: EdgeShape::Img { c, h, w },
            }],
        })
    }

    fn shape_of(&self, id: NodeId) -> Result<EdgeShape> {
        self.nodes
            .get(id)
            .map(|n| n.shape)
            .ok_or_else(|| Error::Shape(format!("node {id} does not exist")))
    }

    fn vec_dim(&self, id: NodeId) -> Result<usize> {
        match self.shape_of(id)? {
            EdgeShape::Vec(n) => Ok(n),
            EdgeShape::Img { .. } => Err(Error::Shape(format!(
                "node {id} produces an image, a vector is required"
            ))),
        }
    }

    fn push(&mut self, spec: NodeSpec, inputs: Vec<NodeId>, shape: EdgeShape) -> NodeId {
        self.nodes.push(Node {
            spec,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    pub fn dense(&mut self, src: NodeId, w: Matrix, b: Option<Vec<f64>>) -> Result<NodeId> {
        let in_dim = self.vec_dim(src)?;
        if w.cols() != in_dim {
            return Err(Error::Shape(format!(
                "dense weight has {} columns, input has dimension {}",
                w.cols(),
                in_dim
            )));
        }
        if let Some(b) = &b {
            if b.len() != w.rows() {
                return Err(Error::Shape(format!(
                    "bias has length {}, weight has {} rows",
                    b.len(),
                    w.rows()
                )));
            }
        }
        let shape = EdgeShape::Vec(w.rows());
        Ok(self.push(NodeSpec::Dense { w, b }, vec![src], shape))
    }

    pub fn conv2d(
        &mut self,
        src: NodeId,
        k: Tensor4,
        b: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = match self.shape_of(src)? {
            EdgeShape::Img { c, h, w } => (c, h, w),
            EdgeShape::Vec(_) => {
                return Err(Error::Shape("conv2d requires an image input".into()));
            }
        };
        if k.c_in() != c {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, edge has {}",
                k.c_in(),
                c
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be at least 1".into()));
        }
        if h + 2 * padding < k.kh() || w + 2 * padding < k.kw() {
            return Err(Error::Shape("kernel larger than padded input".into()));
        }
        if let Some(b) = &b {
            if b.len() != k.c_out() {
                return Err(Error::Shape(format!(
                    "conv bias has length {}, kernel has {} output channels",
                    b.len(),
                    k.c_out()
                )));
            }
        }
        let oh = (h + 2 * padding - k.kh()) / stride + 1;
        let ow = (w + 2 * padding - k.kw()) / stride + 1;
        let shape = EdgeShape::Img {
            c: k.c_out(),
            h: oh,
            w: ow,
        };
        Ok(self.push(
            NodeSpec::Conv2d {
                k,
                b,
                stride,
                padding,
            },
            vec![src],
            shape,
        ))
    }

    pub fn nonlin(&mut self, src: NodeId, kind: NonlinKind) -> Result<NodeId> {
        let shape = self.shape_of(src)?;
        Ok(self.push(NodeSpec::Nonlin(kind), vec![src], shape))
    }

    pub fn add(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let ls = self.shape_of(left)?;
        let rs = self.shape_of(right)?;
        if ls != rs {
            return Err(Error::Shape(format!(
                "add operands disagree: {ls:?} vs {rs:?}"
            )));
        }
        Ok(self.push(NodeSpec::Add, vec![left, right], ls))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat needs at least one part".into()));
        }
        let mut total = 0;
        for &p in parts {
            total += self.vec_dim(p)?;
        }
        Ok(self.push(NodeSpec::Concat, parts.to_vec(), EdgeShape::Vec(total)))
    }

    /// Creates one slice node per requested range over the same source.
    pub fn split(&mut self, src: NodeId, ranges: &[(usize, usize)]) -> Result<Vec<NodeId>> {
        let dim = self.vec_dim(src)?;
        if ranges.is_empty() {
            return Err(Error::Shape("split needs at least one range".into()));
        }
        let mut ids = Vec::with_capacity(ranges.len());
        for &(start, len) in ranges {
            if len == 0 || start + len > dim {
                return Err(Error::Shape(format!(
                    "range [{start}, {}) out of bounds for dimension {dim}",
                    start + len
                )));
            }
            ids.push(self.push(NodeSpec::Split { start, len }, vec![src], EdgeShape::Vec(len)));
        }
        Ok(ids)
    }

    pub fn permute(&mut self, src: NodeId, perm: Vec<usize>) -> Result<NodeId> {
        let dim = self.vec_dim(src)?;
        if perm.len() != dim {
            return Err(Error::Shape(format!(
                "permutation has length {}, dimension is {dim}",
                perm.len()
            )));
        }
        let mut seen = vec![false; dim];
        for &p in &perm {
            if p >= dim || seen[p] {
                return Err(Error::Shape("not a permutation".into()));
            }
            seen[p] = true;
        }
        Ok(self.push(NodeSpec::Permute { perm }, vec![src], EdgeShape::Vec(dim)))
    }

    pub fn affine_gain(&mut self, src: NodeId, a: Vec<f64>, c: Vec<f64>) -> Result<NodeId> {
        let dim = self.vec_dim(src)?;
        if a.len() != dim || c.len() != dim {
            return Err(Error::Shape(format!(
                "affine gain/shift lengths {}/{} must equal dimension {dim}",
                a.len(),
                c.len()
            )));
        }
        Ok(self.push(
            NodeSpec::AffineGain { a, c },
            vec![src],
            EdgeShape::Vec(dim),
        ))
    }

    pub fn flatten(&mut self, src: NodeId) -> Result<NodeId> {
        match self.shape_of(src)? {
            EdgeShape::Img { c, h, w } => {
                Ok(self.push(NodeSpec::Flatten, vec![src], EdgeShape::Vec(c * h * w)))
            }
            EdgeShape::Vec(_) => Err(Error::Shape("flatten requires an image input".into())),
        }
    }

    pub fn output(mut self, src: NodeId) -> Result<Network> {
        let dim = self.vec_dim(src)?;
        let id = self.push(NodeSpec::Output, vec![src], EdgeShape::Vec(dim));
        Ok(Network {
            nodes: self.nodes,
            input: 0,
            output: id,
        })
    }

    pub fn softmax_xent_output(mut self, src: NodeId) -> Result<Network> {
        let dim = self.vec_dim(src)?;
        if dim < 2 {
            return Err(Error::Shape("softmax output needs at least 2 logits".into()));
        }
        let id = self.push(NodeSpec::SoftmaxXentOutput, vec![src], EdgeShape::Vec(dim));
        Ok(Network {
            nodes: self.nodes,
            input: 0,
            output: id,
        })
    }
}
