//! The diagonal rescaling symmetry of positively homogeneous networks.
//!
//! Every tensor edge carries one positive scale per channel/feature
//! coordinate. A gauge rescales each hidden edge and conjugates the layers
//! touching it (W ↦ S_out·W·S_in⁻¹, b ↦ S_out·b), leaving the network
//! function unchanged. Graph structure constrains which coordinates may
//! scale independently: elementwise nodes tie their output to their input,
//! Add ties all three edges, the routing nodes wire index maps, and the
//! input/output edges are pinned to identity. The solver reduces all of
//! these to equalities between scale variables, so the free gauge group is
//! read off a union-find.

use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::graph::{EdgeShape, Network, NodeId, NodeSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::union_find::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

/// Denominator guard for relative deviations on near-zero tensors.
const EPS_DEN: f64 = 1e-30;

/// Number of independent scale coordinates on an edge. Image edges scale
/// per channel; spatial positions within a channel share one scale.
pub fn gauge_dim(shape: &EdgeShape) -> usize {
    match shape {
        EdgeShape::Vec(n) => *n,
        EdgeShape::Img { c, .. } => *c,
    }
}

/// Finest partition of edge-coordinate scale variables consistent with the
/// graph, plus which classes are pinned to identity.
#[derive(Debug, Clone)]
pub struct GaugeClasses {
    /// Start of each node's variable block; one entry per node.
    offsets: Vec<usize>,
    total: usize,
    /// Dense class id per variable, assigned in variable order.
    class_of: Vec<usize>,
    pinned: Vec<bool>,
    /// Sorted node ids whose edges participate in each class.
    edge_sets: Vec<Vec<NodeId>>,
}

impl GaugeClasses {
    pub fn class(&self, node: NodeId, coord: usize) -> usize {
        self.class_of[self.offsets[node] + coord]
    }

    pub fn class_count(&self) -> usize {
        self.pinned.len()
    }

    pub fn is_pinned(&self, class: usize) -> bool {
        self.pinned[class]
    }

    pub fn free_class_count(&self) -> usize {
        self.pinned.iter().filter(|p| !**p).count()
    }

    /// Free classes that span the same set of edges count as one group; a
    /// plain L-layer MLP has L−1 of them, one per hidden edge.
    pub fn free_group_count(&self) -> usize {
        let mut groups: BTreeSet<&[NodeId]> = BTreeSet::new();
        for (cid, edges) in self.edge_sets.iter().enumerate() {
            if !self.pinned[cid] {
                groups.insert(edges.as_slice());
            }
        }
        groups.len()
    }

    fn node_dim(&self, node: NodeId) -> usize {
        let end = if node + 1 < self.offsets.len() {
            self.offsets[node + 1]
        } else {
            self.total
        };
        end - self.offsets[node]
    }
}

/// Unifies scale variables across every structural constraint. Dense and
/// Conv2d nodes impose none (rescaling moves into their parameters); all
/// other nodes equate coordinates of their edges, and the network input and
/// output are pinned to identity via a sentinel variable.
pub fn solve_gauge_constraints(net: &Network) -> GaugeClasses {
    let nodes = net.nodes();
    let mut offsets = Vec::with_capacity(nodes.len());
    let mut total = 0usize;
    for node in nodes {
        offsets.push(total);
        total += gauge_dim(&node.shape);
    }
    let pin = total;
    let mut uf = UnionFind::new(total + 1);
    let var = |id: NodeId, k: usize| offsets[id] + k;

    for (id, node) in nodes.iter().enumerate() {
        let dim = gauge_dim(&node.shape);
        match &node.spec {
            NodeSpec::Input => {
                for k in 0..dim {
                    uf.union(var(id, k), pin);
                }
            }
            NodeSpec::Dense { .. } | NodeSpec::Conv2d { .. } => {}
            NodeSpec::Nonlin(_) | NodeSpec::AffineGain { .. } => {
                for k in 0..dim {
                    uf.union(var(id, k), var(node.inputs[0], k));
                }
            }
            NodeSpec::Add => {
                for k in 0..dim {
                    uf.union(var(id, k), var(node.inputs[0], k));
                    uf.union(var(id, k), var(node.inputs[1], k));
                }
            }
            NodeSpec::Concat => {
                let mut off = 0;
                for &p in &node.inputs {
                    let d = gauge_dim(&nodes[p].shape);
                    for k in 0..d {
                        uf.union(var(id, off + k), var(p, k));
                    }
                    off += d;
                }
            }
            NodeSpec::Split { start, .. } => {
                for k in 0..dim {
                    uf.union(var(id, k), var(node.inputs[0], start + k));
                }
            }
            NodeSpec::Permute { perm } => {
                for (k, &p) in perm.iter().enumerate() {
                    uf.union(var(id, k), var(node.inputs[0], p));
                }
            }
            NodeSpec::Flatten => {
                // Output coordinate k came from input channel k / (h·w).
                let per = match nodes[node.inputs[0]].shape {
                    EdgeShape::Img { h, w, .. } => h * w,
                    EdgeShape::Vec(_) => unreachable!("flatten source is an image"),
                };
                for k in 0..dim {
                    uf.union(var(id, k), var(node.inputs[0], k / per));
                }
            }
            NodeSpec::Output | NodeSpec::SoftmaxXentOutput => {
                // Softmax is not scale-invariant, so its input is pinned
                // exactly like a plain output edge.
                for k in 0..dim {
                    uf.union(var(id, k), var(node.inputs[0], k));
                    uf.union(var(id, k), pin);
                }
            }
        }
    }

    let pin_root = uf.find(pin);
    let mut class_of = vec![usize::MAX; total];
    let mut root_to_class: HashMap<usize, usize> = HashMap::new();
    let mut pinned = Vec::new();
    for v in 0..total {
        let root = uf.find(v);
        let next = pinned.len();
        let cid = *root_to_class.entry(root).or_insert_with(|| {
            pinned.push(root == pin_root);
            next
        });
        class_of[v] = cid;
    }
    let mut edge_sets: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); pinned.len()];
    for (id, node) in nodes.iter().enumerate() {
        for k in 0..gauge_dim(&node.shape) {
            edge_sets[class_of[var(id, k)]].insert(id);
        }
    }
    GaugeClasses {
        offsets,
        total,
        class_of,
        pinned,
        edge_sets: edge_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

/// One positive scale per edge coordinate, indexed by node id. Coordinates
/// in the same gauge class must carry the same value; pinned classes carry 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeAssignment {
    pub scales: Vec<Vec<f64>>,
}

impl GaugeAssignment {
    pub fn identity(net: &Network) -> Self {
        Self {
            scales: net
                .nodes()
                .iter()
                .map(|n| vec![1.0; gauge_dim(&n.shape)])
                .collect(),
        }
    }

    pub fn node_scales(&self, id: NodeId) -> &[f64] {
        &self.scales[id]
    }

    /// Elementwise product; the diagonal group is abelian, so this is both
    /// s∘other and other∘s.
    pub fn compose(&self, other: &GaugeAssignment) -> Result<GaugeAssignment> {
        if self.scales.len() != other.scales.len() {
            return Err(Error::Shape(format!(
                "assignments cover {} vs {} nodes",
                self.scales.len(),
                other.scales.len()
            )));
        }
        let mut scales = Vec::with_capacity(self.scales.len());
        for (a, b) in self.scales.iter().zip(&other.scales) {
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "edge dimensions {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
            scales.push(a.iter().zip(b).map(|(x, y)| x * y).collect());
        }
        Ok(GaugeAssignment { scales })
    }

    pub fn inverse(&self) -> GaugeAssignment {
        GaugeAssignment {
            scales: self
                .scales
                .iter()
                .map(|v| v.iter().map(|s| 1.0 / s).collect())
                .collect(),
        }
    }
}

/// Draws one value per free class, exp-uniform over [e^{−r}, e^{r}], in
/// class-id order; pinned classes stay at 1. Deterministic in the seed.
pub fn sample_gauge(classes: &GaugeClasses, seed: u64, log_range: f64) -> Result<GaugeAssignment> {
    if !log_range.is_finite() || log_range < 0.0 {
        return Err(Error::Config(format!(
            "log_range must be finite and non-negative, got {log_range}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value = vec![1.0f64; classes.class_count()];
    for (cid, v) in value.iter_mut().enumerate() {
        if !classes.is_pinned(cid) && log_range > 0.0 {
            *v = rng.random_range(-log_range..log_range).exp();
        }
    }
    let mut scales = Vec::with_capacity(classes.offsets.len());
    for node in 0..classes.offsets.len() {
        let dim = classes.node_dim(node);
        scales.push((0..dim).map(|k| value[classes.class(node, k)]).collect());
    }
    Ok(GaugeAssignment { scales })
}

fn validate_assignment(net: &Network, s: &GaugeAssignment) -> Result<()> {
    let nodes = net.nodes();
    if s.scales.len() != nodes.len() {
        return Err(Error::ConstraintViolation(format!(
            "assignment covers {} nodes, network has {}",
            s.scales.len(),
            nodes.len()
        )));
    }
    for (id, node) in nodes.iter().enumerate() {
        let dim = gauge_dim(&node.shape);
        if s.scales[id].len() != dim {
            return Err(Error::ConstraintViolation(format!(
                "node {id} expects {dim} scales, got {}",
                s.scales[id].len()
            )));
        }
        for &v in &s.scales[id] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::ConstraintViolation(format!(
                    "scale {v} on node {id} is not strictly positive"
                )));
            }
        }
    }
    let classes = solve_gauge_constraints(net);
    let mut rep: Vec<Option<f64>> = vec![None; classes.class_count()];
    for (id, node) in nodes.iter().enumerate() {
        for k in 0..gauge_dim(&node.shape) {
            let cid = classes.class(id, k);
            let v = s.scales[id][k];
            if classes.is_pinned(cid) && v != 1.0 {
                return Err(Error::ConstraintViolation(format!(
                    "coordinate {k} of node {id} is pinned to identity but carries {v}"
                )));
            }
            match rep[cid] {
                None => rep[cid] = Some(v),
                Some(r) if r == v => {}
                Some(r) => {
                    return Err(Error::ConstraintViolation(format!(
                        "class of node {id} coordinate {k} carries both {r} and {v}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Conjugates every parameter by the edge scales: W ↦ S_out·W·S_in⁻¹,
/// biases and affine shifts pick up S_out, gains are untouched. The result
/// computes the identical function on every input.
pub fn apply_gauge(net: &Network, s: &GaugeAssignment) -> Result<Network> {
    validate_assignment(net, s)?;
    let mut out = net.clone();
    for (id, node) in net.nodes().iter().enumerate() {
        let s_out = s.node_scales(id);
        match &mut out.node_mut(id).spec {
            NodeSpec::Dense { w, b } => {
                let s_in = s.node_scales(node.inputs[0]);
                let (m, n) = w.shape();
                for i in 0..m {
                    for j in 0..n {
                        w.set(i, j, w.get(i, j) * s_out[i] / s_in[j]);
                    }
                }
                if let Some(b) = b {
                    for (bi, &sv) in b.iter_mut().zip(s_out) {
                        *bi *= sv;
                    }
                }
            }
            NodeSpec::Conv2d { k, b, .. } => {
                let s_in = s.node_scales(node.inputs[0]);
                let (c_out, c_in, kh, kw) = k.dims();
                for o in 0..c_out {
                    for i in 0..c_in {
                        let f = s_out[o] / s_in[i];
                        for u in 0..kh {
                            for v in 0..kw {
                                k.set(o, i, u, v, k.get(o, i, u, v) * f);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    for (bi, &sv) in b.iter_mut().zip(s_out) {
                        *bi *= sv;
                    }
                }
            }
            NodeSpec::AffineGain { a: _, c } => {
                // Gain is scale-invariant: out = a·(s·x) + s·c = s·(a·x + c).
                for (ci, &sv) in c.iter_mut().zip(s_out) {
                    *ci *= sv;
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Paired-trajectory comparison for one gauge, one optimizer, one batch
/// schedule. Arrays hold one entry per requested step.
#[derive(Debug, Clone)]
pub struct EquivarianceReport {
    pub max_weight_dev: Vec<f64>,
    pub loss_gap: Vec<f64>,
    pub summary_max_dev: f64,
    pub summary_max_loss_gap: f64,
    pub optimizer_label: String,
    pub gauge_seed: u64,
    pub diverged: bool,
}

impl EquivarianceReport {
    pub fn csv_body(&self) -> String {
        let mut out = String::from("step,max_weight_dev,loss_gap\n");
        for (i, (d, g)) in self.max_weight_dev.iter().zip(&self.loss_gap).enumerate() {
            writeln!(out, "{},{},{}", i + 1, d, g).expect("writing to a String");
        }
        out
    }
}

fn slice_dev(twin: &[f64], base: &[f64], factor: impl Fn(usize) -> f64) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for idx in 0..base.len() {
        let d = twin[idx] - base[idx] * factor(idx);
        num += d * d;
        den += base[idx] * base[idx];
    }
    num.sqrt() / den.sqrt().max(EPS_DEN)
}

/// Largest per-tensor relative deviation between the twin's parameters and
/// the gauged image of the base parameters. Non-finite parameters surface
/// as +inf.
fn max_param_dev(base: &Network, twin: &Network, s: &GaugeAssignment) -> f64 {
    let mut max_dev = 0.0f64;
    for id in base.param_nodes() {
        let node = base.node(id);
        let tspec = &twin.node(id).spec;
        let s_out = s.node_scales(id);
        match (&node.spec, tspec) {
            (NodeSpec::Dense { w, b }, NodeSpec::Dense { w: wt, b: bt }) => {
                let s_in = s.node_scales(node.inputs[0]);
                let n = w.cols();
                max_dev = max_dev.max(slice_dev(wt.data(), w.data(), |idx| {
                    s_out[idx / n] / s_in[idx % n]
                }));
                if let (Some(b), Some(bt)) = (b, bt) {
                    max_dev = max_dev.max(slice_dev(bt, b, |i| s_out[i]));
                }
            }
            (NodeSpec::Conv2d { k, b, .. }, NodeSpec::Conv2d { k: kt, b: bt, .. }) => {
                let s_in = s.node_scales(node.inputs[0]);
                let (_, c_in, kh, kw) = k.dims();
                let per = kh * kw;
                max_dev = max_dev.max(slice_dev(kt.data(), k.data(), |idx| {
                    let o = idx / (c_in * per);
                    let i = (idx / per) % c_in;
                    s_out[o] / s_in[i]
                }));
                if let (Some(b), Some(bt)) = (b, bt) {
                    max_dev = max_dev.max(slice_dev(bt, b, |i| s_out[i]));
                }
            }
            (NodeSpec::AffineGain { a, c }, NodeSpec::AffineGain { a: at, c: ct }) => {
                max_dev = max_dev.max(slice_dev(at, a, |_| 1.0));
                max_dev = max_dev.max(slice_dev(ct, c, |i| s_out[i]));
            }
            _ => unreachable!("parameter nodes of a gauged network keep their kind"),
        }
    }
    if max_dev.is_nan() {
        f64::INFINITY
    } else {
        max_dev
    }
}

/// Trains `net` and its gauged twin in lockstep on the same batch schedule
/// and records, after every update, the largest parameter deviation from
/// exact equivariance and the pre-update loss gap. Divergence of either
/// trajectory (non-finite loss, degenerate or non-converging
/// canonicalization) fills the remaining steps with +inf instead of
/// raising; structural errors still raise.
pub fn check_trajectory_equivariance(
    net: &Network,
    s: &GaugeAssignment,
    data: &dyn BatchSource,
    config: &OptimizerConfig,
    steps: usize,
    gauge_seed: u64,
) -> Result<EquivarianceReport> {
    let mut base = net.clone();
    let mut twin = apply_gauge(net, s)?;
    let mut opt_base = Optimizer::new(config.clone(), &base)?;
    let mut opt_twin = Optimizer::new(config.clone(), &twin)?;
    let mut max_weight_dev = Vec::with_capacity(steps);
    let mut loss_gap = Vec::with_capacity(steps);
    let mut diverged = false;
    for t in 0..steps {
        if diverged {
            max_weight_dev.push(f64::INFINITY);
            loss_gap.push(f64::INFINITY);
            continue;
        }
        let (x, target) = data.batch(t);
        let outcome = opt_base
            .step(&mut base, &x, &target)
            .and_then(|sb| opt_twin.step(&mut twin, &x, &target).map(|st| (sb, st)));
        match outcome {
            Ok((sb, st)) => {
                let mut dev = max_param_dev(&base, &twin, s);
                let mut gap = (st.loss - sb.loss).abs() / sb.loss.abs().max(EPS_DEN);
                if !dev.is_finite() || !gap.is_finite() {
                    dev = f64::INFINITY;
                    gap = f64::INFINITY;
                    diverged = true;
                }
                max_weight_dev.push(dev);
                loss_gap.push(gap);
            }
            Err(Error::Numeric(_)) | Err(Error::Degenerate(_)) | Err(Error::NoConvergence { .. }) => {
                diverged = true;
                max_weight_dev.push(f64::INFINITY);
                loss_gap.push(f64::INFINITY);
            }
            Err(other) => return Err(other),
        }
    }
    let summary_max_dev = max_weight_dev.iter().copied().fold(0.0f64, f64::max);
    let summary_max_loss_gap = loss_gap.iter().copied().fold(0.0f64, f64::max);
    Ok(EquivarianceReport {
        max_weight_dev,
        loss_gap,
        summary_max_dev,
        summary_max_loss_gap,
        optimizer_label: config.kind.label().to_string(),
        gauge_seed,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FixedBatch;
    use crate::graph::{
        backward_euclidean, forward, loss_and_grad, NetworkBuilder, NonlinKind, Target, Value,
    };
    use crate::optim::OptimizerKind;
    use crate::tensor::{rel_frobenius, Matrix};

    /// Signed entries bounded away from zero so canonicalization sees full
    /// support.
    fn rand_entry(rng: &mut ChaCha8Rng) -> f64 {
        let v: f64 = rng.random_range(-1.0f64..1.0);
        v.signum() * (0.1 + 0.9 * v.abs())
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rand_entry(rng)).collect()).unwrap()
    }

    fn mlp(sizes: &[usize], bias: bool, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = NetworkBuilder::vector_input(sizes[0]).unwrap();
        let mut prev = 0;
        for (l, pair) in sizes.windows(2).enumerate() {
            let w = rand_matrix(&mut rng, pair[1], pair[0]);
            let bvec = bias.then(|| (0..pair[1]).map(|_| rand_entry(&mut rng)).collect());
            prev = b.dense(prev, w, bvec).unwrap();
            if l + 2 < sizes.len() {
                prev = b.nonlin(prev, NonlinKind::ReLU).unwrap();
            }
        }
        b.output(prev).unwrap()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / y.abs().max(1e-30))
            .fold(0.0, f64::max)
    }

    #[test]
    fn mlp_classes_one_group_per_hidden_edge() {
        let net = mlp(&[8, 16, 16, 4], true, 1);
        let classes = solve_gauge_constraints(&net);
        assert_eq!(classes.free_class_count(), 32);
        assert_eq!(classes.free_group_count(), 2);
        // Nonlin ties its coordinates to the dense edge feeding it.
        for k in 0..16 {
            assert_eq!(classes.class(1, k), classes.class(2, k));
            assert_eq!(classes.class(3, k), classes.class(4, k));
            assert!(!classes.is_pinned(classes.class(1, k)));
        }
        // Input and final dense edge are pinned.
        assert!(classes.is_pinned(classes.class(0, 3)));
        assert!(classes.is_pinned(classes.class(5, 0)));
        assert_ne!(classes.class(1, 0), classes.class(1, 1));
    }

    #[test]
    fn single_layer_has_no_freedom() {
        let net = mlp(&[3, 2], true, 2);
        let classes = solve_gauge_constraints(&net);
        assert_eq!(classes.free_class_count(), 0);
        assert_eq!(classes.free_group_count(), 0);
    }

    #[test]
    fn residual_block_locks_skip_and_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = NetworkBuilder::vector_input(4).unwrap();
        let d1 = b.dense(0, rand_matrix(&mut rng, 4, 4), None).unwrap();
        let r = b.nonlin(d1, NonlinKind::ReLU).unwrap();
        let d2 = b.dense(r, rand_matrix(&mut rng, 4, 4), None).unwrap();
        let sum = b.add(0, d2).unwrap();
        let net = b.output(sum).unwrap();
        let classes = solve_gauge_constraints(&net);
        for k in 0..4 {
            assert_eq!(classes.class(0, k), classes.class(d2, k));
            assert_eq!(classes.class(0, k), classes.class(sum, k));
            assert!(classes.is_pinned(classes.class(sum, k)));
        }
        // Only the branch's hidden edge stays free.
        assert_eq!(classes.free_class_count(), 4);
        assert_eq!(classes.free_group_count(), 1);
    }

    #[test]
    fn routing_nodes_wire_index_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = NetworkBuilder::vector_input(3).unwrap();
        let d = b.dense(0, rand_matrix(&mut rng, 4, 3), None).unwrap();
        let parts = b.split(d, &[(0, 2), (2, 2)]).unwrap();
        let p = b.permute(parts[1], vec![1, 0]).unwrap();
        let cat = b.concat(&[parts[0], p]).unwrap();
        let d2 = b.dense(cat, rand_matrix(&mut rng, 2, 4), None).unwrap();
        let net = b.output(d2).unwrap();
        let classes = solve_gauge_constraints(&net);
        assert_eq!(classes.class(parts[0], 0), classes.class(d, 0));
        assert_eq!(classes.class(parts[1], 0), classes.class(d, 2));
        assert_eq!(classes.class(p, 0), classes.class(d, 3));
        assert_eq!(classes.class(p, 1), classes.class(d, 2));
        assert_eq!(classes.class(cat, 0), classes.class(d, 0));
        assert_eq!(classes.class(cat, 3), classes.class(d, 2));
        assert_eq!(classes.free_class_count(), 4);
    }

    #[test]
    fn sampling_respects_pins_range_and_seed() {
        let net = mlp(&[4, 8, 8, 2], true, 5);
        let classes = solve_gauge_constraints(&net);
        let s = sample_gauge(&classes, 7, 3.0).unwrap();
        for &v in s.node_scales(net.input_id()) {
            assert_eq!(v, 1.0);
        }
        for &v in s.node_scales(net.output_id()) {
            assert_eq!(v, 1.0);
        }
        let hidden = s.node_scales(1);
        assert!(hidden.iter().all(|v| (-3.0f64).exp() <= *v && *v <= 3.0f64.exp()));
        assert!(hidden.iter().any(|v| *v != 1.0));
        assert_eq!(s.node_scales(1), s.node_scales(2));
        assert_eq!(s, sample_gauge(&classes, 7, 3.0).unwrap());
        assert_ne!(s, sample_gauge(&classes, 8, 3.0).unwrap());
        let id = sample_gauge(&classes, 7, 0.0).unwrap();
        assert_eq!(id, GaugeAssignment::identity(&net));
        assert!(sample_gauge(&classes, 7, -1.0).is_err());
    }

    #[test]
    fn identity_gauge_is_a_bitwise_noop() {
        let net = mlp(&[4, 6, 3], true, 6);
        let gauged = apply_gauge(&net, &GaugeAssignment::identity(&net)).unwrap();
        assert_eq!(net.params_flat(), gauged.params_flat());
    }

    #[test]
    fn scalar_gauge_two_layer_example() {
        let net = mlp(&[2, 2, 2], true, 7);
        let mut s = GaugeAssignment::identity(&net);
        s.scales[1] = vec![2.0, 2.0];
        s.scales[2] = vec![2.0, 2.0];
        let gauged = apply_gauge(&net, &s).unwrap();
        let (w1, b1) = match &net.node(1).spec {
            NodeSpec::Dense { w, b } => (w.clone(), b.clone().unwrap()),
            _ => unreachable!(),
        };
        match &gauged.node(1).spec {
            NodeSpec::Dense { w, b } => {
                for idx in 0..4 {
                    assert_eq!(w.data()[idx], 2.0 * w1.data()[idx]);
                }
                for i in 0..2 {
                    assert_eq!(b.as_ref().unwrap()[i], 2.0 * b1[i]);
                }
            }
            _ => unreachable!(),
        }
        match (&net.node(3).spec, &gauged.node(3).spec) {
            (NodeSpec::Dense { w, b }, NodeSpec::Dense { w: wt, b: bt }) => {
                for idx in 0..4 {
                    assert_eq!(wt.data()[idx], w.data()[idx] / 2.0);
                }
                // Second-layer bias sits on the pinned output edge.
                assert_eq!(bt.as_ref().unwrap(), b.as_ref().unwrap());
            }
            _ => unreachable!(),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Value::Mat(rand_matrix(&mut rng, 2, 5));
        let base_out = forward(&net, &x).unwrap();
        let twin_out = forward(&gauged, &x).unwrap();
        let rel = rel_frobenius(
            twin_out.output(&gauged).as_mat().unwrap(),
            base_out.output(&net).as_mat().unwrap(),
            1e-30,
        )
        .unwrap();
        assert!(rel <= 1e-12);
    }

    #[test]
    fn random_gauge_preserves_the_function() {
        let net = mlp(&[5, 7, 6, 3], true, 8);
        let classes = solve_gauge_constraints(&net);
        let s = sample_gauge(&classes, 11, 3.0).unwrap();
        let gauged = apply_gauge(&net, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let x = Value::Mat(rand_matrix(&mut rng, 5, 16));
        let base_out = forward(&net, &x).unwrap();
        let twin_out = forward(&gauged, &x).unwrap();
        let rel = rel_frobenius(
            twin_out.output(&gauged).as_mat().unwrap(),
            base_out.output(&net).as_mat().unwrap(),
            1e-30,
        )
        .unwrap();
        assert!(rel <= 1e-10, "relative output deviation {rel}");
    }

    #[test]
    fn gauge_is_a_group_action() {
        let net = mlp(&[4, 6, 5, 2], true, 9);
        let classes = solve_gauge_constraints(&net);
        let s1 = sample_gauge(&classes, 21, 2.0).unwrap();
        let s2 = sample_gauge(&classes, 22, 2.0).unwrap();
        let seq = apply_gauge(&apply_gauge(&net, &s1).unwrap(), &s2).unwrap();
        let joint = apply_gauge(&net, &s1.compose(&s2).unwrap()).unwrap();
        assert!(max_rel(&seq.params_flat(), &joint.params_flat()) <= 1e-12);
        let back = apply_gauge(&apply_gauge(&net, &s1).unwrap(), &s1.inverse()).unwrap();
        assert!(max_rel(&back.params_flat(), &net.params_flat()) <= 1e-12);
    }

    #[test]
    fn inconsistent_assignments_are_rejected() {
        let net = mlp(&[3, 4, 2], true, 10);
        let classes = solve_gauge_constraints(&net);
        let mut s = sample_gauge(&classes, 5, 2.0).unwrap();
        // Nonlin output must match its input class value.
        s.scales[2][0] *= 1.5;
        assert!(matches!(
            apply_gauge(&net, &s),
            Err(Error::ConstraintViolation(_))
        ));
        let mut pinned = GaugeAssignment::identity(&net);
        pinned.scales[0][0] = 2.0;
        assert!(apply_gauge(&net, &pinned).is_err());
        let mut bad = GaugeAssignment::identity(&net);
        bad.scales[1][0] = -1.0;
        assert!(apply_gauge(&net, &bad).is_err());
    }

    #[test]
    fn euclidean_gradients_are_contravariant() {
        let net = mlp(&[4, 6, 2], true, 12);
        let classes = solve_gauge_constraints(&net);
        let s = sample_gauge(&classes, 13, 2.0).unwrap();
        let gauged = apply_gauge(&net, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let x = Value::Mat(rand_matrix(&mut rng, 4, 8));
        let target = Target::Values(rand_matrix(&mut rng, 2, 8));
        let grads = |n: &Network| {
            let acts = forward(n, &x).unwrap();
            let (_, lg) = loss_and_grad(n, &acts, &target).unwrap();
            backward_euclidean(n, &acts, &Value::Mat(lg)).unwrap()
        };
        let gb = grads(&net);
        let gt = grads(&gauged);
        for id in net.param_nodes() {
            let s_out = s.node_scales(id);
            let s_in = s.node_scales(net.node(id).inputs[0]);
            match (gb.params[id].as_ref().unwrap(), gt.params[id].as_ref().unwrap()) {
                (
                    crate::graph::ParamGrad::Dense { w, b },
                    crate::graph::ParamGrad::Dense { w: wt, b: bt },
                ) => {
                    let mut expect = w.clone();
                    for i in 0..w.rows() {
                        for j in 0..w.cols() {
                            expect.set(i, j, w.get(i, j) * s_in[j] / s_out[i]);
                        }
                    }
                    assert!(rel_frobenius(wt, &expect, 1e-30).unwrap() <= 1e-9);
                    let b = b.as_ref().unwrap();
                    let bt = bt.as_ref().unwrap();
                    let eb: Vec<f64> = b.iter().zip(s_out).map(|(v, sv)| v / sv).collect();
                    let num: f64 = bt.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum();
                    let den: f64 = eb.iter().map(|v| v * v).sum();
                    assert!(num.sqrt() <= 1e-9 * den.sqrt().max(1e-30));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn identity_gauge_trajectory_dev_is_exactly_zero() {
        let net = mlp(&[3, 5, 2], true, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(140);
        let data = FixedBatch::new(
            Value::Mat(rand_matrix(&mut rng, 3, 8)),
            Target::Values(rand_matrix(&mut rng, 2, 8)),
        );
        let cfg = OptimizerConfig::new(OptimizerKind::Ucgsd, 0.1);
        let s = GaugeAssignment::identity(&net);
        let report = check_trajectory_equivariance(&net, &s, &data, &cfg, 5, 0).unwrap();
        assert_eq!(report.max_weight_dev, vec![0.0; 5]);
        assert_eq!(report.loss_gap, vec![0.0; 5]);
        assert!(!report.diverged);
        assert_eq!(report.optimizer_label, "ucgsd");
    }

    #[test]
    fn ucgsd_trajectory_is_equivariant() {
        let net = mlp(&[4, 8, 8, 2], true, 15);
        let classes = solve_gauge_constraints(&net);
        let s = sample_gauge(&classes, 31, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(150);
        let data = FixedBatch::new(
            Value::Mat(rand_matrix(&mut rng, 4, 16)),
            Target::Values(rand_matrix(&mut rng, 2, 16)),
        );
        let cfg = OptimizerConfig::new(OptimizerKind::Ucgsd, 0.1);
        let report = check_trajectory_equivariance(&net, &s, &data, &cfg, 100, 31).unwrap();
        assert!(!report.diverged);
        assert!(
            report.summary_max_dev <= 1e-6,
            "max dev {}",
            report.summary_max_dev
        );
        assert!(
            report.summary_max_loss_gap <= 1e-8,
            "max loss gap {}",
            report.summary_max_loss_gap
        );
        assert_eq!(report.max_weight_dev.len(), 100);
    }

    #[test]
    fn sgd_trajectory_breaks_equivariance() {
        let net = mlp(&[4, 8, 8, 2], true, 16);
        let classes = solve_gauge_constraints(&net);
        let s = sample_gauge(&classes, 32, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(160);
        let data = FixedBatch::new(
            Value::Mat(rand_matrix(&mut rng, 4, 16)),
            Target::Values(rand_matrix(&mut rng, 2, 16)),
        );
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.02);
        let report = check_trajectory_equivariance(&net, &s, &data, &cfg, 100, 32).unwrap();
        assert!(
            report.summary_max_dev > 1e-2,
            "max dev {}",
            report.summary_max_dev
        );
    }

    #[test]
    fn map_gauge_switches_frames_mid_training() {
        let net = mlp(&[4, 6, 2], true, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(170);
        let x = Value::Mat(rand_matrix(&mut rng, 4, 8));
        let target = Target::Values(rand_matrix(&mut rng, 2, 8));
        let cfg = OptimizerConfig::new(OptimizerKind::UcMomentum, 0.05);
        let mut base = net.clone();
        let mut opt = Optimizer::new(cfg, &base).unwrap();
        for _ in 0..3 {
            opt.step(&mut base, &x, &target).unwrap();
        }
        let classes = solve_gauge_constraints(&base);
        let s = sample_gauge(&classes, 33, 2.0).unwrap();
        let mut twin = apply_gauge(&base, &s).unwrap();
        let mut topt = opt.map_gauge(&twin, &s).unwrap();
        opt.step(&mut base, &x, &target).unwrap();
        topt.step(&mut twin, &x, &target).unwrap();
        let dev = max_param_dev(&base, &twin, &s);
        assert!(dev <= 1e-9, "dev after switch {dev}");
    }

    #[test]
    fn report_serializes_to_csv() {
        let report = EquivarianceReport {
            max_weight_dev: vec![0.0, 1.5e-9],
            loss_gap: vec![0.0, 2.5e-11],
            summary_max_dev: 1.5e-9,
            summary_max_loss_gap: 2.5e-11,
            optimizer_label: "ucgsd".into(),
            gauge_seed: 7,
            diverged: false,
        };
        let body = report.csv_body();
        let mut lines = body.lines();
        assert_eq!(lines.next(), Some("step,max_weight_dev,loss_gap"));
        assert_eq!(lines.next(), Some("1,0,0"));
        assert_eq!(lines.next(), Some("2,0.0000000015,0.000000000025"));
    }
}
