//! Scale-equivariant update rules and the training driver.
//!
//! Every UC rule is gradient descent in canonical coordinates pushed forward
//! to the original parameters: with W = D·W′·E the canonical gradient is
//! D·G·E and the induced update is W⁺ = W − η·D²·G·E². All rules here reduce
//! to one elementwise kernel over flat parameter slices, driven by the
//! per-entry canonical scale d_i·e_j of the owning layer.
//!
//! Layers are canonicalized as whole affine operators: a bias joins the
//! balanced matrix as one extra column whose input coordinate never rescales
//! (it feeds from the constant 1). The scale products used by the updates,
//! d_i·e_j for weights and d_i·e_b for the bias, are then independent of the
//! per-component split convention, which is what makes the bias rule exactly
//! equivariant; a lone output scale would carry an arbitrary component
//! offset that a gauge shifts.
//!
//! Optimizer state lives in original coordinates and is mapped through the
//! current frames on every step, so stored velocity transforms under a gauge
//! exactly like the parameter it belongs to (second moments with squared
//! factors).

use crate::canon::{balance_engine, rz_canonicalize, DEFAULT_MAX_ITER, DEFAULT_TOL, ZERO_THRESHOLD};
use crate::error::{Error, Result};
use crate::gauge::GaugeAssignment;
use crate::graph::{
    backward_euclidean, forward, loss_and_grad, Network, NodeSpec, ParamGrad, Target, Value,
};
use crate::tensor::{DiagVec, Matrix, Tensor4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Ucgsd,
    UcMomentum,
    UcAdam,
    Sgd,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn label(&self) -> &'static str {
        match self {
            OptimizerKind::Ucgsd => "ucgsd",
            OptimizerKind::UcMomentum => "uc_momentum",
            OptimizerKind::UcAdam => "uc_adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }

    /// Whether the rule preconditions with canonical frames.
    pub fn is_uc(&self) -> bool {
        matches!(
            self,
            OptimizerKind::Ucgsd | OptimizerKind::UcMomentum | OptimizerKind::UcAdam
        )
    }
}

/// When the canonical frames D, E are recomputed. PerStep refreshes from the
/// current parameters before every update; Frozen keeps the frames computed
/// at construction (ablation only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    #[default]
    PerStep,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    #[serde(default)]
    pub refresh: RefreshPolicy,
}

fn default_mu() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps_adam() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            mu: default_mu(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps_adam(),
            refresh: RefreshPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::Config(format!(
                "eta must be finite and positive, got {}",
                self.eta
            )));
        }
        if !self.mu.is_finite() || !(0.0..1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0, 1), got {}", self.mu)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !v.is_finite() || !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !self.eps_adam.is_finite() || self.eps_adam <= 0.0 {
            return Err(Error::Config(format!(
                "eps_adam must be finite and positive, got {}",
                self.eps_adam
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise kernels over flat slices. `sp[idx]` is the canonical scale of
// parameter entry idx (d_i·e_j for a matrix entry); every rule is phrased as
// a delta in original coordinates so a zero gradient moves nothing, bitwise.
// ---------------------------------------------------------------------------

fn gsd_kernel(p: &mut [f64], g: &[f64], sp: &[f64], eta: f64) {
    for idx in 0..p.len() {
        p[idx] -= eta * sp[idx] * sp[idx] * g[idx];
    }
}

/// v is velocity in original coordinates; mapped to canonical, blended, and
/// mapped back each call.
fn momentum_kernel(p: &mut [f64], g: &[f64], sp: &[f64], v: &mut [f64], eta: f64, mu: f64) {
    for idx in 0..p.len() {
        let s = sp[idx];
        let vpn = mu * (v[idx] / s) + s * g[idx];
        p[idx] -= eta * s * vpn;
        v[idx] = s * vpn;
    }
}

/// m1/m2 are Adam moments in original coordinates with canonical semantics:
/// the canonical moments are m1/s and m2/s², so re-expressing them against a
/// drifted frame is a single division here. `t` is the post-increment step
/// count used for bias correction.
#[allow(clippy::too_many_arguments)]
fn adam_kernel(
    p: &mut [f64],
    g: &[f64],
    sp: &[f64],
    m1: &mut [f64],
    m2: &mut [f64],
    t: u64,
    eta: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for idx in 0..p.len() {
        let s = sp[idx];
        let gp = s * g[idx];
        let m1n = beta1 * (m1[idx] / s) + (1.0 - beta1) * gp;
        let m2n = beta2 * (m2[idx] / (s * s)) + (1.0 - beta2) * gp * gp;
        let mhat = m1n / c1;
        let vhat = m2n / c2;
        p[idx] -= eta * s * (mhat / (vhat.sqrt() + eps));
        m1[idx] = s * m1n;
        m2[idx] = s * s * m2n;
    }
}

fn sgd_momentum_kernel(p: &mut [f64], g: &[f64], v: &mut [f64], eta: f64, mu: f64) {
    for idx in 0..p.len() {
        v[idx] = mu * v[idx] + g[idx];
        p[idx] -= eta * v[idx];
    }
}

// ---------------------------------------------------------------------------
// Standalone single-tensor rules.
// ---------------------------------------------------------------------------

fn check_same_shape(w: &Matrix, g: &Matrix) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "weight is {}x{}, gradient is {}x{}",
            w.rows(),
            w.cols(),
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}

fn matrix_scale_products(d: &DiagVec, e: &DiagVec) -> Vec<f64> {
    let mut sp = Vec::with_capacity(d.len() * e.len());
    for i in 0..d.len() {
        for j in 0..e.len() {
            sp.push(d.get(i) * e.get(j));
        }
    }
    sp
}

/// W⁺ = W − η·D²·G·E², with D, E recomputed from W.
pub fn ucgsd_step(w: &Matrix, g: &Matrix, eta: f64) -> Result<Matrix> {
    check_same_shape(w, g)?;
    let dec = rz_canonicalize(w, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let sp = matrix_scale_products(&dec.d, &dec.e);
    let mut out = w.clone();
    gsd_kernel(out.data_mut(), g.data(), &sp, eta);
    Ok(out)
}

/// b⁺ = b − η·D²·g_b, where d carries the per-coordinate bias scale of the
/// owning layer's canonicalization.
pub fn ucgsd_bias_step(b: &[f64], g_b: &[f64], eta: f64, d: &DiagVec) -> Result<Vec<f64>> {
    if b.len() != g_b.len() || b.len() != d.len() {
        return Err(Error::Shape(format!(
            "bias step length mismatch: b {}, g {}, d {}",
            b.len(),
            g_b.len(),
            d.len()
        )));
    }
    let mut out = b.to_vec();
    let sp = d.entries().to_vec();
    gsd_kernel(&mut out, g_b, &sp, eta);
    Ok(out)
}

/// K⁺[i,j,u,v] = K[i,j,u,v] − η·d_i²·G[i,j,u,v]·e_j², the channel scales
/// broadcast over spatial indices.
pub fn ucgsd_conv_step(
    k: &Tensor4,
    g_k: &Tensor4,
    eta: f64,
    d: &DiagVec,
    e: &DiagVec,
) -> Result<Tensor4> {
    if k.dims() != g_k.dims() {
        return Err(Error::Shape(format!(
            "kernel is {:?}, gradient is {:?}",
            k.dims(),
            g_k.dims()
        )));
    }
    let (c_out, c_in, _, _) = k.dims();
    if d.len() != c_out || e.len() != c_in {
        return Err(Error::Shape(format!(
            "channel scales {}x{} do not match kernel {:?}",
            d.len(),
            e.len(),
            k.dims()
        )));
    }
    let sp = kernel_scale_products(k, d, e, 1.0);
    let mut out = k.clone();
    gsd_kernel(out.data_mut(), g_k.data(), &sp, eta);
    Ok(out)
}

fn kernel_scale_products(k: &Tensor4, d: &DiagVec, e: &DiagVec, _eb: f64) -> Vec<f64> {
    let (c_out, c_in, kh, kw) = k.dims();
    let mut sp = Vec::with_capacity(c_out * c_in * kh * kw);
    for i in 0..c_out {
        for j in 0..c_in {
            let s = d.get(i) * e.get(j);
            for _ in 0..kh * kw {
                sp.push(s);
            }
        }
    }
    sp
}

/// Velocity for the momentum rules, stored in original coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub v: Matrix,
}

impl MomentumState {
    pub fn zeros_like(w: &Matrix) -> Self {
        Self {
            v: Matrix::zeros(w.rows(), w.cols()),
        }
    }
}

/// V′ = D⁻¹·V·E⁻¹; V′⁺ = μ·V′ + D·G·E; W⁺ = W − η·D·V′⁺·E. The returned
/// state holds D·V′⁺·E, i.e. the updated velocity back in original
/// coordinates.
pub fn uc_momentum_step(
    w: &Matrix,
    g: &Matrix,
    state: &MomentumState,
    eta: f64,
    mu: f64,
) -> Result<(Matrix, MomentumState)> {
    check_same_shape(w, g)?;
    check_same_shape(w, &state.v)?;
    let dec = rz_canonicalize(w, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let sp = matrix_scale_products(&dec.d, &dec.e);
    let mut out = w.clone();
    let mut v = state.v.clone();
    momentum_kernel(out.data_mut(), g.data(), &sp, v.data_mut(), eta, mu);
    Ok((out, MomentumState { v }))
}

/// Adam moments in original coordinates with canonical semantics (first
/// moment divides by d_i·e_j, second by its square) plus the shared step
/// counter for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Matrix,
    pub m2: Matrix,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(w: &Matrix) -> Self {
        Self {
            m1: Matrix::zeros(w.rows(), w.cols()),
            m2: Matrix::zeros(w.rows(), w.cols()),
            t: 0,
        }
    }
}

/// Adam in canonical coordinates: moments blend with g′ = D·G·E, the
/// bias-corrected step applies to W′, and the result is pushed forward.
pub fn uc_adam_step(
    w: &Matrix,
    g: &Matrix,
    state: &AdamState,
    config: &OptimizerConfig,
) -> Result<(Matrix, AdamState)> {
    check_same_shape(w, g)?;
    check_same_shape(w, &state.m1)?;
    check_same_shape(w, &state.m2)?;
    config.validate()?;
    let dec = rz_canonicalize(w, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let sp = matrix_scale_products(&dec.d, &dec.e);
    let mut out = w.clone();
    let mut m1 = state.m1.clone();
    let mut m2 = state.m2.clone();
    let t = state.t + 1;
    adam_kernel(
        out.data_mut(),
        g.data(),
        &sp,
        m1.data_mut(),
        m2.data_mut(),
        t,
        config.eta,
        config.beta1,
        config.beta2,
        config.eps_adam,
    );
    Ok((out, AdamState { m1, m2, t }))
}

/// Plain Euclidean step, the negative control.
pub fn sgd_step(w: &Matrix, g: &Matrix, eta: f64) -> Result<Matrix> {
    check_same_shape(w, g)?;
    let mut out = w.clone();
    for (p, gv) in out.data_mut().iter_mut().zip(g.data()) {
        *p -= eta * gv;
    }
    Ok(out)
}

/// Textbook heavy-ball step: V⁺ = μ·V + G; W⁺ = W − η·V⁺.
pub fn sgd_momentum_step(
    w: &Matrix,
    g: &Matrix,
    state: &MomentumState,
    eta: f64,
    mu: f64,
) -> Result<(Matrix, MomentumState)> {
    check_same_shape(w, g)?;
    check_same_shape(w, &state.v)?;
    let mut out = w.clone();
    let mut v = state.v.clone();
    sgd_momentum_kernel(out.data_mut(), g.data(), v.data_mut(), eta, mu);
    Ok((out, MomentumState { v }))
}

// ---------------------------------------------------------------------------
// Per-layer canonical frames for the network driver.
// ---------------------------------------------------------------------------

/// Output/input scales of one layer's affine operator; `eb` is the scale of
/// the bias column (1 when the layer has none or it is entirely zero).
#[derive(Debug, Clone)]
struct LayerFrames {
    d: Vec<f64>,
    e: Vec<f64>,
    eb: f64,
}

fn frames_from_balance(
    rows: usize,
    cols: usize,
    logs: &[f64],
    weights: &[f64],
    with_bias: bool,
) -> Result<LayerFrames> {
    let bal = balance_engine(rows, cols, logs, weights, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let d: Vec<f64> = bal.r.iter().map(|v| v.exp()).collect();
    let mut e: Vec<f64> = bal.c.iter().map(|v| v.exp()).collect();
    let eb = if with_bias { e.pop().expect("bias column present") } else { 1.0 };
    DiagVec::new(d.clone()).check_positive()?;
    DiagVec::new(e.clone()).check_positive()?;
    if !eb.is_finite() || eb <= 0.0 {
        return Err(Error::Numeric("bias column scale must be finite and positive".into()));
    }
    Ok(LayerFrames { d, e, eb })
}

fn dense_frames(w: &Matrix, b: Option<&[f64]>) -> Result<LayerFrames> {
    let (m, n) = w.shape();
    let cols = n + usize::from(b.is_some());
    let mut logs = vec![0.0f64; m * cols];
    let mut weights = vec![0.0f64; m * cols];
    let mut any = false;
    for i in 0..m {
        for j in 0..n {
            let v = w.get(i, j);
            if v.abs() >= ZERO_THRESHOLD {
                logs[i * cols + j] = v.abs().ln();
                weights[i * cols + j] = 1.0;
                any = true;
            }
        }
        if let Some(b) = b {
            if b[i].abs() >= ZERO_THRESHOLD {
                logs[i * cols + n] = b[i].abs().ln();
                weights[i * cols + n] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::Degenerate("dense layer is entirely zero".into()));
    }
    frames_from_balance(m, cols, &logs, &weights, b.is_some())
}

fn conv_frames(k: &Tensor4, b: Option<&[f64]>) -> Result<LayerFrames> {
    let (c_out, c_in, kh, kw) = k.dims();
    let cols = c_in + usize::from(b.is_some());
    let mut logs = vec![0.0f64; c_out * cols];
    let mut weights = vec![0.0f64; c_out * cols];
    for i in 0..c_out {
        for j in 0..c_in {
            let mut count = 0usize;
            let mut sum = 0.0f64;
            for u in 0..kh {
                for v in 0..kw {
                    let val = k.get(i, j, u, v);
                    if val.abs() >= ZERO_THRESHOLD {
                        count += 1;
                        sum += val.abs().ln();
                    }
                }
            }
            if count > 0 {
                logs[i * cols + j] = sum / count as f64;
                weights[i * cols + j] = count as f64;
            }
        }
        if let Some(b) = b {
            if b[i].abs() >= ZERO_THRESHOLD {
                logs[i * cols + c_in] = b[i].abs().ln();
                weights[i * cols + c_in] = 1.0;
            }
        }
    }
    for i in 0..c_out {
        if (0..cols).all(|j| weights[i * cols + j] == 0.0) {
            return Err(Error::Degenerate(format!("output channel {i} is entirely zero")));
        }
    }
    for j in 0..c_in {
        if (0..c_out).all(|i| weights[i * cols + j] == 0.0) {
            return Err(Error::Degenerate(format!("input channel {j} is entirely zero")));
        }
    }
    frames_from_balance(c_out, cols, &logs, &weights, b.is_some())
}

/// The gain acts as a diagonal operator and the shift as its bias column.
/// Rows whose gain and shift are both zero keep unit scales.
fn affine_frames(a: &[f64], c: &[f64]) -> Result<LayerFrames> {
    let n = a.len();
    let cols = n + 1;
    let mut logs = vec![0.0f64; n * cols];
    let mut weights = vec![0.0f64; n * cols];
    for i in 0..n {
        if a[i].abs() >= ZERO_THRESHOLD {
            logs[i * cols + i] = a[i].abs().ln();
            weights[i * cols + i] = 1.0;
        }
        if c[i].abs() >= ZERO_THRESHOLD {
            logs[i * cols + n] = c[i].abs().ln();
            weights[i * cols + n] = 1.0;
        }
    }
    frames_from_balance(n, cols, &logs, &weights, true)
}

fn node_frames(spec: &NodeSpec) -> Result<Option<LayerFrames>> {
    match spec {
        NodeSpec::Dense { w, b } => Ok(Some(dense_frames(w, b.as_deref())?)),
        NodeSpec::Conv2d { k, b, .. } => Ok(Some(conv_frames(k, b.as_deref())?)),
        NodeSpec::AffineGain { a, c } => Ok(Some(affine_frames(a, c)?)),
        _ => Ok(None),
    }
}

/// Canonical scale per flat parameter entry of one node, in the node's
/// parameter order. The gain keeps unit scales: it is gauge-invariant, so
/// its plain update is already equivariant.
fn node_scale_products(spec: &NodeSpec, frames: &LayerFrames) -> Vec<f64> {
    match spec {
        NodeSpec::Dense { w, b } => {
            let (m, n) = w.shape();
            let mut sp = Vec::with_capacity(m * n + b.as_ref().map_or(0, |b| b.len()));
            for i in 0..m {
                for j in 0..n {
                    sp.push(frames.d[i] * frames.e[j]);
                }
            }
            if b.is_some() {
                for i in 0..m {
                    sp.push(frames.d[i] * frames.eb);
                }
            }
            sp
        }
        NodeSpec::Conv2d { k, b, .. } => {
            let (c_out, c_in, kh, kw) = k.dims();
            let mut sp = Vec::with_capacity(c_out * c_in * kh * kw + b.as_ref().map_or(0, |b| b.len()));
            for i in 0..c_out {
                for j in 0..c_in {
                    let s = frames.d[i] * frames.e[j];
                    for _ in 0..kh * kw {
                        sp.push(s);
                    }
                }
            }
            if b.is_some() {
                for i in 0..c_out {
                    sp.push(frames.d[i] * frames.eb);
                }
            }
            sp
        }
        NodeSpec::AffineGain { a, c } => {
            let mut sp = vec![1.0; a.len()];
            for i in 0..c.len() {
                sp.push(frames.d[i] * frames.eb);
            }
            sp
        }
        _ => Vec::new(),
    }
}

fn node_param_block(spec: &NodeSpec) -> Vec<f64> {
    let mut out = Vec::new();
    match spec {
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
    out
}

fn write_node_param_block(spec: &mut NodeSpec, block: &[f64]) {
    match spec {
        NodeSpec::Dense { w, b } => {
            let len = w.data().len();
            w.data_mut().copy_from_slice(&block[..len]);
            if let Some(b) = b {
                b.copy_from_slice(&block[len..]);
            }
        }
        NodeSpec::Conv2d { k, b, .. } => {
            let len = k.data().len();
            k.data_mut().copy_from_slice(&block[..len]);
            if let Some(b) = b {
                b.copy_from_slice(&block[len..]);
            }
        }
        NodeSpec::AffineGain { a, c } => {
            let alen = a.len();
            a.copy_from_slice(&block[..alen]);
            c.copy_from_slice(&block[alen..]);
        }
        _ => {}
    }
}

fn grad_block(grad: &ParamGrad) -> Vec<f64> {
    let mut out = Vec::new();
    match grad {
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
    out
}

/// Per-entry gauge factor of a node's parameter block: the multiplier each
/// entry picks up under apply_gauge. Velocity and first moments scale by it,
/// second moments by its square.
fn node_gauge_factors(net: &Network, id: usize, s: &GaugeAssignment) -> Vec<f64> {
    let node = net.node(id);
    let s_out = s.node_scales(id);
    match &node.spec {
        NodeSpec::Dense { w, b } => {
            let s_in = s.node_scales(node.inputs[0]);
            let (m, n) = w.shape();
            let mut f = Vec::with_capacity(m * n + b.as_ref().map_or(0, |b| b.len()));
            for i in 0..m {
                for j in 0..n {
                    f.push(s_out[i] / s_in[j]);
                }
            }
            if b.is_some() {
                f.extend_from_slice(s_out);
            }
            f
        }
        NodeSpec::Conv2d { k, b, .. } => {
            let s_in = s.node_scales(node.inputs[0]);
            let (c_out, c_in, kh, kw) = k.dims();
            let mut f = Vec::with_capacity(c_out * c_in * kh * kw + b.as_ref().map_or(0, |b| b.len()));
            for i in 0..c_out {
                for j in 0..c_in {
                    let fac = s_out[i] / s_in[j];
                    for _ in 0..kh * kw {
                        f.push(fac);
                    }
                }
            }
            if b.is_some() {
                f.extend_from_slice(s_out);
            }
            f
        }
        NodeSpec::AffineGain { a, .. } => {
            let mut f = vec![1.0; a.len()];
            f.extend_from_slice(s_out);
            f
        }
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Network driver.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
struct NodeState {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

/// Drives one network with one update rule; owns all optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: Vec<Option<NodeState>>,
    frozen: Option<Vec<Option<LayerFrames>>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let needs_s1 = matches!(
            config.kind,
            OptimizerKind::UcMomentum | OptimizerKind::UcAdam | OptimizerKind::SgdMomentum
        );
        let needs_s2 = config.kind == OptimizerKind::UcAdam;
        let mut state = Vec::with_capacity(net.nodes().len());
        for node in net.nodes() {
            let len = node_param_block(&node.spec).len();
            if len == 0 || !needs_s1 {
                state.push(None);
            } else {
                state.push(Some(NodeState {
                    s1: vec![0.0; len],
                    s2: if needs_s2 { vec![0.0; len] } else { Vec::new() },
                }));
            }
        }
        let frozen = if config.refresh == RefreshPolicy::Frozen && config.kind.is_uc() {
            let mut frames = Vec::with_capacity(net.nodes().len());
            for node in net.nodes() {
                frames.push(node_frames(&node.spec)?);
            }
            Some(frames)
        } else {
            None
        };
        Ok(Self {
            config,
            state,
            frozen,
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One training step: forward, loss, Euclidean backward, per-layer
    /// update. Returns the pre-update loss.
    pub fn step(&mut self, net: &mut Network, x: &Value, target: &Target) -> Result<StepStats> {
        let acts = forward(net, x)?;
        let (loss, lgrad) = loss_and_grad(net, &acts, target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let grads = backward_euclidean(net, &acts, &Value::Mat(lgrad))?;
        let grad_norm = grads.norm();
        self.t += 1;
        for id in net.param_nodes() {
            let g = grad_block(grads.params[id].as_ref().expect("parameter node has a gradient"));
            let mut p = node_param_block(&net.node(id).spec);
            let sp = if self.config.kind.is_uc() {
                match &self.frozen {
                    Some(frames) => {
                        let f = frames[id].as_ref().expect("frozen frames for parameter node");
                        node_scale_products(&net.node(id).spec, f)
                    }
                    None => {
                        let f = node_frames(&net.node(id).spec)?.expect("parameter node has frames");
                        node_scale_products(&net.node(id).spec, &f)
                    }
                }
            } else {
                vec![1.0; p.len()]
            };
            match self.config.kind {
                OptimizerKind::Ucgsd | OptimizerKind::Sgd => {
                    gsd_kernel(&mut p, &g, &sp, self.config.eta);
                }
                OptimizerKind::UcMomentum | OptimizerKind::SgdMomentum => {
                    let st = self.state[id].as_mut().expect("momentum state");
                    if self.config.kind == OptimizerKind::UcMomentum {
                        momentum_kernel(&mut p, &g, &sp, &mut st.s1, self.config.eta, self.config.mu);
                    } else {
                        sgd_momentum_kernel(&mut p, &g, &mut st.s1, self.config.eta, self.config.mu);
                    }
                }
                OptimizerKind::UcAdam => {
                    let st = self.state[id].as_mut().expect("adam state");
                    adam_kernel(
                        &mut p,
                        &g,
                        &sp,
                        &mut st.s1,
                        &mut st.s2,
                        self.t,
                        self.config.eta,
                        self.config.beta1,
                        self.config.beta2,
                        self.config.eps_adam,
                    );
                }
            }
            write_node_param_block(&mut net.node_mut(id).spec, &p);
        }
        Ok(StepStats { loss, grad_norm })
    }

    /// Maps optimizer state through a gauge: velocity and first moments pick
    /// up each entry's gauge factor, second moments its square. `gauged_net`
    /// must be the apply_gauge image of the network this state was trained
    /// on; under the Frozen policy its frames are recomputed from it.
    pub fn map_gauge(&self, gauged_net: &Network, s: &GaugeAssignment) -> Result<Optimizer> {
        let mut state = self.state.clone();
        for (id, slot) in state.iter_mut().enumerate() {
            if let Some(st) = slot {
                let f = node_gauge_factors(gauged_net, id, s);
                for (v, fac) in st.s1.iter_mut().zip(&f) {
                    *v *= fac;
                }
                for (v, fac) in st.s2.iter_mut().zip(&f) {
                    *v *= fac * fac;
                }
            }
        }
        let frozen = if self.frozen.is_some() {
            let mut frames = Vec::with_capacity(gauged_net.nodes().len());
            for node in gauged_net.nodes() {
                frames.push(node_frames(&node.spec)?);
            }
            Some(frames)
        } else {
            None
        };
        Ok(Optimizer {
            config: self.config.clone(),
            state,
            frozen,
            t: self.t,
        })
    }
}

// ---------------------------------------------------------------------------
// Gauge-fixing projection.
// ---------------------------------------------------------------------------

/// Π: replaces every layer's parameters by their canonical representative
/// (weights divided by d_i·e_j on active entries, biases by d_i·e_b).
/// Supported only on plain chains; graphs whose gauge constraints couple
/// layers (Add, Concat, Split, Permute) are rejected.
pub fn gauge_fix_projection(net: &Network) -> Result<Network> {
    for (id, node) in net.nodes().iter().enumerate() {
        let chain_ok = if id == 0 {
            matches!(node.spec, NodeSpec::Input)
        } else {
            node.inputs == [id - 1]
        };
        if !chain_ok {
            return Err(Error::UnsupportedStructure(
                "projection requires a plain single-path chain".into(),
            ));
        }
        if matches!(
            node.spec,
            NodeSpec::Add | NodeSpec::Concat | NodeSpec::Split { .. } | NodeSpec::Permute { .. }
        ) {
            return Err(Error::UnsupportedStructure(
                "projection is undefined on graphs with gauge-coupling nodes".into(),
            ));
        }
    }
    let mut out = net.clone();
    for id in net.param_nodes() {
        let frames = node_frames(&net.node(id).spec)?.expect("parameter node has frames");
        let spec = &mut out.node_mut(id).spec;
        match spec {
            NodeSpec::Dense { w, b } => {
                let (m, n) = w.shape();
                for i in 0..m {
                    for j in 0..n {
                        let v = w.get(i, j);
                        if v.abs() >= ZERO_THRESHOLD {
                            w.set(i, j, v / (frames.d[i] * frames.e[j]));
                        }
                    }
                }
                if let Some(b) = b {
                    for (i, bi) in b.iter_mut().enumerate() {
                        if bi.abs() >= ZERO_THRESHOLD {
                            *bi /= frames.d[i] * frames.eb;
                        }
                    }
                }
            }
            NodeSpec::Conv2d { k, b, .. } => {
                let (c_out, c_in, kh, kw) = k.dims();
                for i in 0..c_out {
                    for j in 0..c_in {
                        let s = frames.d[i] * frames.e[j];
                        for u in 0..kh {
                            for v in 0..kw {
                                let val = k.get(i, j, u, v);
                                if val.abs() >= ZERO_THRESHOLD {
                                    k.set(i, j, u, v, val / s);
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    for (i, bi) in b.iter_mut().enumerate() {
                        if bi.abs() >= ZERO_THRESHOLD {
                            *bi /= frames.d[i] * frames.eb;
                        }
                    }
                }
            }
            NodeSpec::AffineGain { a, c } => {
                for (i, ai) in a.iter_mut().enumerate() {
                    if ai.abs() >= ZERO_THRESHOLD {
                        *ai /= frames.d[i] * frames.e[i];
                    }
                }
                for (i, ci) in c.iter_mut().enumerate() {
                    if ci.abs() >= ZERO_THRESHOLD {
                        *ci /= frames.d[i] * frames.eb;
                    }
                }
            }
            _ => unreachable!("param_nodes returned a parameterless node"),
        }
    }
    Ok(out)
}
