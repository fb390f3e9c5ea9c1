//! Reproducible experiment definitions and runners.
//!
//! A single JSON config pins everything an experiment touches: seed, task,
//! architecture, optimizer, and the gauge range used by equivariance
//! checks. All randomness derives from the seed through fixed ChaCha8
//! streams (initialization, task definition, one stream per batch index),
//! so reruns and paired trajectories see byte-identical data regardless of
//! thread count. Every CSV starts with a sha256 digest of the effective
//! config for provenance.

use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::gauge::{
    check_trajectory_equivariance, sample_gauge, solve_gauge_constraints, EquivarianceReport,
};
use crate::graph::{
    backward_euclidean, finite_diff_grad, forward, gradient_rel_error, loss_and_grad, EdgeShape,
    ImageBatch, Network, NetworkBuilder, NodeSpec, NonlinKind, ParamGrad, Target, Value,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{format_matrix, format_tensor4, matmul, Matrix, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Batch streams occupy 0..steps; these two stay clear of them.
const STREAM_INIT: u64 = u64::MAX;
const STREAM_TASK: u64 = u64::MAX - 1;
/// Decorrelates the gauge sample from same-seed RNG uses.
const GAUGE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

pub const GRADCHECK_REPLICAS: usize = 10;
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SyntheticRegression,
    TwoMoons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    LeakyRelu,
    Abs,
}

impl Nonlinearity {
    fn kind(self) -> NonlinKind {
        match self {
            Nonlinearity::Relu => NonlinKind::ReLU,
            Nonlinearity::LeakyRelu => NonlinKind::LeakyReLU(0.01),
            Nonlinearity::Abs => NonlinKind::Abs,
        }
    }
}

/// Single convolution ahead of the dense trunk: stride 1, no padding,
/// followed by the trunk nonlinearity and a flatten. Its flattened size
/// must equal the first dense width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStemConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvStemConfig {
    fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }

    fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }

    fn flat_dim(&self) -> usize {
        self.filters * self.out_h() * self.out_w()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// First entry is the trunk input width, last the network output width.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_bias")]
    pub bias: bool,
    /// Skip connections around every hidden-to-hidden transition; requires
    /// equal hidden widths.
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub conv_stem: Option<ConvStemConfig>,
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub architecture: ArchitectureConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_log_range")]
    pub gauge_log_range: f64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_log_range() -> f64 {
    3.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let arch = &self.architecture;
        if arch.layer_sizes.len() < 2 {
            return Err(Error::Config(
                "layer_sizes needs at least input and output widths".into(),
            ));
        }
        if arch.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.gauge_log_range.is_finite() || self.gauge_log_range < 0.0 {
            return Err(Error::Config(format!(
                "gauge_log_range must be finite and non-negative, got {}",
                self.gauge_log_range
            )));
        }
        self.optimizer.validate()?;
        if arch.residual {
            if arch.layer_sizes.len() < 4 {
                return Err(Error::Config(
                    "residual trunk needs at least two equal hidden layers".into(),
                ));
            }
            let hidden = &arch.layer_sizes[1..arch.layer_sizes.len() - 1];
            if hidden.iter().any(|&n| n != hidden[0]) {
                return Err(Error::Config(
                    "residual trunk requires equal hidden widths".into(),
                ));
            }
        }
        if let Some(cs) = &arch.conv_stem {
            if cs.in_channels == 0 || cs.height == 0 || cs.width == 0 || cs.filters == 0 {
                return Err(Error::Config("conv stem dimensions must be positive".into()));
            }
            if cs.kernel == 0 || cs.kernel > cs.height || cs.kernel > cs.width {
                return Err(Error::Config(format!(
                    "conv kernel {} does not fit a {}x{} input",
                    cs.kernel, cs.height, cs.width
                )));
            }
            if cs.flat_dim() != arch.layer_sizes[0] {
                return Err(Error::Config(format!(
                    "conv stem flattens to {}, first dense width is {}",
                    cs.flat_dim(),
                    arch.layer_sizes[0]
                )));
            }
        }
        if self.task == TaskKind::TwoMoons {
            if arch.conv_stem.is_some() {
                return Err(Error::Config("two_moons is a 2-d task; no conv stem".into()));
            }
            if arch.layer_sizes[0] != 2 || *arch.layer_sizes.last().unwrap() != 2 {
                return Err(Error::Config(
                    "two_moons needs input width 2 and output width 2".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> EdgeShape {
        match &self.architecture.conv_stem {
            Some(cs) => EdgeShape::Img {
                c: cs.in_channels,
                h: cs.height,
                w: cs.width,
            },
            None => EdgeShape::Vec(self.architecture.layer_sizes[0]),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.architecture.layer_sizes.last().unwrap()
    }

    /// sha256 over the canonical JSON form; the first line of every output
    /// file carries it.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in hasher.finalize() {
            write!(out, "{byte:02x}").expect("writing to a String");
        }
        out
    }
}

fn he_entry(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * (2.0 / fan_in as f64).sqrt()
}

/// Uniform in ±1/sqrt(fan_in). Nonzero with probability one, which matters:
/// an all-zero bias column has no canonical scale of its own and the bias
/// update rule would lose its gauge anchor.
fn bias_entry(rng: &mut ChaCha8Rng, fan_in: usize) -> f64 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.random_range(-bound..bound)
}

/// Deterministic He-initialized network for a config. Draw order is fixed:
/// conv stem first, then dense layers in depth order, weights before bias.
pub fn build_network(config: &ExperimentConfig) -> Result<Network> {
    config.validate()?;
    let arch = &config.architecture;
    let sizes = &arch.layer_sizes;
    let nonlin = arch.nonlinearity.kind();
    let mut rng = stream_rng(config.seed, STREAM_INIT);

    let dense_init = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        let w = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| he_entry(rng, cols)).collect())
            .expect("sized data");
        let b = arch.bias.then(|| (0..rows).map(|_| bias_entry(rng, cols)).collect());
        (w, b)
    };

    let (mut builder, mut prev) = match &arch.conv_stem {
        Some(cs) => {
            let mut builder = NetworkBuilder::image_input(cs.in_channels, cs.height, cs.width)?;
            let fan_in = cs.in_channels * cs.kernel * cs.kernel;
            let k = Tensor4::from_vec(
                cs.filters,
                cs.in_channels,
                cs.kernel,
                cs.kernel,
                (0..cs.filters * fan_in).map(|_| he_entry(&mut rng, fan_in)).collect(),
            )?;
            let b = arch.bias.then(|| (0..cs.filters).map(|_| bias_entry(&mut rng, fan_in)).collect());
            let conv = builder.conv2d(0, k, b, 1, 0)?;
            let act = builder.nonlin(conv, nonlin)?;
            let flat = builder.flatten(act)?;
            (builder, flat)
        }
        None => (NetworkBuilder::vector_input(sizes[0])?, 0),
    };

    if arch.residual {
        let hidden = sizes[1];
        let (w, b) = dense_init(&mut rng, hidden, sizes[0]);
        prev = builder.dense(prev, w, b)?;
        for _ in 0..sizes.len() - 3 {
            let branch = builder.nonlin(prev, nonlin)?;
            let (w, b) = dense_init(&mut rng, hidden, hidden);
            let branch = builder.dense(branch, w, b)?;
            prev = builder.add(prev, branch)?;
        }
        prev = builder.nonlin(prev, nonlin)?;
        let (w, b) = dense_init(&mut rng, *sizes.last().unwrap(), hidden);
        prev = builder.dense(prev, w, b)?;
    } else {
        for (l, pair) in sizes.windows(2).enumerate() {
            let (w, b) = dense_init(&mut rng, pair[1], pair[0]);
            prev = builder.dense(prev, w, b)?;
            if l + 2 < sizes.len() {
                prev = builder.nonlin(prev, nonlin)?;
            }
        }
    }
    match config.task {
        TaskKind::TwoMoons => builder.softmax_xent_output(prev),
        TaskKind::SyntheticRegression => builder.output(prev),
    }
}

/// Targets y = A·relu(B·x) for fixed seeded A, B; inputs are standard
/// normal, one ChaCha stream per batch index.
pub struct SyntheticRegression {
    seed: u64,
    input_shape: EdgeShape,
    batch_size: usize,
    a: Matrix,
    b: Matrix,
}

impl SyntheticRegression {
    pub fn new(config: &ExperimentConfig) -> Self {
        let input_shape = config.input_shape();
        let in_dim = input_shape.len();
        let out_dim = config.output_dim();
        let hidden = 2 * in_dim.max(out_dim);
        let mut rng = stream_rng(config.seed, STREAM_TASK);
        let b_scale = 1.0 / (in_dim as f64).sqrt();
        let b = Matrix::from_vec(
            hidden,
            in_dim,
            (0..hidden * in_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * b_scale)
                .collect(),
        )
        .expect("sized data");
        let a_scale = 1.0 / (hidden as f64).sqrt();
        let a = Matrix::from_vec(
            out_dim,
            hidden,
            (0..out_dim * hidden)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * a_scale)
                .collect(),
        )
        .expect("sized data");
        Self {
            seed: config.seed,
            input_shape,
            batch_size: config.batch_size,
            a,
            b,
        }
    }
}

impl BatchSource for SyntheticRegression {
    fn batch(&self, step: usize) -> (Value, Target) {
        let mut rng = stream_rng(self.seed, step as u64);
        let in_dim = self.input_shape.len();
        let mut x = Matrix::zeros(in_dim, self.batch_size);
        // Sample-major draw order matches the image memory layout.
        for n in 0..self.batch_size {
            for i in 0..in_dim {
                x.set(i, n, rng.sample(StandardNormal));
            }
        }
        let mut hidden = matmul(&self.b, &x).expect("dimensions fixed at construction");
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let y = matmul(&self.a, &hidden).expect("dimensions fixed at construction");
        let value = match self.input_shape {
            EdgeShape::Vec(_) => Value::Mat(x),
            EdgeShape::Img { c, h, w } => {
                let per = c * h * w;
                let mut data = Vec::with_capacity(per * self.batch_size);
                for n in 0..self.batch_size {
                    for i in 0..per {
                        data.push(x.get(i, n));
                    }
                }
                Value::Img(ImageBatch::from_vec(c, h, w, self.batch_size, data).expect("sized data"))
            }
        };
        (value, Target::Values(y))
    }
}

/// Two interleaved half circles, noise-free, 256 points with alternating
/// labels; batches walk the pool cyclically.
pub struct TwoMoons {
    points: Matrix,
    labels: Vec<usize>,
    batch_size: usize,
}

const TWO_MOONS_POOL: usize = 256;

impl TwoMoons {
    pub fn new(batch_size: usize) -> Self {
        let half = TWO_MOONS_POOL / 2;
        let mut points = Matrix::zeros(2, TWO_MOONS_POOL);
        let mut labels = vec![0usize; TWO_MOONS_POOL];
        for i in 0..half {
            let t = std::f64::consts::PI * i as f64 / half as f64;
            points.set(0, 2 * i, t.cos());
            points.set(1, 2 * i, t.sin());
            labels[2 * i] = 0;
            points.set(0, 2 * i + 1, 1.0 - t.cos());
            points.set(1, 2 * i + 1, 0.5 - t.sin());
            labels[2 * i + 1] = 1;
        }
        Self {
            points,
            labels,
            batch_size,
        }
    }
}

impl BatchSource for TwoMoons {
    fn batch(&self, step: usize) -> (Value, Target) {
        let mut x = Matrix::zeros(2, self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for j in 0..self.batch_size {
            let idx = (step * self.batch_size + j) % TWO_MOONS_POOL;
            x.set(0, j, self.points.get(0, idx));
            x.set(1, j, self.points.get(1, idx));
            labels.push(self.labels[idx]);
        }
        (Value::Mat(x), Target::Labels(labels))
    }
}

pub fn make_task(config: &ExperimentConfig) -> Result<Box<dyn BatchSource>> {
    config.validate()?;
    Ok(match config.task {
        TaskKind::SyntheticRegression => Box::new(SyntheticRegression::new(config)),
        TaskKind::TwoMoons => Box::new(TwoMoons::new(config.batch_size)),
    })
}

fn join_line(v: &[f64]) -> String {
    let mut out = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{x}").expect("writing to a String");
    }
    out.push('\n');
    out
}

fn dump_params(net: &Network, digest: &str) -> String {
    let mut out = format!("# config_sha256: {digest}\n");
    for id in net.param_nodes() {
        match &net.node(id).spec {
            NodeSpec::Dense { w, b } => {
                let _ = writeln!(out, "# node {id} dense weight");
                out.push_str(&format_matrix(w));
                if let Some(b) = b {
                    let _ = writeln!(out, "# node {id} dense bias");
                    out.push_str(&join_line(b));
                }
            }
            NodeSpec::Conv2d { k, b, .. } => {
                let _ = writeln!(out, "# node {id} conv kernel");
                out.push_str(&format_tensor4(k));
                if let Some(b) = b {
                    let _ = writeln!(out, "# node {id} conv bias");
                    out.push_str(&join_line(b));
                }
            }
            NodeSpec::AffineGain { a, c } => {
                let _ = writeln!(out, "# node {id} affine gain");
                out.push_str(&join_line(a));
                let _ = writeln!(out, "# node {id} affine shift");
                out.push_str(&join_line(c));
            }
            _ => unreachable!("param_nodes returned a parameterless node"),
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Trains per config and writes `train.csv` (step, pre-update loss,
/// gradient norm) plus a final parameter dump `params.txt`.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut net = build_network(config)?;
    let data = make_task(config)?;
    let mut opt = Optimizer::new(config.optimizer.clone(), &net)?;
    let digest = config.digest();
    let mut csv = format!("# config_sha256: {digest}\nstep,loss,grad_norm\n");
    let mut initial_loss = None;
    let mut final_loss = None;
    for t in 0..config.steps {
        let (x, target) = data.batch(t);
        let stats = opt.step(&mut net, &x, &target)?;
        let _ = writeln!(csv, "{},{},{}", t + 1, stats.loss, stats.grad_norm);
        initial_loss.get_or_insert(stats.loss);
        final_loss = Some(stats.loss);
    }
    fs::write(out_dir.join("train.csv"), csv)?;
    fs::write(out_dir.join("params.txt"), dump_params(&net, &digest))?;
    Ok(TrainSummary {
        steps: config.steps,
        initial_loss,
        final_loss,
    })
}

/// Samples one gauge from the network's free classes (seed derived from the
/// config seed), runs the paired-trajectory check, and writes `equiv.csv`.
pub fn run_equivariance(config: &ExperimentConfig, out_dir: &Path) -> Result<EquivarianceReport> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let net = build_network(config)?;
    let data = make_task(config)?;
    let classes = solve_gauge_constraints(&net);
    let gauge_seed = config.seed ^ GAUGE_SEED_SALT;
    let s = sample_gauge(&classes, gauge_seed, config.gauge_log_range)?;
    let report = check_trajectory_equivariance(
        &net,
        &s,
        data.as_ref(),
        &config.optimizer,
        config.steps,
        gauge_seed,
    )?;
    let csv = format!("# config_sha256: {}\n{}", config.digest(), report.csv_body());
    fs::write(out_dir.join("equiv.csv"), csv)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub evaluated: usize,
    pub skipped_kinks: usize,
    pub pass: bool,
}

fn corrupt_requested() -> bool {
    std::env::var_os("UC_GRAD_CORRUPT").is_some_and(|v| v != "0")
}

fn replica_threads(total: usize) -> usize {
    let cap = std::env::var("UC_GRAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    cap.unwrap_or(available).min(total).max(1)
}

/// One evaluation point: fresh init and batch from the derived seed.
/// Returns None when the point sits on a nonlinearity kink, where central
/// differences are unreliable by construction.
fn gradcheck_replica(config: &ExperimentConfig, seed: u64, corrupt: bool) -> Result<Option<f64>> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let net = build_network(&cfg)?;
    let data = make_task(&cfg)?;
    let (x, target) = data.batch(0);
    let fd = finite_diff_grad(&net, &x, &target, GRADCHECK_H)?;
    if fd.kink_flagged {
        return Ok(None);
    }
    let acts = forward(&net, &x)?;
    let (_, lgrad) = loss_and_grad(&net, &acts, &target)?;
    let mut analytic = backward_euclidean(&net, &acts, &Value::Mat(lgrad))?;
    if corrupt {
        let grad = analytic
            .params
            .iter_mut()
            .flatten()
            .next()
            .expect("network has parameters");
        let entry = match grad {
            ParamGrad::Dense { w, .. } => &mut w.data_mut()[0],
            ParamGrad::Conv { k, .. } => &mut k.data_mut()[0],
            ParamGrad::Affine { a, .. } => &mut a[0],
        };
        *entry = *entry * 1.5 + 1.0;
    }
    Ok(Some(gradient_rel_error(&net, &analytic, &fd.grads)))
}

pub fn run_gradcheck(config: &ExperimentConfig) -> Result<GradcheckReport> {
    run_gradcheck_inner(config, corrupt_requested())
}

/// `corrupt` injects a deliberate error into the analytic gradient of every
/// replica; the check must then fail. Reachable from the CLI via the
/// UC_GRAD_CORRUPT environment variable.
pub(crate) fn run_gradcheck_inner(config: &ExperimentConfig, corrupt: bool) -> Result<GradcheckReport> {
    config.validate()?;
    let seeds: Vec<u64> = (0..GRADCHECK_REPLICAS as u64)
        .map(|k| config.seed.wrapping_add(k))
        .collect();
    let threads = replica_threads(seeds.len());
    // Static index striping: partitioning is deterministic and results are
    // reassembled by replica index, so thread count never changes output.
    let mut results: Vec<Option<Result<Option<f64>>>> = seeds.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for worker in 0..threads {
            let seeds = &seeds;
            let handle = scope.spawn(move || {
                let mut out = Vec::new();
                let mut idx = worker;
                while idx < seeds.len() {
                    out.push((idx, gradcheck_replica(config, seeds[idx], corrupt)));
                    idx += threads;
                }
                out
            });
            handles.push(handle);
        }
        for handle in handles {
            for (idx, res) in handle.join().expect("gradcheck worker panicked") {
                results[idx] = Some(res);
            }
        }
    });
    let mut max_rel_error = 0.0f64;
    let mut evaluated = 0usize;
    let mut skipped_kinks = 0usize;
    for res in results {
        match res.expect("every replica ran") {
            Ok(Some(err)) => {
                max_rel_error = max_rel_error.max(err);
                evaluated += 1;
            }
            Ok(None) => skipped_kinks += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        evaluated,
        skipped_kinks,
        pass: evaluated > 0 && max_rel_error <= GRADCHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 42,
            task: TaskKind::SyntheticRegression,
            architecture: ArchitectureConfig {
                layer_sizes: vec![4, 8, 8, 2],
                nonlinearity: Nonlinearity::Relu,
                bias: true,
                residual: false,
                conv_stem: None,
            },
            optimizer: OptimizerConfig::new(OptimizerKind::Ucgsd, 0.1),
            steps: 20,
            batch_size: 8,
            gauge_log_range: 2.0,
            out_dir: None,
        }
    }

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ucgrad-core-test-{name}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn config_json_roundtrip_and_rejection() {
        let json = r#"{
            "seed": 7,
            "task": "synthetic_regression",
            "architecture": {"layer_sizes": [4, 8, 2], "bias": false},
            "optimizer": {"kind": "ucgsd", "eta": 0.1},
            "steps": 10,
            "batch_size": 4
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.gauge_log_range, 3.0);
        assert_eq!(cfg.architecture.nonlinearity, Nonlinearity::Relu);
        assert!(!cfg.architecture.bias);
        assert!(ExperimentConfig::from_json(&json.replace("\"steps\"", "\"stepz\"")).is_err());
        assert!(ExperimentConfig::from_json(&json.replace("[4, 8, 2]", "[4]")).is_err());
        assert!(ExperimentConfig::from_json(&json.replace("\"batch_size\": 4", "\"batch_size\": 0")).is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = base_config();
        cfg.architecture.residual = true;
        cfg.architecture.layer_sizes = vec![4, 8, 6, 2];
        assert!(cfg.validate().is_err());
        cfg.architecture.layer_sizes = vec![4, 8, 8, 2];
        assert!(cfg.validate().is_ok());
        cfg.architecture.layer_sizes = vec![4, 8, 2];
        assert!(cfg.validate().is_err());

        let mut cfg = base_config();
        cfg.task = TaskKind::TwoMoons;
        assert!(cfg.validate().is_err());
        cfg.architecture.layer_sizes = vec![2, 8, 2];
        assert!(cfg.validate().is_ok());

        let mut cfg = base_config();
        cfg.architecture.conv_stem = Some(ConvStemConfig {
            in_channels: 1,
            height: 5,
            width: 5,
            filters: 2,
            kernel: 3,
        });
        // Flattens to 2*3*3 = 18, not 4.
        assert!(cfg.validate().is_err());
        cfg.architecture.layer_sizes = vec![18, 8, 2];
        assert!(cfg.validate().is_ok());

        let mut cfg = base_config();
        cfg.gauge_log_range = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_is_stable_and_seed_sensitive() {
        let cfg = base_config();
        let d1 = cfg.digest();
        assert_eq!(d1.len(), 64);
        assert_eq!(d1, base_config().digest());
        let mut other = base_config();
        other.seed = 43;
        assert_ne!(d1, other.digest());
    }

    #[test]
    fn build_network_is_deterministic_with_nonzero_biases() {
        let cfg = base_config();
        let net1 = build_network(&cfg).unwrap();
        let net2 = build_network(&cfg).unwrap();
        assert_eq!(net1.params_flat(), net2.params_flat());
        let mut other = base_config();
        other.seed = 43;
        assert_ne!(net1.params_flat(), build_network(&other).unwrap().params_flat());
        for id in net1.param_nodes() {
            if let NodeSpec::Dense { b: Some(b), .. } = &net1.node(id).spec {
                assert!(b.iter().all(|v| *v != 0.0));
            }
        }
        assert_eq!(net1.input_shape(), EdgeShape::Vec(4));
        assert_eq!(net1.output_shape(), EdgeShape::Vec(2));
    }

    #[test]
    fn residual_and_conv_networks_assemble() {
        let mut cfg = base_config();
        cfg.architecture.residual = true;
        let net = build_network(&cfg).unwrap();
        assert!(net.nodes().iter().any(|n| matches!(n.spec, NodeSpec::Add)));

        let mut cfg = base_config();
        cfg.architecture.conv_stem = Some(ConvStemConfig {
            in_channels: 1,
            height: 5,
            width: 5,
            filters: 2,
            kernel: 3,
        });
        cfg.architecture.layer_sizes = vec![18, 8, 2];
        let net = build_network(&cfg).unwrap();
        assert!(net.nodes().iter().any(|n| matches!(n.spec, NodeSpec::Conv2d { .. })));
        assert_eq!(net.input_shape(), EdgeShape::Img { c: 1, h: 5, w: 5 });
        // Conv batches really flow: one forward pass on a task batch.
        let data = make_task(&cfg).unwrap();
        let (x, _) = data.batch(0);
        forward(&net, &x).unwrap();
    }

    #[test]
    fn synthetic_regression_matches_its_formula() {
        let cfg = base_config();
        let task = SyntheticRegression::new(&cfg);
        let (x1, t1) = task.batch(3);
        let (x2, t2) = task.batch(3);
        let (x3, _) = task.batch(4);
        let m1 = x1.as_mat().unwrap();
        assert_eq!(m1.data(), x2.as_mat().unwrap().data());
        assert_ne!(m1.data(), x3.as_mat().unwrap().data());
        let (y1, y2) = match (&t1, &t2) {
            (Target::Values(a), Target::Values(b)) => (a, b),
            _ => unreachable!(),
        };
        assert_eq!(y1.data(), y2.data());
        // Recompute y = A relu(B x) by hand.
        let mut hidden = matmul(&task.b, m1).unwrap();
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let expect = matmul(&task.a, &hidden).unwrap();
        assert_eq!(y1.data(), expect.data());
    }

    #[test]
    fn two_moons_pool_geometry() {
        let task = TwoMoons::new(16);
        let (x, t) = task.batch(0);
        let labels = match &t {
            Target::Labels(l) => l.clone(),
            _ => unreachable!(),
        };
        assert_eq!(labels, (0..16).map(|i| i % 2).collect::<Vec<_>>());
        let m = x.as_mat().unwrap();
        for j in (0..16).step_by(2) {
            let (px, py) = (m.get(0, j), m.get(1, j));
            assert!((px * px + py * py - 1.0).abs() <= 1e-12);
            let (qx, qy) = (m.get(0, j + 1), m.get(1, j + 1));
            let (cx, cy) = (qx - 1.0, qy - 0.5);
            assert!((cx * cx + cy * cy - 1.0).abs() <= 1e-12);
        }
        // The pool wraps: step 16 (= 256/16) sees the same batch as step 0.
        let (x_wrap, _) = task.batch(16);
        assert_eq!(m.data(), x_wrap.as_mat().unwrap().data());
    }

    #[test]
    fn train_writes_reproducible_outputs() {
        let mut cfg = base_config();
        cfg.steps = 30;
        let dir1 = temp_dir("train-a");
        let dir2 = temp_dir("train-b");
        let summary = run_train(&cfg, &dir1).unwrap();
        run_train(&cfg, &dir2).unwrap();
        assert!(summary.final_loss.unwrap() < summary.initial_loss.unwrap());
        let csv1 = fs::read(dir1.join("train.csv")).unwrap();
        let csv2 = fs::read(dir2.join("train.csv")).unwrap();
        assert_eq!(csv1, csv2);
        assert_eq!(
            fs::read(dir1.join("params.txt")).unwrap(),
            fs::read(dir2.join("params.txt")).unwrap()
        );
        let text = String::from_utf8(csv1).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# config_sha256: {}", cfg.digest()));
        assert_eq!(lines.next().unwrap(), "step,loss,grad_norm");
        assert_eq!(text.lines().count(), 32);
        let _ = fs::remove_dir_all(dir1);
        let _ = fs::remove_dir_all(dir2);
    }

    #[test]
    fn train_zero_steps_writes_header_only() {
        let mut cfg = base_config();
        cfg.steps = 0;
        let dir = temp_dir("train-zero");
        let summary = run_train(&cfg, &dir).unwrap();
        assert!(summary.initial_loss.is_none());
        let text = fs::read_to_string(dir.join("train.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(dir.join("params.txt").exists());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn two_moons_training_reduces_loss() {
        let mut cfg = base_config();
        cfg.task = TaskKind::TwoMoons;
        cfg.architecture.layer_sizes = vec![2, 8, 2];
        cfg.steps = 60;
        cfg.optimizer = OptimizerConfig::new(OptimizerKind::Ucgsd, 0.1);
        let dir = temp_dir("two-moons");
        let summary = run_train(&cfg, &dir).unwrap();
        assert!(summary.final_loss.unwrap() < summary.initial_loss.unwrap());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn equivariance_runner_reports_and_writes() {
        let mut cfg = base_config();
        cfg.steps = 40;
        let dir = temp_dir("equiv");
        let report = run_equivariance(&cfg, &dir).unwrap();
        assert!(!report.diverged);
        assert!(report.summary_max_dev <= 1e-6, "dev {}", report.summary_max_dev);
        assert_eq!(report.max_weight_dev.len(), 40);
        let text = fs::read_to_string(dir.join("equiv.csv")).unwrap();
        assert!(text.starts_with(&format!("# config_sha256: {}\nstep,max_weight_dev,loss_gap\n", cfg.digest())));
        assert_eq!(text.lines().count(), 42);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn gradcheck_passes_clean_and_fails_corrupted() {
        let mut cfg = base_config();
        cfg.batch_size = 4;
        let report = run_gradcheck_inner(&cfg, false).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert_eq!(report.evaluated + report.skipped_kinks, GRADCHECK_REPLICAS);
        let corrupted = run_gradcheck_inner(&cfg, true).unwrap();
        assert!(!corrupted.pass);
    }
}
