//! Canonical diagonal decomposition of linear operators.
//!
//! A matrix W factors as W = D·W′·E with strictly positive diagonals D, E
//! chosen so that every row and column of |W′| has unit geometric mean over
//! its nonzero entries. W′ is then a scaling-invariant representative of
//! W's equivalence class under positive diagonal rescaling, and the
//! transpose of W′ is the scale-consistent (UC) adjoint.
//!
//! All balancing happens in the log-magnitude domain, where the problem is
//! linear: fully dense supports are solved by a closed-form two-way mean
//! decomposition, sparse supports by alternating row/column mean-removal
//! sweeps. The overall scale is split equally between D and E, applied per
//! connected component of the support graph so the result is deterministic
//! even when the balancing conditions leave relative component scales free.

use crate::error::{Error, Result};
use crate::tensor::{transpose, DiagVec, Matrix, Tensor4};
use crate::union_find::UnionFind;

/// Entries with magnitude below this are structural zeros: excluded from
/// geometric means and copied through to the canonical representative.
pub const ZERO_THRESHOLD: f64 = 1e-30;

/// Default stopping tolerance on the max absolute row/column mean of the
/// masked log residual.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Default sweep budget for sparse supports.
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Result of canonicalizing a matrix: W == diag(d)·wp·diag(e).
#[derive(Debug, Clone)]
pub struct ScaleDecomposition {
    pub d: DiagVec,
    pub wp: Matrix,
    pub e: DiagVec,
    /// Max absolute row/column mean of the balanced log residual.
    pub residual: f64,
    /// Sweep count (1 for the closed-form dense path).
    pub iterations: usize,
}

/// Result of canonicalizing a conv kernel along its channel axes:
/// K[i,j,u,v] == d[i]·kp[i,j,u,v]·e[j].
#[derive(Debug, Clone)]
pub struct ChannelScaleDecomposition {
    pub d: DiagVec,
    pub kp: Tensor4,
    pub e: DiagVec,
    pub residual: f64,
    pub iterations: usize,
}

/// Zero pattern of a matrix: which entries participate in balancing.
#[derive(Debug, Clone)]
pub struct SupportMask {
    rows: usize,
    cols: usize,
    active: Vec<bool>,
}

impl SupportMask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            active: vec![true; rows * cols],
        }
    }

    /// Marks entries with magnitude at least [`ZERO_THRESHOLD`] as active.
    pub fn from_matrix(w: &Matrix) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            active: w.data().iter().map(|v| v.abs() >= ZERO_THRESHOLD).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i * self.cols + j]
    }
}

/// Row/column log-offsets balancing a masked matrix.
#[derive(Debug, Clone)]
pub struct BalanceResult {
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Max absolute weighted mean of `logs[i][j] - r[i] - c[j]` over any
/// nonempty row or column.
fn weighted_residual(
    rows: usize,
    cols: usize,
    logs: &[f64],
    weights: &[f64],
    row_w: &[f64],
    col_w: &[f64],
    r: &[f64],
    c: &[f64],
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..rows {
        if row_w[i] <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..cols {
            let idx = i * cols + j;
            if weights[idx] > 0.0 {
                acc += weights[idx] * (logs[idx] - r[i] - c[j]);
            }
        }
        worst = worst.max((acc / row_w[i]).abs());
    }
    for j in 0..cols {
        if col_w[j] <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..rows {
            let idx = i * cols + j;
            if weights[idx] > 0.0 {
                acc += weights[idx] * (logs[idx] - r[i] - c[j]);
            }
        }
        worst = worst.max((acc / col_w[j]).abs());
    }
    worst
}

/// Normalizes the free additive gauge of each support component so the mean
/// of `r` over the component's rows equals the mean of `c` over its columns.
/// For a fully dense support this reproduces the grand-mean equal split.
fn equal_split_per_component(
    rows: usize,
    cols: usize,
    weights: &[f64],
    row_w: &[f64],
    col_w: &[f64],
    r: &mut [f64],
    c: &mut [f64],
) {
    let mut uf = UnionFind::new(rows + cols);
    for i in 0..rows {
        for j in 0..cols {
            if weights[i * cols + j] > 0.0 {
                uf.union(i, rows + j);
            }
        }
    }
    // (sum of r, row count, sum of c, col count) keyed by component root.
    let mut acc = vec![(0.0f64, 0usize, 0.0f64, 0usize); rows + cols];
    for i in 0..rows {
        if row_w[i] > 0.0 {
            let root = uf.find(i);
            acc[root].0 += r[i];
            acc[root].1 += 1;
        }
    }
    for j in 0..cols {
        if col_w[j] > 0.0 {
            let root = uf.find(rows + j);
            acc[root].2 += c[j];
            acc[root].3 += 1;
        }
    }
    let mut shift = vec![0.0f64; rows + cols];
    for (root, &(sr, nr, sc, nc)) in acc.iter().enumerate() {
        if nr > 0 && nc > 0 {
            shift[root] = (sc / nc as f64 - sr / nr as f64) / 2.0;
        }
    }
    for i in 0..rows {
        if row_w[i] > 0.0 {
            r[i] += shift[uf.find(i)];
        }
    }
    for j in 0..cols {
        if col_w[j] > 0.0 {
            c[j] -= shift[uf.find(rows + j)];
        }
    }
}

/// Balances a weighted log-magnitude matrix: finds offsets r, c such that
/// the weighted mean of `logs - r - c` over active entries is zero in every
/// nonempty row and column, normalized by the per-component equal split.
/// Entries with weight 0 are inactive; rows/columns with no active entries
/// keep offset 0.
pub(crate) fn balance_engine(
    rows: usize,
    cols: usize,
    logs: &[f64],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<BalanceResult> {
    let row_w: Vec<f64> = (0..rows)
        .map(|i| (0..cols).map(|j| weights[i * cols + j]).sum())
        .collect();
    let col_w: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| weights[i * cols + j]).sum())
        .collect();

    let first = weights[0];
    let uniform_dense = weights.iter().all(|&w| w > 0.0 && w == first);

    let mut r = vec![0.0f64; rows];
    let mut c = vec![0.0f64; cols];
    let iterations;

    if uniform_dense {
        // Closed form: r_i = row mean - grand mean / 2, c_j likewise.
        let grand: f64 = logs.iter().sum::<f64>() / (rows * cols) as f64;
        for i in 0..rows {
            let mean: f64 = (0..cols).map(|j| logs[i * cols + j]).sum::<f64>() / cols as f64;
            r[i] = mean - grand / 2.0;
        }
        for j in 0..cols {
            let mean: f64 = (0..rows).map(|i| logs[i * cols + j]).sum::<f64>() / rows as f64;
            c[j] = mean - grand / 2.0;
        }
        iterations = 1;
    } else {
        let mut sweeps = 0;
        loop {
            let residual = weighted_residual(rows, cols, logs, weights, &row_w, &col_w, &r, &c);
            if residual <= tol {
                break;
            }
            if sweeps >= max_iter {
                return Err(Error::NoConvergence {
                    residual,
                    iterations: sweeps,
                });
            }
            for i in 0..rows {
                if row_w[i] <= 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for j in 0..cols {
                    let idx = i * cols + j;
                    if weights[idx] > 0.0 {
                        acc += weights[idx] * (logs[idx] - r[i] - c[j]);
                    }
                }
                r[i] += acc / row_w[i];
            }
            for j in 0..cols {
                if col_w[j] <= 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for i in 0..rows {
                    let idx = i * cols + j;
                    if weights[idx] > 0.0 {
                        acc += weights[idx] * (logs[idx] - r[i] - c[j]);
                    }
                }
                c[j] += acc / col_w[j];
            }
            sweeps += 1;
        }
        iterations = sweeps;
    }

    equal_split_per_component(rows, cols, weights, &row_w, &col_w, &mut r, &mut c);
    let residual = weighted_residual(rows, cols, logs, weights, &row_w, &col_w, &r, &c);
    Ok(BalanceResult {
        r,
        c,
        residual,
        iterations,
    })
}

/// Balances `a` over the active entries of `mask`. Requires every row and
/// column of the mask to have at least one active entry.
pub fn balance_log(a: &Matrix, mask: &SupportMask, tol: f64, max_iter: usize) -> Result<BalanceResult> {
    if (mask.rows(), mask.cols()) != a.shape() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, matrix is {}x{}",
            mask.rows(),
            mask.cols(),
            a.rows(),
            a.cols()
        )));
    }
    if tol <= 0.0 {
        return Err(Error::Config("tol must be strictly positive".into()));
    }
    let (rows, cols) = a.shape();
    for i in 0..rows {
        if (0..cols).all(|j| !mask.is_active(i, j)) {
            return Err(Error::Degenerate(format!("row {i} has no active entries")));
        }
    }
    for j in 0..cols {
        if (0..rows).all(|i| !mask.is_active(i, j)) {
            return Err(Error::Degenerate(format!("column {j} has no active entries")));
        }
    }
    let weights: Vec<f64> = mask.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    balance_engine(rows, cols, a.data(), &weights, tol, max_iter)
}

/// Canonical diagonal decomposition W = D·W′·E with unit geometric means of
/// nonzero magnitudes in every row and column of W′. Zero rows/columns get
/// scale 1; an all-zero matrix is rejected.
pub fn rz_canonicalize(w: &Matrix, tol: f64, max_iter: usize) -> Result<ScaleDecomposition> {
    if tol <= 0.0 {
        return Err(Error::Config("tol must be strictly positive".into()));
    }
    let (rows, cols) = w.shape();
    let mut logs = vec![0.0f64; rows * cols];
    let mut weights = vec![0.0f64; rows * cols];
    let mut any_active = false;
    for (idx, &v) in w.data().iter().enumerate() {
        if v.abs() >= ZERO_THRESHOLD {
            logs[idx] = v.abs().ln();
            weights[idx] = 1.0;
            any_active = true;
        }
    }
    if !any_active {
        return Err(Error::Degenerate(
            "matrix has no entries above the zero threshold".into(),
        ));
    }
    let bal = balance_engine(rows, cols, &logs, &weights, tol, max_iter)?;
    let d = DiagVec::new(bal.r.iter().map(|v| v.exp()).collect());
    let e = DiagVec::new(bal.c.iter().map(|v| v.exp()).collect());
    d.check_positive()?;
    e.check_positive()?;
    let mut wp = w.clone();
    for i in 0..rows {
        for j in 0..cols {
            if weights[i * cols + j] > 0.0 {
                let v = w.get(i, j) / (d.get(i) * e.get(j));
                wp.set(i, j, v);
            }
        }
    }
    Ok(ScaleDecomposition {
        d,
        wp,
        e,
        residual: bal.residual,
        iterations: bal.iterations,
    })
}

/// [`rz_canonicalize`] with the default tolerance and sweep budget.
pub fn canonicalize(w: &Matrix) -> Result<ScaleDecomposition> {
    rz_canonicalize(w, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// The scale-consistent adjoint: the transpose taken in canonical
/// coordinates, (W′)ᵀ == E⁻¹·Wᵀ·D⁻¹. Invariant under positive diagonal
/// rescaling of W.
pub fn uc_adjoint(w: &Matrix) -> Result<Matrix> {
    Ok(transpose(&canonical_project(w)?))
}

/// The gauge-fixing projection Π: maps W to its canonical representative W′.
pub fn canonical_project(w: &Matrix) -> Result<Matrix> {
    Ok(canonicalize(w)?.wp)
}

/// Canonicalizes a conv kernel along its channel axes. The balanced object
/// is the c_out×c_in matrix of per-channel-pair mean log magnitudes,
/// weighted by nonzero spatial counts, so every output and input channel of
/// kp has unit geometric mean over its nonzero entries. Requires every
/// channel slice to contain a nonzero entry.
pub fn canonicalize_kernel(k: &Tensor4, tol: f64, max_iter: usize) -> Result<ChannelScaleDecomposition> {
    if tol <= 0.0 {
        return Err(Error::Config("tol must be strictly positive".into()));
    }
    let (c_out, c_in, kh, kw) = k.dims();
    let mut logs = vec![0.0f64; c_out * c_in];
    let mut weights = vec![0.0f64; c_out * c_in];
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
                logs[i * c_in + j] = sum / count as f64;
                weights[i * c_in + j] = count as f64;
            }
        }
    }
    for i in 0..c_out {
        if (0..c_in).all(|j| weights[i * c_in + j] == 0.0) {
            return Err(Error::Degenerate(format!("output channel {i} is entirely zero")));
        }
    }
    for j in 0..c_in {
        if (0..c_out).all(|i| weights[i * c_in + j] == 0.0) {
            return Err(Error::Degenerate(format!("input channel {j} is entirely zero")));
        }
    }
    let bal = balance_engine(c_out, c_in, &logs, &weights, tol, max_iter)?;
    let d = DiagVec::new(bal.r.iter().map(|v| v.exp()).collect());
    let e = DiagVec::new(bal.c.iter().map(|v| v.exp()).collect());
    d.check_positive()?;
    e.check_positive()?;
    let mut kp = k.clone();
    for i in 0..c_out {
        for j in 0..c_in {
            let scale = d.get(i) * e.get(j);
            for u in 0..kh {
                for v in 0..kw {
                    let val = k.get(i, j, u, v);
                    if val.abs() >= ZERO_THRESHOLD {
                        kp.set(i, j, u, v, val / scale);
                    }
                }
            }
        }
    }
    Ok(ChannelScaleDecomposition {
        d,
        kp,
        e,
        residual: bal.residual,
        iterations: bal.iterations,
    })
}
