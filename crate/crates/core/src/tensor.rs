//! Dense double-precision matrices, diagonal scale vectors, and 4-axis
//! convolution kernels.
//!
//! Everything is row-major, shape-checked, and immutable from the caller's
//! perspective: operations are pure functions returning new values. No
//! broadcasting happens unless an operation says so explicitly.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} entries for a {}x{} matrix, got {}",
                rows * cols,
                rows,
                cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by already-validated inputs.
    /// Training internals may transiently hold non-finite entries (reported
    /// divergence); public constructors stay strict.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts column `j` as a plain vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// Elementwise sum `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// Multiplies every entry by `s`.
    pub fn scaled(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * s).collect();
        Matrix::from_vec_unchecked(self.rows, self.cols, data)
    }
}

/// Diagonal scale vector: one entry per axis coordinate.
///
/// Entries must be strictly positive whenever the vector is used as a
/// gauge or canonical scale; `check_positive` enforces that at the point
/// of use.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagVec(Vec<f64>);

impl DiagVec {
    pub fn new(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    /// Fails unless every entry is finite and strictly positive.
    pub fn check_positive(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Numeric(
                "diagonal scale entries must be finite and strictly positive".into(),
            ));
        }
        Ok(())
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> DiagVec {
        DiagVec(self.0.iter().map(|v| 1.0 / v).collect())
    }

    /// Elementwise product with another scale vector.
    pub fn mul(&self, other: &DiagVec) -> Result<DiagVec> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "scale length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(DiagVec(
            self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect(),
        ))
    }

    /// Dense diagonal matrix with these entries.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, self.0[i]);
        }
        m
    }
}

/// Convolution kernel of shape `(c_out, c_in, kh, kw)`, row-major in that
/// axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn from_vec(c_out: usize, c_in: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c_out * c_in * kh * kw {
            return Err(Error::Shape(format!(
                "expected {} entries for a ({},{},{},{}) kernel, got {}",
                c_out * c_in * kh * kw,
                c_out,
                c_in,
                kh,
                kw,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("kernel entries must be finite".into()));
        }
        Ok(Self {
            c_out,
            c_in,
            kh,
            kw,
            data,
        })
    }

    pub(crate) fn from_vec_unchecked(
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), c_out * c_in * kh * kw);
        Self {
            c_out,
            c_in,
            kh,
            kw,
            data,
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self {
            c_out,
            c_in,
            kh,
            kw,
            data: vec![0.0; c_out * c_in * kh * kw],
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.c_out, self.c_in, self.kh, self.kw)
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, u: usize, v: usize) -> f64 {
        self.data[((o * self.c_in + i) * self.kh + u) * self.kw + v]
    }

    #[inline]
    pub(crate) fn set(&mut self, o: usize, i: usize, u: usize, v: usize, val: f64) {
        self.data[((o * self.c_in + i) * self.kh + u) * self.kw + v] = val;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out.data[i * b.cols + j] += aik * b.get(k, j);
            }
        }
    }
    Ok(out)
}

/// Left-multiplies by `diag(d)`: `result[i][j] = d[i] * w[i][j]`.
pub fn scale_rows(w: &Matrix, d: &DiagVec) -> Result<Matrix> {
    if d.len() != w.rows {
        return Err(Error::Shape(format!(
            "row scale has length {}, matrix has {} rows",
            d.len(),
            w.rows
        )));
    }
    let mut out = w.clone();
    for i in 0..w.rows {
        let s = d.get(i);
        for j in 0..w.cols {
            out.data[i * w.cols + j] *= s;
        }
    }
    Ok(out)
}

/// Right-multiplies by `diag(e)`: `result[i][j] = w[i][j] * e[j]`.
pub fn scale_cols(w: &Matrix, e: &DiagVec) -> Result<Matrix> {
    if e.len() != w.cols {
        return Err(Error::Shape(format!(
            "column scale has length {}, matrix has {} columns",
            e.len(),
            w.cols
        )));
    }
    let mut out = w.clone();
    for i in 0..w.rows {
        for j in 0..w.cols {
            out.data[i * w.cols + j] *= e.get(j);
        }
    }
    Ok(out)
}

/// Matrix transpose.
pub fn transpose(w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(w.cols, w.rows);
    for i in 0..w.rows {
        for j in 0..w.cols {
            out.data[j * w.rows + i] = w.get(i, j);
        }
    }
    out
}

/// Relative Frobenius distance `|a - b|_F / max(|b|_F, floor)`.
pub fn rel_frobenius(a: &Matrix, b: &Matrix, floor: f64) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.frobenius_norm() / b.frobenius_norm().max(floor))
}

/// Parses the plain-text matrix format: a header line `rows cols`, then
/// one whitespace-separated row of decimal floats per line.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix text".into()))?;
    let mut parts = header.split_whitespace();
    let rows: usize = parts
        .next()
        .ok_or_else(|| Error::Parse("missing row count".into()))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad row count: {e}")))?;
    let cols: usize = parts
        .next()
        .ok_or_else(|| Error::Parse("missing column count".into()))?
        .parse()
        .map_err(|e| Error::Parse(format!("bad column count: {e}")))?;
    if parts.next().is_some() {
        return Err(Error::Parse("header must be exactly `rows cols`".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if i >= rows {
            return Err(Error::Parse(format!("expected {rows} rows, found more")));
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad float {tok:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::Parse(format!(
                "row {} has {} entries, expected {}",
                i + 1,
                row.len(),
                cols
            )));
        }
        data.extend(row);
    }
    if data.len() != rows * cols {
        return Err(Error::Parse(format!(
            "expected {rows} rows, found {}",
            data.len() / cols.max(1)
        )));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Writes a matrix in the text format accepted by [`parse_matrix`].
pub fn format_matrix(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows, m.cols);
    for i in 0..m.rows {
        let row: Vec<String> = (0..m.cols).map(|j| format!("{}", m.get(i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the kernel text format: a header line `c_out c_in kh kw`, then
/// one line of kh·kw floats per (output, input) channel pair.
pub fn parse_tensor4(text: &str) -> Result<Tensor4> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty kernel text".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad kernel dimension {tok:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 4 {
        return Err(Error::Parse("kernel header must be `c_out c_in kh kw`".into()));
    }
    let (c_out, c_in, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
    let mut data = Vec::with_capacity(c_out * c_in * kh * kw);
    for (i, line) in lines.enumerate() {
        if i >= c_out * c_in {
            return Err(Error::Parse(format!(
                "expected {} kernel rows, found more",
                c_out * c_in
            )));
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad float {tok:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != kh * kw {
            return Err(Error::Parse(format!(
                "kernel row {} has {} entries, expected {}",
                i + 1,
                row.len(),
                kh * kw
            )));
        }
        data.extend(row);
    }
    if data.len() != c_out * c_in * kh * kw {
        return Err(Error::Parse("kernel text ended early".into()));
    }
    Tensor4::from_vec(c_out, c_in, kh, kw, data)
}

/// Writes a kernel in the text format accepted by [`parse_tensor4`].
pub fn format_tensor4(k: &Tensor4) -> String {
    let mut out = format!("{} {} {} {}\n", k.c_out, k.c_in, k.kh, k.kw);
    for pair in 0..k.c_out * k.c_in {
        let base = pair * k.kh * k.kw;
        let row: Vec<String> = (0..k.kh * k.kw)
            .map(|s| format!("{}", k.data[base + s]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Naive triple-loop product used as an independent reference.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn seeded_entries(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random values, no RNG dependency needed here.
        (0..n)
            .map(|i| (((i as f64 + 1.3) * (seed as f64 + 0.7)).sin() * 4.0) + 0.25)
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = matmul(&Matrix::identity(2), &a).unwrap();
        assert_eq!(r, a);
    }

    #[test]
    fn matmul_projector() {
        let p = mat(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let x = mat(2, 1, &[5.0, 7.0]);
        let r = matmul(&p, &x).unwrap();
        assert_eq!(r.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = mat(3, 4, &seeded_entries(12, 1));
        let b = mat(4, 2, &seeded_entries(8, 2));
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_oracle(&a, &b);
        for i in 0..3 {
            for j in 0..2 {
                assert!((fast.get(i, j) - slow.get(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = mat(2, 3, &[0.0; 6]);
        let b = mat(2, 2, &[0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn scale_rows_single_row() {
        let w = mat(1, 2, &[1.0, 2.0]);
        let r = scale_rows(&w, &DiagVec::new(vec![3.0])).unwrap();
        assert_eq!(r.data(), &[3.0, 6.0]);
    }

    #[test]
    fn scale_cols_single_col() {
        let w = mat(2, 1, &[1.0, 2.0]);
        let r = scale_cols(&w, &DiagVec::new(vec![0.5])).unwrap();
        assert_eq!(r.data(), &[0.5, 1.0]);
    }

    #[test]
    fn scale_both_matches_diag_matmul_oracle() {
        // scale_rows(scale_cols(W, e), d) applies d_i * (w_ij * e_j), which is
        // the same rounding order as D * (W * E) with dense diagonal matmuls.
        let w = mat(4, 5, &seeded_entries(20, 3));
        let d = DiagVec::new(seeded_entries(4, 4).iter().map(|v| v.abs() + 0.1).collect());
        let e = DiagVec::new(seeded_entries(5, 5).iter().map(|v| v.abs() + 0.1).collect());
        let fast = scale_rows(&scale_cols(&w, &e).unwrap(), &d).unwrap();
        let oracle = matmul_oracle(&d.to_matrix(), &matmul_oracle(&w, &e.to_matrix()));
        assert_eq!(fast, oracle);
    }

    #[test]
    fn scale_length_errors() {
        let w = mat(2, 2, &[1.0; 4]);
        assert!(scale_rows(&w, &DiagVec::new(vec![1.0])).is_err());
        assert!(scale_cols(&w, &DiagVec::new(vec![1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn transpose_identity_and_small() {
        assert_eq!(transpose(&Matrix::identity(3)), Matrix::identity(3));
        let w = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(transpose(&w).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor4::from_vec(1, 1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matrix_text_roundtrip() {
        let w = mat(2, 3, &[1.0, -2.5, 3e-4, 0.0, 7.0, -1.0]);
        let parsed = parse_matrix(&format_matrix(&w)).unwrap();
        assert_eq!(parsed, w);
    }

    #[test]
    fn parse_matrix_rejects_malformed() {
        assert!(parse_matrix("").is_err());
        assert!(parse_matrix("2 2\n1 2\n3").is_err());
        assert!(parse_matrix("2\n1\n2").is_err());
        assert!(parse_matrix("1 2\n1 x").is_err());
        assert!(parse_matrix("1 1\n1\n2").is_err());
    }

    #[test]
    fn tensor4_text_roundtrip() {
        let k = Tensor4::from_vec(2, 1, 2, 2, vec![1.0, -0.5, 3e-7, 4.0, 0.0, 2.5, -1.0, 9.0]).unwrap();
        let parsed = parse_tensor4(&format_tensor4(&k)).unwrap();
        assert_eq!(parsed, k);
        assert!(parse_tensor4("2 1 2\n1 2").is_err());
        assert!(parse_tensor4("1 1 1 1\n1 2").is_err());
    }

    #[test]
    fn tensor4_indexing_layout() {
        let mut k = Tensor4::zeros(2, 3, 2, 2);
        k.set(1, 2, 1, 0, 9.0);
        let flat = ((1 * 3 + 2) * 2 + 1) * 2;
        assert_eq!(k.data()[flat], 9.0);
        assert_eq!(k.get(1, 2, 1, 0), 9.0);
    }
}
