//! Dense row-major matrices and the handful of kernels the losses need:
//! row softmax, l2 normalisation and pairwise cosine similarity.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{DcdcError, Result};

/// Vectors with a smaller l2 norm are treated as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Row sums of a [`ProbBatch`] must be within this distance of 1.
pub const PROB_ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DcdcError::shape(format!(
                "{} values cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DcdcError::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DcdcError::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DcdcError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`, i.e. the matrix of row-by-row dot products.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(DcdcError::shape(format!(
                "row products of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(DcdcError::shape(format!(
                "column products of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(DcdcError::shape("add of differently shaped matrices"));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes one row per line, comma separated, 9 significant digits, no header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut line = String::new();
        for i in 0..self.rows {
            line.clear();
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&format_sig(*v, 9));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Matrix> {
        let mut rows = Vec::new();
        let mut offset = 0u64;
        for line in input.lines() {
            let line = line?;
            let len = line.len() as u64 + 1;
            if !line.trim().is_empty() {
                let row = line
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| DcdcError::Format {
                        offset,
                        message: e.to_string(),
                    })?;
                rows.push(row);
            }
            offset += len;
        }
        Matrix::from_rows(&rows)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Formats like C's `%.{sig}g`: shortest of fixed/scientific, trailing zeros trimmed.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sig = sig.max(1);
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= sig as i32 {
        let mantissa = trim_zeros(mantissa);
        let mut s = String::with_capacity(mantissa.len() + 5);
        let _ = write!(
            s,
            "{}e{}{:02}",
            mantissa,
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        );
        s
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// A row-stochastic B x C matrix of cluster-assignment distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Matrix);

impl ProbBatch {
    /// Validates entries in [0, 1] and unit row sums.
    pub fn new(matrix: Matrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let row = matrix.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(DcdcError::shape(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_ROW_TOL {
                return Err(DcdcError::shape(format!("row {i} sums to {sum}")));
            }
        }
        Ok(ProbBatch(matrix))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    /// Index of the largest entry of each row, ties to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        argmax_rows(&self.0)
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(logits: &Matrix) -> Result<ProbBatch> {
    if !logits.is_finite() {
        return Err(DcdcError::NonFinite("softmax input".into()));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(ProbBatch(out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scales `v` to unit l2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(v);
    if !(n > EPS_NORM) || !n.is_finite() {
        return Err(DcdcError::Degenerate {
            what: "vector",
            index: 0,
            eps: EPS_NORM,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DcdcError::shape(format!(
            "cosine of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm2(u), norm2(v));
    for (index, n) in [(0, nu), (1, nv)] {
        if !(n > EPS_NORM) {
            return Err(DcdcError::Degenerate {
                what: "argument",
                index,
                eps: EPS_NORM,
            });
        }
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Rows scaled to unit norm, plus the original norms (needed for the backward pass).
pub(crate) fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm2(m.row(i));
        if !(n > EPS_NORM) {
            return Err(DcdcError::Degenerate {
                what: "row",
                index: i,
                eps: EPS_NORM,
            });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Row normalisation with the norm floored at [`EPS_NORM`]. Returns the floored norms.
pub(crate) fn normalize_rows_clamped(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm2(m.row(i)).max(EPS_NORM);
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DcdcError::shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `out[i][j] = cosine(a.row(i), b.row(j))`.
pub fn pairwise_cosine_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same_shape(a, b)?;
    let (na, _) = normalize_rows(a)?;
    let (nb, _) = normalize_rows(b)?;
    na.matmul_nt(&nb)
}

/// `out[i][j] = cosine(a.column(i), b.column(j))`.
pub fn pairwise_cosine_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same_shape(a, b)?;
    let map_col = |e: DcdcError| match e {
        DcdcError::Degenerate { index, eps, .. } => DcdcError::Degenerate {
            what: "column",
            index,
            eps,
        },
        e => e,
    };
    let (na, _) = normalize_rows(&a.transpose()).map_err(map_col)?;
    let (nb, _) = normalize_rows(&b.transpose()).map_err(map_col)?;
    na.matmul_nt(&nb)
}

/// Row cosines between two probability batches. A probability column can underflow
/// to zero, so norms here are floored at [`EPS_NORM`] instead of rejected.
pub fn prob_cosine_rows(u: &ProbBatch, v: &ProbBatch) -> Result<Matrix> {
    check_same_shape(u.matrix(), v.matrix())?;
    let (a, _) = normalize_rows_clamped(u.matrix());
    let (b, _) = normalize_rows_clamped(v.matrix());
    a.matmul_nt(&b)
}

/// Column cosines between two probability batches, norms floored as in [`prob_cosine_rows`].
pub fn prob_cosine_cols(u: &ProbBatch, v: &ProbBatch) -> Result<Matrix> {
    check_same_shape(u.matrix(), v.matrix())?;
    let (a, _) = normalize_rows_clamped(&u.matrix().transpose());
    let (b, _) = normalize_rows_clamped(&v.matrix().transpose());
    a.matmul_nt(&b)
}
