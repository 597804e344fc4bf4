//! Dense row-major matrices, the handful of kernels the layers need, and
//! elementwise activations.
//!
//! Batched activations are stored with one sample per column, so a shard of
//! width `n/p` evaluated on `batch` samples is an `(n/p) x batch` matrix.
//!
//! Every kernel that does arithmetic on behalf of a layer takes a [`Flops`]
//! counter. Matrix products count `2·m·n·k`; every elementwise update (bias
//! add, activation, accumulation, Hadamard product, batch row-sum) counts one
//! FLOP per element touched. Evaluating `σ'` is free because it only selects
//! between constants.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Running count of floating-point operations performed by one rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Flops(pub u64);

impl Flops {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }

    pub fn get(self) -> u64 {
        self.0
    }

    /// Returns the count and resets it to zero.
    pub fn take(&mut self) -> u64 {
        std::mem::take(&mut self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(8).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
            if self.cols > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 8 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(config_err(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A single column.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows, "row block out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column block out of range");
        Matrix::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    /// Overwrites rows `start..` with `block`.
    pub fn set_row_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols);
        assert!(start + block.rows <= self.rows);
        let c = self.cols;
        self.data[start * c..(start + block.rows) * c].copy_from_slice(&block.data);
    }

    /// Overwrites the sub-matrix whose top-left corner is `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for r in 0..block.rows {
            let dst = (r0 + r) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(config_err(
                "vstack",
                format!("column mismatch: {} vs {}", bad.cols, cols),
            ));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(config_err(
                op,
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix, flops: &mut Flops) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        flops.add(self.len() as u64);
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Matrix, flops: &mut Flops) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        flops.add(self.len() as u64);
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Elementwise product, in place.
    pub fn hadamard_assign(&mut self, other: &Matrix, flops: &mut Flops) -> Result<()> {
        self.check_same_shape(other, "hadamard")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        flops.add(self.len() as u64);
        Ok(())
    }

    /// Adds `bias[r]` to every entry of row `r`.
    pub fn add_bias(&mut self, bias: &[f64], flops: &mut Flops) -> Result<()> {
        if bias.len() != self.rows {
            return Err(config_err(
                "add_bias",
                format!("bias of length {} for {} rows", bias.len(), self.rows),
            ));
        }
        for (r, b) in bias.iter().enumerate() {
            for v in &mut self.data[r * self.cols..(r + 1) * self.cols] {
                *v += b;
            }
        }
        flops.add(self.len() as u64);
        Ok(())
    }

    /// Sums each row over the batch (columns).
    pub fn row_sums(&self, flops: &mut Flops) -> Vec<f64> {
        flops.add(self.len() as u64);
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }
}

/// Dense product `op(a) · op(b)` where `op` optionally transposes.
///
/// Adds `2·m·n·k` to `flops` where the result is `m x n` and `k` is the
/// contracted dimension.
pub fn gemm(
    a: &Matrix,
    b: &Matrix,
    transpose_a: bool,
    transpose_b: bool,
    flops: &mut Flops,
) -> Result<Matrix> {
    let (m, ka) = if transpose_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if transpose_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(config_err(
            "gemm",
            format!(
                "inner dimensions differ: op(a) is {m}x{ka}, op(b) is {kb}x{n}"
            ),
        ));
    }
    let k = ka;
    let at;
    let a = if transpose_a {
        at = a.transpose();
        &at
    } else {
        a
    };
    let bt;
    let b = if transpose_b {
        bt = b.transpose();
        &bt
    } else {
        b
    };

    // i-k-j order: the inner loop streams one row of `b` into one row of the
    // output. Each output entry accumulates over k in ascending order.
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    flops.add(2 * (m * n * k) as u64);
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Uncounted product; for oracles and setup code outside the cost model.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, b, false, false, &mut Flops::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative. For ReLU the subgradient at 0 is taken to be 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Elementwise `σ(z)`; one FLOP per element.
pub fn apply_activation(z: &Matrix, act: Activation, flops: &mut Flops) -> Matrix {
    flops.add(z.len() as u64);
    Matrix {
        rows: z.rows,
        cols: z.cols,
        data: z.data.iter().map(|&v| act.eval(v)).collect(),
    }
}

/// Elementwise `σ'(pre)` evaluated at the pre-activation values.
pub fn activation_grad(pre: &Matrix, act: Activation) -> Matrix {
    Matrix {
        rows: pre.rows,
        cols: pre.cols,
        data: pre.data.iter().map(|&v| act.derivative(v)).collect(),
    }
}
