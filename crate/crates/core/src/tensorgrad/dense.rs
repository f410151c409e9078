//! Dense vectors and matrices in 64-bit arithmetic, plus the value-level
//! kernels shared by the tape and by forward-only evaluation.

use crate::error::{Error, Result};

/// A non-empty vector of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVec(Vec<f64>);

impl DenseVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("vector must be non-empty".into()));
        }
        check_finite("vector", &values)?;
        Ok(Self(values))
    }

    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "DenseVec length must be positive");
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; present for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_vec(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &DenseVec) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", self.len(), other.len()));
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl std::ops::Index<usize> for DenseVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major matrix of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMat {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != values.len() {
            return Err(Error::shape("matrix", rows * cols, values.len()));
        }
        check_finite("matrix", &values)?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "DenseMat dims must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_vec(&mut self) -> &mut Vec<f64> {
        &mut self.values
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", values[i]))),
        None => Ok(()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = W x + b` on raw slices; the caller has checked shapes.
pub(crate) fn affine_raw(x: &[f64], w: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| dot(&w[i * cols..(i + 1) * cols], x) + b[i])
        .collect()
}

pub(crate) fn softmax_raw(v: &[f64], temperature: f64) -> Vec<f64> {
    let m = v
        .iter()
        .map(|x| temperature * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (temperature * x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_sum_exp_raw(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn normalize_raw(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("norm of vector".into()));
    }
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize the zero vector".into()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// `W x + b`.
pub fn affine(x: &DenseVec, w: &DenseMat, b: &DenseVec) -> Result<DenseVec> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("input of length {}", w.cols),
            x.len(),
        ));
    }
    if b.len() != w.rows {
        return Err(Error::shape(
            "affine",
            format!("bias of length {}", w.rows),
            b.len(),
        ));
    }
    DenseVec::new(affine_raw(
        x.as_slice(),
        &w.values,
        b.as_slice(),
        w.rows,
        w.cols,
    ))
}

/// Softmax of `temperature * v`, stabilised by subtracting the maximum.
pub fn softmax(v: &DenseVec, temperature: f64) -> Result<DenseVec> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    DenseVec::new(softmax_raw(v.as_slice(), temperature))
}

pub fn l2_normalize(v: &DenseVec) -> Result<DenseVec> {
    let (out, _) = normalize_raw(v.as_slice())?;
    Ok(DenseVec(out))
}

pub fn cosine_sim(a: &DenseVec, b: &DenseVec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0))
}
