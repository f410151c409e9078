//! Linear tape for reverse-mode accumulation over vector-valued nodes.
//!
//! Every node holds a dense value (scalars are length-1 vectors). Nodes are
//! appended in evaluation order, so a single reverse sweep from the output
//! visits each node exactly once. Only scalar outputs can be differentiated.

use super::dense::{
    affine_raw, check_finite, dot, log_sum_exp_raw, normalize_raw, sigmoid, softmax_raw,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities entering `log` are clamped here.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        cols: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Normalize {
        x: Var,
        norm: f64,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    ScaleConst {
        x: Var,
        c: f64,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Dot(Var, Var),
    Stack(Vec<Var>),
    Sum(Vec<Var>),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSumExp(Var),
    InvExpClamped {
        x: Var,
        active: bool,
    },
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    Kl {
        target: Vec<f64>,
        pred: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<()> {
        match self.dim(v) {
            1 => Ok(()),
            n => Err(Error::shape(op, "scalar", format!("length {n}"))),
        }
    }

    fn expect_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(Error::shape(op, da, db));
        }
        Ok(())
    }

    /// Input or parameter. Leaves are where gradients are read out.
    pub fn leaf(&mut self, values: &[f64]) -> Result<Var> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty leaf".into()));
        }
        check_finite("leaf", values)?;
        Ok(self.push(values.to_vec(), Op::Leaf))
    }

    /// `W x + b` with `W` stored row-major as a `rows * cols` leaf.
    pub fn affine(&mut self, x: Var, w: Var, b: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.dim(w) != rows * cols {
            return Err(Error::shape(
                "affine",
                format!("{rows}x{cols} weights"),
                self.dim(w),
            ));
        }
        if self.dim(x) != cols {
            return Err(Error::shape(
                "affine",
                format!("input of length {cols}"),
                self.dim(x),
            ));
        }
        if self.dim(b) != rows {
            return Err(Error::shape(
                "affine",
                format!("bias of length {rows}"),
                self.dim(b),
            ));
        }
        let out = affine_raw(self.value(x), self.value(w), self.value(b), rows, cols);
        Ok(self.push(
            out,
            Op::Affine {
                x,
                w,
                b,
                rows,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(out, Op::Sigmoid(x))
    }

    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let (out, norm) = normalize_raw(self.value(x))?;
        Ok(self.push(out, Op::Normalize { x, norm }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        self.push(out, Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Vector times a scalar node.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar("scale", s)?;
        let k = self.scalar(s);
        let out = self.value(x).iter().map(|v| v * k).collect();
        Ok(self.push(out, Op::Scale { x, s }))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push(out, Op::ScaleConst { x, c })
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let dim = self.dim(x);
        if index >= dim {
            return Err(Error::shape("pick", format!("index < {dim}"), index));
        }
        let out = vec![self.value(x)[index]];
        Ok(self.push(out, Op::Pick { x, index }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same("dot", a, b)?;
        let out = vec![dot(self.value(a), self.value(b))];
        Ok(self.push(out, Op::Dot(a, b)))
    }

    /// Gathers scalar nodes into one vector node.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidInput("stack of nothing".into()));
        }
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            self.expect_scalar("stack", v)?;
            out.push(self.scalar(v));
        }
        Ok(self.push(out, Op::Stack(items.to_vec())))
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidInput("sum of nothing".into()));
        }
        let mut total = 0.0;
        for &v in items {
            self.expect_scalar("sum", v)?;
            total += self.scalar(v);
        }
        Ok(self.push(vec![total], Op::Sum(items.to_vec())))
    }

    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "softmax temperature {temperature}"
            )));
        }
        let out = softmax_raw(self.value(x), temperature);
        Ok(self.push(out, Op::Softmax { x, temperature }))
    }

    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let out = vec![log_sum_exp_raw(self.value(x))];
        self.push(out, Op::LogSumExp(x))
    }

    /// `1 / clamp(exp(x), lo, hi)` for a scalar `x`; the gradient is zero
    /// wherever the clamp is active.
    pub fn inv_exp_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.expect_scalar("inv_exp_clamped", x)?;
        let raw = self.scalar(x).exp();
        let clamped = raw.clamp(lo, hi);
        let active = raw > lo && raw < hi;
        Ok(self.push(vec![1.0 / clamped], Op::InvExpClamped { x, active }))
    }

    /// Summed binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        if self.dim(p) != labels.len() {
            return Err(Error::shape("bce", self.dim(p), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&a| a != 0.0 && a != 1.0) {
            return Err(Error::InvalidInput(format!("label {bad} is not 0 or 1")));
        }
        let total = self
            .value(p)
            .iter()
            .zip(labels)
            .map(|(&q, &a)| {
                let q = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(a * q.ln() + (1.0 - a) * (1.0 - q).ln())
            })
            .sum();
        Ok(self.push(
            vec![total],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `KL(target || pred)` with `0 ln 0 = 0` and `pred` floored at
    /// [`PROB_FLOOR`].
    pub fn kl(&mut self, target: &[f64], pred: Var) -> Result<Var> {
        if self.dim(pred) != target.len() {
            return Err(Error::shape("kl", target.len(), self.dim(pred)));
        }
        let total = target
            .iter()
            .zip(self.value(pred))
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &q)| w * (w.ln() - q.max(PROB_FLOOR).ln()))
            .sum();
        Ok(self.push(
            vec![total],
            Op::Kl {
                target: target.to_vec(),
                pred,
            },
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.expect_scalar("backward", output)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine {
                x,
                w,
                b,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let gw = slot(grads, *w, rows * cols);
                for i in 0..rows {
                    let gi = g[i];
                    if gi != 0.0 {
                        for (gwij, xj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(xv) {
                            *gwij += gi * xj;
                        }
                    }
                }
                accumulate(slot(grads, *b, rows), g);
                let gx = slot(grads, *x, cols);
                for i in 0..rows {
                    let gi = g[i];
                    if gi != 0.0 {
                        for (gxj, wij) in gx.iter_mut().zip(&wv[i * cols..(i + 1) * cols]) {
                            *gxj += gi * wij;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let gx = slot(grads, *x, g.len());
                for ((gxi, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *gxi += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.len());
                for ((gxi, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *gxi += gi * yi * (1.0 - yi);
                }
            }
            Op::Normalize { x, norm } => {
                let yg = dot(y, g);
                let gx = slot(grads, *x, g.len());
                for ((gxi, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *gxi += (gi - yi * yg) / norm;
                }
            }
            Op::Concat(a, b) => {
                let na = self.dim(*a);
                accumulate(slot(grads, *a, na), &g[..na]);
                accumulate(slot(grads, *b, g.len() - na), &g[na..]);
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                accumulate(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                let gb = slot(grads, *b, g.len());
                for (gbi, gi) in gb.iter_mut().zip(g) {
                    *gbi -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, g.len());
                for ((gai, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *gai += gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((gbi, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *gbi += gi * ai;
                }
            }
            Op::Scale { x, s } => {
                let k = self.scalar(*s);
                let xv = self.value(*x);
                let gx = slot(grads, *x, g.len());
                for (gxi, gi) in gx.iter_mut().zip(g) {
                    *gxi += gi * k;
                }
                slot(grads, *s, 1)[0] += dot(g, xv);
            }
            Op::ScaleConst { x, c } => {
                let gx = slot(grads, *x, g.len());
                for (gxi, gi) in gx.iter_mut().zip(g) {
                    *gxi += gi * c;
                }
            }
            Op::Pick { x, index } => {
                let n = self.dim(*x);
                slot(grads, *x, n)[*index] += g[0];
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.len());
                for (gai, bi) in ga.iter_mut().zip(bv) {
                    *gai += g[0] * bi;
                }
                let gb = slot(grads, *b, bv.len());
                for (gbi, ai) in gb.iter_mut().zip(av) {
                    *gbi += g[0] * ai;
                }
            }
            Op::Stack(items) => {
                for (&v, gi) in items.iter().zip(g) {
                    slot(grads, v, 1)[0] += gi;
                }
            }
            Op::Sum(items) => {
                for &v in items {
                    slot(grads, v, 1)[0] += g[0];
                }
            }
            Op::Softmax { x, temperature } => {
                let yg = dot(y, g);
                let gx = slot(grads, *x, g.len());
                for ((gxi, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *gxi += temperature * yi * (gi - yg);
                }
            }
            Op::LogSumExp(x) => {
                let probs = softmax_raw(self.value(*x), 1.0);
                let gx = slot(grads, *x, probs.len());
                for (gxi, p) in gx.iter_mut().zip(probs) {
                    *gxi += g[0] * p;
                }
            }
            Op::InvExpClamped { x, active } => {
                if *active {
                    // d/dx exp(-x) = -exp(-x)
                    slot(grads, *x, 1)[0] -= g[0] * y[0];
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let gp = slot(grads, *p, labels.len());
                for ((gpi, &q), &a) in gp.iter_mut().zip(pv).zip(labels) {
                    if q > PROB_FLOOR && q < 1.0 - PROB_FLOOR {
                        *gpi += g[0] * (-a / q + (1.0 - a) / (1.0 - q));
                    }
                }
            }
            Op::Kl { target, pred } => {
                let pv = self.value(*pred);
                let gp = slot(grads, *pred, target.len());
                for ((gpi, &q), &w) in gp.iter_mut().zip(pv).zip(target) {
                    if w > 0.0 && q > PROB_FLOOR {
                        *gpi -= g[0] * w / q;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_gradient_is_one_and_unused_leaves_are_none() {
        let mut t = Tape::new();
        let x = t.leaf(&[2.0]).unwrap();
        let unused = t.leaf(&[5.0]).unwrap();
        let g = t.backward(x).unwrap();
        assert_eq!(g.get(x), Some(&[1.0][..]));
        assert_eq!(g.get(unused), None);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x via dot, dy/dx = 2x
        let mut t = Tape::new();
        let x = t.leaf(&[3.0, -1.0]).unwrap();
        let y = t.dot(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_rejects_vector_output() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0]).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(&[1.0, 2.0]).unwrap();
        let b = t.leaf(&[1.0, 2.0, 3.0]).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.dot(a, b).is_err());
        assert!(t.affine(a, b, a, 2, 2).is_err());
        assert!(t.scale(a, b).is_err());
        assert!(t.pick(a, 2).is_err());
        assert!(t.bce(a, &[1.0]).is_err());
        assert!(t.bce(a, &[1.0, 0.5]).is_err());
    }

    /// Two stacked affine maps: the reverse sweep must reproduce the
    /// explicitly multiplied Jacobian `W2 W1` and the outer-product weight
    /// gradients.
    #[test]
    fn reverse_sweep_matches_multiplied_jacobian() {
        let w1 = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75, -2.0, 1.0, 0.1];
        let w2 = [1.0, 0.0, -1.0, 0.3, 2.0, 0.5, -0.4, 1.2, 0.7];
        let b = [0.1, -0.2, 0.3];
        let x0 = [1.0, -2.0, 0.5];
        let c = [0.7, -1.1, 0.4];

        let mut t = Tape::new();
        let x = t.leaf(&x0).unwrap();
        let w1v = t.leaf(&w1).unwrap();
        let w2v = t.leaf(&w2).unwrap();
        let bv = t.leaf(&b).unwrap();
        let cv = t.leaf(&c).unwrap();
        let h = t.affine(x, w1v, bv, 3, 3).unwrap();
        let y = t.affine(h, w2v, bv, 3, 3).unwrap();
        let out = t.dot(y, cv).unwrap();
        let g = t.backward(out).unwrap();

        // d out / dx = c^T W2 W1
        let mut j = [[0.0; 3]; 3];
        for (i, row) in j.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|m| w2[i * 3 + m] * w1[m * 3 + k]).sum();
            }
        }
        for k in 0..3 {
            let want: f64 = (0..3).map(|i| c[i] * j[i][k]).sum();
            assert!((g.get(x).unwrap()[k] - want).abs() < 1e-12);
        }

        // d out / dW2[i][m] = c[i] * h[m]
        let hv = t.value(h).to_vec();
        for i in 0..3 {
            for m in 0..3 {
                assert!((g.get(w2v).unwrap()[i * 3 + m] - c[i] * hv[m]).abs() < 1e-12);
            }
        }
        // d out / dW1[m][k] = (c^T W2)[m] * x[k]
        for m in 0..3 {
            let u: f64 = (0..3).map(|i| c[i] * w2[i * 3 + m]).sum();
            for k in 0..3 {
                assert!((g.get(w1v).unwrap()[m * 3 + k] - u * x0[k]).abs() < 1e-12);
            }
        }
        // b is used twice: c + W2^T c
        for m in 0..3 {
            let want = c[m] + (0..3).map(|i| c[i] * w2[i * 3 + m]).sum::<f64>();
            assert!((g.get(bv).unwrap()[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_and_bce_values() {
        let mut t = Tape::new();
        let p = t.leaf(&[0.9, 0.2, 0.7]).unwrap();
        let l = t.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln());
        assert!((t.scalar(l) - want).abs() < 1e-12);

        let q = t.leaf(&[0.5, 0.5]).unwrap();
        let k = t.kl(&[1.0, 0.0], q).unwrap();
        assert!((t.scalar(k) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn inv_exp_clamp_blocks_gradient_outside_range() {
        let mut t = Tape::new();
        let x = t.leaf(&[5.0]).unwrap();
        let y = t.inv_exp_clamped(x, 0.01, 1.0).unwrap();
        assert_eq!(t.scalar(y), 1.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x), None);

        let mut t = Tape::new();
        let x = t.leaf(&[(0.07f64).ln()]).unwrap();
        let y = t.inv_exp_clamped(x, 0.01, 1.0).unwrap();
        assert!((t.scalar(y) - 1.0 / 0.07).abs() < 1e-9);
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap()[0] + 1.0 / 0.07).abs() < 1e-9);
    }
}
