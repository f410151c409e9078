//! Training objectives.
//!
//! Every loss exists in two forms: a tape form used during training (takes
//! [`Var`]s, returns a scalar [`Var`]) and a value form over plain vectors
//! that builds a throwaway tape of constants. Inputs are re-normalised
//! before cosine scoring, so scaling an input vector never changes a loss.

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::pseudo_weights::PseudoWeight;
use crate::tensorgrad::{DenseVec, Tape, Var};

/// Temperatures are clamped to this range after exponentiation.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    pub fn tag(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::InvalidInput(format!("unknown reduction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Initial `ln tau1` for the pre-training InfoNCE.
    pub tau1_log: f64,
    /// Initial `ln tau2` for the triplet contrastive loss.
    pub tau2_log: f64,
    pub lambda: f64,
    pub kl_reduction: Reduction,
    pub fap_reduction: Reduction,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1_log: TAU_INIT.ln(),
            tau2_log: TAU_INIT.ln(),
            lambda: 0.5,
            kl_reduction: Reduction::Mean,
            fap_reduction: Reduction::Sum,
            batch_size: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        for t in [self.tau1_log, self.tau2_log] {
            if !t.is_finite() {
                return Err(Error::NonFinite("log temperature".into()));
            }
        }
        Ok(())
    }
}

/// `exp(log_tau)` clamped to `[TAU_MIN, TAU_MAX]`.
pub fn temperature(log_tau: f64) -> f64 {
    log_tau.exp().clamp(TAU_MIN, TAU_MAX)
}

/// `1 / temperature(log_tau)` on the tape.
pub fn inverse_temperature(tape: &mut Tape, log_tau: Var) -> Result<Var> {
    tape.inv_exp_clamped(log_tau, TAU_MIN, TAU_MAX)
}

fn check_batch(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::InvalidInput(format!("{op}: empty batch")));
    }
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Mean over `i` of `-log softmax(row i)[i]`, plus the column direction when
/// `bidirectional`. Logits are cosine similarities times `inv_temp`.
fn info_nce(
    tape: &mut Tape,
    queries: &[Var],
    keys: &[Var],
    inv_temp: Var,
    bidirectional: bool,
) -> Result<Var> {
    check_batch("info_nce", queries.len(), keys.len())?;
    let b = queries.len();
    let q: Vec<Var> = queries
        .iter()
        .map(|&v| tape.normalize(v))
        .collect::<Result<_>>()?;
    let k: Vec<Var> = keys
        .iter()
        .map(|&v| tape.normalize(v))
        .collect::<Result<_>>()?;

    let mut sims = Vec::with_capacity(b * b);
    for &qi in &q {
        for &kj in &k {
            sims.push(tape.dot(qi, kj)?);
        }
    }

    let direction = |tape: &mut Tape, by_row: bool| -> Result<Var> {
        let mut terms = Vec::with_capacity(b);
        for i in 0..b {
            let line: Vec<Var> = (0..b)
                .map(|j| {
                    if by_row {
                        sims[i * b + j]
                    } else {
                        sims[j * b + i]
                    }
                })
                .collect();
            let raw = tape.stack(&line)?;
            let logits = tape.scale(raw, inv_temp)?;
            let lse = tape.log_sum_exp(logits);
            let pos = tape.pick(logits, i)?;
            terms.push(tape.sub(lse, pos)?);
        }
        let total = tape.sum(&terms)?;
        Ok(tape.scale_const(total, 1.0 / b as f64))
    };

    let forward = direction(tape, true)?;
    if !bidirectional {
        return Ok(forward);
    }
    let backward = direction(tape, false)?;
    tape.add(forward, backward)
}

/// Bi-directional image/text InfoNCE.
pub fn fir_on_tape(tape: &mut Tape, images: &[Var], texts: &[Var], inv_tau1: Var) -> Result<Var> {
    info_nce(tape, images, texts, inv_tau1, true)
}

/// Query-to-target InfoNCE with in-batch negatives.
pub fn cl_on_tape(tape: &mut Tape, queries: &[Var], targets: &[Var], inv_tau2: Var) -> Result<Var> {
    info_nce(tape, queries, targets, inv_tau2, false)
}

/// Binary cross-entropy over attribute probabilities, summed over attributes
/// and reduced over the batch.
pub fn fap_on_tape(
    tape: &mut Tape,
    probs: &[Var],
    labels: &[Vec<f64>],
    reduction: Reduction,
) -> Result<Var> {
    check_batch("loss_fap", probs.len(), labels.len())?;
    let terms: Vec<Var> = probs
        .iter()
        .zip(labels)
        .map(|(&p, a)| tape.bce(p, a))
        .collect::<Result<_>>()?;
    let total = tape.sum(&terms)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale_const(total, 1.0 / probs.len() as f64),
    })
}

/// `KL(w || w_pred)` per example, reduced over the batch.
pub fn kl_on_tape(
    tape: &mut Tape,
    targets: &[PseudoWeight],
    preds: &[Var],
    reduction: Reduction,
) -> Result<Var> {
    check_batch("loss_kl", targets.len(), preds.len())?;
    let terms: Vec<Var> = targets
        .iter()
        .zip(preds)
        .map(|(w, &p)| tape.kl(&w.as_array(), p))
        .collect::<Result<_>>()?;
    let total = tape.sum(&terms)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale_const(total, 1.0 / targets.len() as f64),
    })
}

pub fn total_on_tape(tape: &mut Tape, l_cl: Var, l_kl: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale_const(l_kl, lambda);
    tape.add(l_cl, weighted)
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

impl AsRef<[f64]> for DenseVec {
    fn as_ref(&self) -> &[f64] {
        self.as_slice()
    }
}

fn leaves<V: AsRef<[f64]>>(tape: &mut Tape, items: &[V]) -> Result<Vec<Var>> {
    items.iter().map(|v| tape.leaf(v.as_ref())).collect()
}

fn check_tau(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(1.0 / tau)
}

/// Bi-directional InfoNCE over paired image/text vectors at temperature
/// `tau1`.
pub fn loss_fir<V: AsRef<[f64]>>(z_img: &[V], z_txt: &[V], tau1: f64) -> Result<f64> {
    check_batch("loss_fir", z_img.len(), z_txt.len())?;
    let mut tape = Tape::new();
    let inv = tape.leaf(&[check_tau(tau1)?])?;
    let (a, b) = (leaves(&mut tape, z_img)?, leaves(&mut tape, z_txt)?);
    let out = fir_on_tape(&mut tape, &a, &b, inv)?;
    Ok(tape.scalar(out))
}

/// Query-to-target InfoNCE at temperature `tau2`.
pub fn loss_cl<V: AsRef<[f64]>>(z_q: &[V], z_tgt: &[V], tau2: f64) -> Result<f64> {
    check_batch("loss_cl", z_q.len(), z_tgt.len())?;
    let mut tape = Tape::new();
    let inv = tape.leaf(&[check_tau(tau2)?])?;
    let (a, b) = (leaves(&mut tape, z_q)?, leaves(&mut tape, z_tgt)?);
    let out = cl_on_tape(&mut tape, &a, &b, inv)?;
    Ok(tape.scalar(out))
}

pub fn loss_fap(probs: &[DenseVec], labels: &[Vec<f64>], reduction: Reduction) -> Result<f64> {
    check_batch("loss_fap", probs.len(), labels.len())?;
    let mut tape = Tape::new();
    let p = leaves(&mut tape, probs)?;
    let out = fap_on_tape(&mut tape, &p, labels, reduction)?;
    Ok(tape.scalar(out))
}

/// `sum_c w[c] (ln w[c] - ln w_pred[c])`, with `0 ln 0 = 0`.
pub fn kl_divergence(w: &PseudoWeight, w_pred: &PseudoWeight) -> f64 {
    w.as_array()
        .iter()
        .zip(w_pred.as_array())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, q)| p * (p.ln() - q.max(crate::tensorgrad::PROB_FLOOR).ln()))
        .sum()
}

pub fn loss_kl(w: &[PseudoWeight], w_pred: &[PseudoWeight], reduction: Reduction) -> Result<f64> {
    check_batch("loss_kl", w.len(), w_pred.len())?;
    let mut tape = Tape::new();
    let preds = w_pred
        .iter()
        .map(|p| tape.leaf(&p.as_array()))
        .collect::<Result<Vec<_>>>()?;
    let out = kl_on_tape(&mut tape, w, &preds, reduction)?;
    Ok(tape.scalar(out))
}

/// `l_cl + lambda * l_kl`.
pub fn loss_total(l_cl: f64, l_kl: f64, lambda: f64) -> Result<f64> {
    if !(l_cl.is_finite() && l_kl.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite("loss_total input".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(l_cl + lambda * l_kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vecs(rows: &[&[f64]]) -> Vec<DenseVec> {
        rows.iter()
            .map(|r| DenseVec::new(r.to_vec()).unwrap())
            .collect()
    }

    fn pw(a: f64, b: f64) -> PseudoWeight {
        PseudoWeight::new(a, b).unwrap()
    }

    #[test]
    fn fir_examples() {
        let one = vecs(&[&[0.3, 0.4]]);
        assert_eq!(loss_fir(&one, &vecs(&[&[-1.0, 2.0]]), 0.07).unwrap(), 0.0);

        let id = vecs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        let got = loss_fir(&id, &id, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.6265234).abs() < 1e-6);

        let same = vecs(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!((loss_fir(&same, &same, 0.3).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cl_examples() {
        let one = vecs(&[&[0.3, 0.4]]);
        assert_eq!(loss_cl(&one, &one, 0.07).unwrap(), 0.0);

        let id = vecs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let got = loss_cl(&id, &id, 1.0).unwrap();
        assert!((got - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((got - 0.3132617).abs() < 1e-6);

        let same = vecs(&[&[0.0, 1.0], &[0.0, 2.0], &[0.0, 3.0]]);
        assert!((loss_cl(&same, &same, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_batches_rejected() {
        let none: Vec<DenseVec> = Vec::new();
        assert!(loss_fir(&none, &none, 1.0).is_err());
        assert!(loss_cl(&none, &none, 1.0).is_err());
        let one = vecs(&[&[1.0]]);
        let two = vecs(&[&[1.0], &[2.0]]);
        assert!(loss_cl(&one, &two, 1.0).is_err());
    }

    #[test]
    fn fap_examples() {
        let r = Reduction::Sum;
        let l = loss_fap(&vecs(&[&[0.5]]), &[vec![1.0]], r).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = loss_fap(&vecs(&[&[0.5, 0.5]]), &[vec![1.0, 0.0]], r).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        let l = loss_fap(&vecs(&[&[0.9, 0.2, 0.7]]), &[vec![1.0, 0.0, 1.0]], r).unwrap();
        assert!((l - -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!((l - 0.6851790).abs() < 1e-6);
        assert!(loss_fap(&vecs(&[&[0.5]]), &[vec![2.0]], r).is_err());
    }

    #[test]
    fn fap_reductions() {
        let p = vecs(&[&[0.5], &[0.5]]);
        let labels = [vec![1.0], vec![0.0]];
        let sum = loss_fap(&p, &labels, Reduction::Sum).unwrap();
        let mean = loss_fap(&p, &labels, Reduction::Mean).unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-15);
    }

    #[test]
    fn fap_clamps_extreme_probabilities() {
        let l = loss_fap(&vecs(&[&[0.0, 1.0]]), &[vec![1.0, 0.0]], Reduction::Sum).unwrap();
        let floor = 1e-12f64;
        let want = -floor.ln() - (1.0 - (1.0 - floor)).ln();
        assert!((l - want).abs() < 1e-9);
        assert!(l.is_finite());
    }

    #[test]
    fn kl_examples() {
        let r = Reduction::Mean;
        assert_eq!(loss_kl(&[pw(0.3, 0.7)], &[pw(0.3, 0.7)], r).unwrap(), 0.0);
        let l = loss_kl(&[pw(0.25, 0.75)], &[pw(0.5, 0.5)], r).unwrap();
        assert!((l - (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln())).abs() < 1e-15);
        assert!((l - 0.1308120).abs() < 1e-6);
        let l = loss_kl(&[pw(1.0, 0.0)], &[pw(0.5, 0.5)], r).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_reductions() {
        let w = [pw(0.25, 0.75), pw(1.0, 0.0)];
        let p = [pw(0.5, 0.5), pw(0.5, 0.5)];
        let sum = loss_kl(&w, &p, Reduction::Sum).unwrap();
        let mean = loss_kl(&w, &p, Reduction::Mean).unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-15);
        assert!((sum - kl_divergence(&w[0], &p[0]) - kl_divergence(&w[1], &p[1])).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(0.77, 123.0, 0.0).unwrap(), 0.77);
        assert!((loss_total(1.0, 0.2, 0.5).unwrap() - 1.1).abs() < 1e-15);
        let cl = (1.0 + (-1.0f64).exp()).ln();
        let kl = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((cl - 0.3132617).abs() < 1e-6);
        assert!((loss_total(cl, kl, 0.5).unwrap() - 0.3786677).abs() < 1e-6);
        assert!(loss_total(f64::NAN, 0.0, 0.5).is_err());
        assert!(loss_total(1.0, 0.0, -0.5).is_err());
    }

    #[test]
    fn temperature_clamp() {
        assert!((temperature(TAU_INIT.ln()) - 0.07).abs() < 1e-15);
        assert_eq!(temperature(10.0), TAU_MAX);
        assert_eq!(temperature(-10.0), TAU_MIN);
    }

    fn batch(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), n)
    }

    fn dv(rows: &[Vec<f64>]) -> Vec<DenseVec> {
        rows.iter()
            .map(|r| DenseVec::new(r.clone()).unwrap())
            .collect()
    }

    fn simplex() -> impl Strategy<Value = PseudoWeight> {
        (0.0f64..=1.0).prop_map(|a| PseudoWeight::new(a, 1.0 - a).unwrap())
    }

    proptest! {
        #[test]
        fn fir_is_nonnegative_and_symmetric(a in batch(4, 3), b in batch(4, 3), tau in 0.05f64..1.0) {
            let (a, b) = (dv(&a), dv(&b));
            prop_assume!(a.iter().chain(&b).all(|v| v.norm() > 1e-3));
            let ab = loss_fir(&a, &b, tau).unwrap();
            let ba = loss_fir(&b, &a, tau).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn losses_ignore_input_scale(a in batch(3, 4), b in batch(3, 4)) {
            let (a, b) = (dv(&a), dv(&b));
            prop_assume!(a.iter().chain(&b).all(|v| v.norm() > 1e-3));
            let fir = loss_fir(&a, &b, 0.1).unwrap();
            let cl = loss_cl(&a, &b, 0.1).unwrap();
            for k in [0.5, 2.0, 10.0] {
                let scale = |vs: &[DenseVec]| -> Vec<DenseVec> {
                    vs.iter()
                        .map(|v| DenseVec::new(v.as_slice().iter().map(|x| x * k).collect()).unwrap())
                        .collect()
                };
                let (sa, sb) = (scale(&a), scale(&b));
                prop_assert!((loss_fir(&sa, &sb, 0.1).unwrap() - fir).abs() < 1e-12);
                prop_assert!((loss_cl(&sa, &sb, 0.1).unwrap() - cl).abs() < 1e-12);
            }
        }
    }

    /// Gibbs' inequality on random simplex pairs.
    #[test]
    fn kl_nonnegative_with_equality_only_on_match() {
        use proptest::strategy::ValueTree;
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        let strategy = (simplex(), simplex());
        for _ in 0..1000 {
            let (w, q) = strategy.new_tree(&mut runner).unwrap().current();
            let d = kl_divergence(&w, &q);
            assert!(d >= 0.0, "{d}");
            if (w.w_image() - q.w_image()).abs() > 1e-6 {
                assert!(d > 0.0);
            }
            assert_eq!(kl_divergence(&w, &w), 0.0);
        }
    }
}
