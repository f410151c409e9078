//! Finite-difference verification of every training loss against the
//! tape's analytic gradients, over all model parameters including the log
//! temperatures.

use rand::Rng;

use super::config::RunConfig;
use super::model::{BoundModel, ModelDims, TrainedModel};
use super::train::{fap_batch, fir_batch, stage_rng, triplet_batch, Resolved};
use crate::composers::ComposerKind;
use crate::datasets::{AttributeExample, PairExample, TripletExample};
use crate::error::{Error, Result};
use crate::losses::kl_on_tape;
use crate::pseudo_weights::PseudoWeight;
use crate::tensorgrad::{grad_check, DenseVec, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Fir,
    Fap,
    Cl,
    Kl,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Fir,
        LossKind::Fap,
        LossKind::Cl,
        LossKind::Kl,
        LossKind::Total,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Fir => "fir",
            LossKind::Fap => "fap",
            LossKind::Cl => "cl",
            LossKind::Kl => "kl",
            LossKind::Total => "total",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub loss: LossKind,
    pub trials: usize,
    /// Worst relative error over all trials and parameters.
    pub max_error: f64,
    pub parameters: usize,
}

const DIMS: ModelDims = ModelDims {
    image: 5,
    text: 4,
    attributes: 3,
    hidden: 6,
    joint: 4,
};
const BATCH: usize = 4;
const LAMBDA: f64 = 0.5;
const EPS: f64 = 1e-6;

struct Fixture {
    pairs: Vec<PairExample>,
    attrs: Vec<AttributeExample>,
    triplets: Vec<TripletExample>,
    targets: Vec<Vec<f64>>,
    labels: Vec<PseudoWeight>,
}

fn vector<R: Rng>(rng: &mut R, n: usize) -> DenseVec {
    DenseVec::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

fn fixture<R: Rng>(rng: &mut R) -> Fixture {
    let pairs = (0..BATCH)
        .map(|i| PairExample {
            id: format!("p{i}"),
            image_id: format!("i{i}"),
            image_features: vector(rng, DIMS.image),
            text_id: format!("t{i}"),
            text_features: vector(rng, DIMS.text),
        })
        .collect();
    let attrs = (0..BATCH)
        .map(|i| AttributeExample {
            id: format!("a{i}"),
            image_id: format!("i{i}"),
            image_features: vector(rng, DIMS.image),
            attributes: (0..DIMS.attributes)
                .filter(|_| rng.random_bool(0.5))
                .collect(),
        })
        .collect();
    let triplets = (0..BATCH)
        .map(|i| TripletExample {
            id: format!("q{i}"),
            reference_id: format!("r{i}"),
            reference_features: vector(rng, DIMS.image),
            text_id: format!("t{i}"),
            text_features: vector(rng, DIMS.text),
            target_id: format!("g{i}"),
            slice: None,
        })
        .collect();
    let targets = (0..BATCH)
        .map(|_| vector(rng, DIMS.image).into_inner())
        .collect();
    let labels = (0..BATCH)
        .map(|_| {
            let w: f64 = rng.random_range(0.0..1.0);
            PseudoWeight::new(w, 1.0 - w).expect("on simplex")
        })
        .collect();
    Fixture {
        pairs,
        attrs,
        triplets,
        targets,
        labels,
    }
}

fn loss_on_tape(
    kind: LossKind,
    fx: &Fixture,
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &RunConfig,
) -> Result<Var> {
    let resolved: Vec<Resolved> = fx
        .triplets
        .iter()
        .zip(&fx.targets)
        .zip(&fx.labels)
        .map(|((t, g), w)| Resolved {
            triplet: t,
            target: g,
            label: Some(*w),
        })
        .collect();
    let refs: Vec<&Resolved> = resolved.iter().collect();
    match kind {
        LossKind::Fir => fir_batch(tape, bound, &fx.pairs.iter().collect::<Vec<_>>()),
        LossKind::Fap => fap_batch(
            tape,
            bound,
            &fx.attrs.iter().collect::<Vec<_>>(),
            DIMS.attributes,
            cfg,
        ),
        LossKind::Cl => triplet_batch(tape, bound, &refs, 0.0, cfg).map(|(v, _)| v),
        LossKind::Total => triplet_batch(tape, bound, &refs, LAMBDA, cfg).map(|(v, _)| v),
        LossKind::Kl => {
            let mut preds = Vec::with_capacity(BATCH);
            for t in &fx.triplets {
                let x = tape.leaf(t.reference_features.as_slice())?;
                let zr = bound.image.encode(tape, x)?;
                let y = tape.leaf(t.text_features.as_slice())?;
                let zt = bound.text.encode(tape, y)?;
                let c = bound.composer.compose(tape, zr, zt)?;
                preds.push(
                    c.weights
                        .ok_or_else(|| Error::InvalidInput("composer has no weights".into()))?,
                );
            }
            kl_on_tape(tape, &fx.labels, &preds, cfg.loss.kl_reduction)
        }
    }
}

/// Value and gradient of one loss with respect to the flattened parameters.
fn evaluate(
    kind: LossKind,
    fx: &Fixture,
    model: &mut TrainedModel,
    theta: &[f64],
    cfg: &RunConfig,
) -> Result<(f64, Vec<f64>)> {
    model.unflatten(theta)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let loss = loss_on_tape(kind, fx, &mut tape, &bound, cfg)?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(theta.len());
    for g in super::model::ParamGroup::ALL {
        for v in bound.vars(g) {
            match grads.get(v) {
                Some(d) => flat.extend_from_slice(d),
                None => flat.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
    }
    Ok((tape.scalar(loss), flat))
}

/// Runs `trials` seeded trials per loss with batch size 4, two-layer
/// encoders and the adaptive composer.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let cfg = RunConfig::default();
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let mut worst = 0.0f64;
            let mut parameters = 0;
            for trial in 0..trials {
                let mut rng = stage_rng(seed, &format!("gradcheck:{}:{trial}", kind.tag()));
                let log_tau1 = rng.random_range(0.02f64.ln()..0.5f64.ln());
                let log_tau2 = rng.random_range(0.02f64.ln()..0.5f64.ln());
                let mut model =
                    TrainedModel::init(DIMS, ComposerKind::Adaptive, log_tau1, log_tau2, &mut rng);
                let fx = fixture(&mut rng);
                let theta = DenseVec::new(model.flatten())?;
                parameters = theta.len();
                let err = grad_check(|p| evaluate(kind, &fx, &mut model, p, &cfg), &theta, EPS)?;
                worst = worst.max(err);
            }
            Ok(GradientCheck {
                loss: kind,
                trials,
                max_error: worst,
                parameters,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_matches_finite_differences() {
        for check in gradient_suite(3, 11).unwrap() {
            assert!(check.max_error < 1e-4, "{check:?}");
            assert!(check.parameters > 100);
        }
    }
}
