//! Adam with per-group learning rates and a linear decay schedule.

use std::collections::BTreeMap;

use super::config::OptimConfig;
use super::model::{BoundModel, ParamGroup, TrainedModel};
use crate::tensorgrad::Gradients;

/// Multiplier for step `t` of `total`: 1 at the start, falling linearly to
/// `floor` at the final step.
pub fn lr_decay(t: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    1.0 - (1.0 - floor) * t as f64 / (total - 1) as f64
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    state: BTreeMap<ParamGroup, Moments>,
}

/// What happened to one group during a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStep {
    pub group: ParamGroup,
    pub lr: f64,
    /// Largest absolute parameter change.
    pub max_update: f64,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Learning rate for `group` before decay.
    pub fn base_lr(&self, model: &TrainedModel, group: ParamGroup) -> f64 {
        if model.pretrained.contains(&group) {
            self.cfg.lr_pretrained
        } else {
            self.cfg.lr_scratch
        }
    }

    /// Updates each of `groups` that received a non-zero gradient.
    ///
    /// Groups without a gradient keep their parameters and moment estimates
    /// untouched.
    pub fn step(
        &mut self,
        model: &mut TrainedModel,
        bound: &BoundModel,
        grads: &Gradients,
        groups: &[ParamGroup],
        decay: f64,
    ) -> Vec<GroupStep> {
        let mut report = Vec::new();
        for &group in groups {
            let vars = bound.vars(group);
            let gs: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get(v)).collect();
            let live = gs
                .iter()
                .any(|g| g.is_some_and(|g| g.iter().any(|&x| x != 0.0)));
            if !live {
                continue;
            }
            let lr = self.base_lr(model, group) * decay;
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            let slots = model.slots_mut(group);
            let st = self.state.entry(group).or_default();
            if st.m.is_empty() {
                st.m = slots.iter().map(|s| vec![0.0; s.len()]).collect();
                st.v = st.m.clone();
            }
            st.steps += 1;
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            let mut max_update = 0.0f64;
            for (i, slot) in slots.into_iter().enumerate() {
                let Some(g) = gs[i] else { continue };
                let (m, v) = (&mut st.m[i], &mut st.v[i]);
                for j in 0..slot.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    slot[j] -= update;
                    max_update = max_update.max(update.abs());
                }
            }
            report.push(GroupStep {
                group,
                lr,
                max_update,
            });
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composers::ComposerKind;
    use crate::pipeline::model::ModelDims;
    use crate::tensorgrad::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TrainedModel {
        let dims = ModelDims {
            image: 3,
            text: 3,
            attributes: 2,
            hidden: 4,
            joint: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        TrainedModel::init(dims, ComposerKind::Adaptive, -1.0, -1.0, &mut rng)
    }

    /// Sum of every parameter: its gradient is all ones.
    fn ones_gradient(m: &TrainedModel, groups: &[ParamGroup]) -> (Tape, BoundModel, Gradients) {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let mut terms = Vec::new();
        for &g in groups {
            for v in bound.vars(g) {
                let n = tape.value(v).len();
                let ones = tape.leaf(&vec![1.0; n]).unwrap();
                terms.push(tape.dot(v, ones).unwrap());
            }
        }
        let total = tape.sum(&terms).unwrap();
        let grads = tape.backward(total).unwrap();
        (tape, bound, grads)
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(lr_decay(0, 10, 0.1), 1.0);
        assert!((lr_decay(9, 10, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_decay(4, 9, 0.1) - 0.55).abs() < 1e-15);
        assert_eq!(lr_decay(0, 1, 0.1), 1.0);
    }

    #[test]
    fn groups_step_at_their_rates() {
        let mut m = model();
        m.pretrained.insert(ParamGroup::ImageEncoder);
        m.pretrained.insert(ParamGroup::Tau1);
        let cfg = OptimConfig {
            lr_pretrained: 1e-6,
            lr_scratch: 1e-4,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(cfg);
        let (_, bound, grads) = ones_gradient(&m, &ParamGroup::ALL);
        let report = adam.step(&mut m, &bound, &grads, &ParamGroup::ALL, 1.0);
        assert_eq!(report.len(), ParamGroup::ALL.len());
        for r in report {
            let want = if matches!(r.group, ParamGroup::ImageEncoder | ParamGroup::Tau1) {
                1e-6
            } else {
                1e-4
            };
            assert_eq!(r.lr, want);
            // First Adam step on a constant gradient moves by lr.
            assert!((r.max_update - want).abs() < want * 1e-6, "{r:?}");
        }
    }

    #[test]
    fn zero_or_missing_gradient_leaves_parameters() {
        let mut m = model();
        let before = m.clone();
        let mut adam = Adam::new(OptimConfig::default());
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let zero = tape.scale_const(bound.log_tau1, 0.0);
        let grads = tape.backward(zero).unwrap();
        let report = adam.step(&mut m, &bound, &grads, &ParamGroup::ALL, 1.0);
        assert!(report.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn only_listed_groups_move() {
        let mut m = model();
        let before = m.clone();
        let mut adam = Adam::new(OptimConfig::default());
        let (_, bound, grads) = ones_gradient(&m, &ParamGroup::ALL);
        adam.step(&mut m, &bound, &grads, &[ParamGroup::Composer], 1.0);
        assert_eq!(m.image_encoder, before.image_encoder);
        assert_eq!(m.log_tau1, before.log_tau1);
        assert_ne!(m.composer, before.composer);
    }
}
