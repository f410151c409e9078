use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::composers::{BoundComposer, Composer, ComposerKind};
use crate::encoders::{
    encode_image, encode_text, AttributeHead, BoundEncoder, BoundHead, Embedding, EncoderParams,
};
use crate::error::{Error, Result};
use crate::retrieval_eval::RetrievalModel;
use crate::tensorgrad::{DenseVec, Tape, Var};

/// Independently optimised parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    AttributeHead,
    Composer,
    Tau1,
    Tau2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::AttributeHead,
        ParamGroup::Composer,
        ParamGroup::Tau1,
        ParamGroup::Tau2,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::AttributeHead => "attribute_head",
            ParamGroup::Composer => "composer",
            ParamGroup::Tau1 => "tau1",
            ParamGroup::Tau2 => "tau2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.tag() == tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group `{tag}`")))
    }
}

/// Feature and label widths a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub image: usize,
    pub text: usize,
    pub attributes: usize,
    pub hidden: usize,
    pub joint: usize,
}

/// One applied stage: its tag (e.g. `stage1:pretrain`), seed and the digest
/// of the configuration it ran under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRecord {
    pub tag: String,
    pub seed: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub image_encoder: EncoderParams,
    pub text_encoder: EncoderParams,
    pub attribute_head: AttributeHead,
    pub composer: Composer,
    pub log_tau1: f64,
    pub log_tau2: f64,
    pub provenance: Vec<StageRecord>,
    /// Groups that have been trained by an earlier stage.
    pub pretrained: BTreeSet<ParamGroup>,
}

impl TrainedModel {
    pub fn init<R: Rng + ?Sized>(
        dims: ModelDims,
        composer: ComposerKind,
        log_tau1: f64,
        log_tau2: f64,
        rng: &mut R,
    ) -> Self {
        let image_encoder = EncoderParams::init_mlp(dims.image, dims.hidden, dims.joint, rng);
        let text_encoder = EncoderParams::init_mlp(dims.text, dims.hidden, dims.joint, rng);
        let attribute_head = AttributeHead::init(dims.attributes, dims.joint, rng);
        let composer = Composer::init(composer, dims.joint, rng);
        Self {
            image_encoder,
            text_encoder,
            attribute_head,
            composer,
            log_tau1,
            log_tau2,
            provenance: Vec::new(),
            pretrained: BTreeSet::new(),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.image_encoder.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.image_encoder.input_dim()
    }

    pub fn text_dim(&self) -> usize {
        self.text_encoder.input_dim()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_head.num_attributes()
    }

    /// Swaps in a freshly initialised composer unless the kind already
    /// matches. A new composer is not pretrained.
    pub fn set_composer<R: Rng + ?Sized>(&mut self, kind: ComposerKind, rng: &mut R) {
        if self.composer.kind() != kind {
            self.composer = Composer::init(kind, self.joint_dim(), rng);
            self.pretrained.remove(&ParamGroup::Composer);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            image: self.image_encoder.bind(tape)?,
            text: self.text_encoder.bind(tape)?,
            head: self.attribute_head.bind(tape)?,
            composer: self.composer.bind(tape)?,
            log_tau1: tape.leaf(&[self.log_tau1])?,
            log_tau2: tape.leaf(&[self.log_tau2])?,
        })
    }

    /// Parameter buffers of `group`, in the same order as
    /// [`BoundModel::vars`].
    pub fn slots_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::ImageEncoder => as_slices(self.image_encoder.slots_mut()),
            ParamGroup::TextEncoder => as_slices(self.text_encoder.slots_mut()),
            ParamGroup::AttributeHead => as_slices(self.attribute_head.slots_mut()),
            ParamGroup::Composer => as_slices(self.composer.slots_mut()),
            ParamGroup::Tau1 => vec![std::slice::from_mut(&mut self.log_tau1)],
            ParamGroup::Tau2 => vec![std::slice::from_mut(&mut self.log_tau2)],
        }
    }

    /// All parameters, group by group, as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut copy = self.clone();
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| {
                copy.slots_mut(g)
                    .into_iter()
                    .flat_map(|s| s.to_vec())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Inverse of [`Self::flatten`].
    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        let mut at = 0;
        for g in ParamGroup::ALL {
            for slot in self.slots_mut(g) {
                let end = at + slot.len();
                let src = theta
                    .get(at..end)
                    .ok_or_else(|| Error::shape("unflatten", end, theta.len()))?;
                slot.copy_from_slice(src);
                at = end;
            }
        }
        if at != theta.len() {
            return Err(Error::shape("unflatten", at, theta.len()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = Vec::new();
        self.image_encoder.write_tensors("image", &mut t);
        self.text_encoder.write_tensors("text", &mut t);
        self.attribute_head.write_tensors("head", &mut t);
        self.composer.write_tensors(&mut t);
        t.push(NamedTensor::new(
            "tau.log_tau1",
            vec![1],
            vec![self.log_tau1],
        ));
        t.push(NamedTensor::new(
            "tau.log_tau2",
            vec![1],
            vec![self.log_tau2],
        ));
        for (i, s) in self.provenance.iter().enumerate() {
            t.push(NamedTensor::marker(format!(
                "meta.stage.{i:03}={}|{}|{}",
                s.tag, s.seed, s.digest
            )));
        }
        for g in &self.pretrained {
            t.push(NamedTensor::marker(format!("meta.pretrained={}", g.tag())));
        }
        Checkpoint::new(t)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let image_encoder = EncoderParams::read_tensors("image", ckpt)?;
        let text_encoder = EncoderParams::read_tensors("text", ckpt)?;
        let attribute_head = AttributeHead::read_tensors("head", ckpt)?;
        let composer = Composer::read_tensors(ckpt)?;
        if text_encoder.output_dim() != image_encoder.output_dim()
            || attribute_head.joint_dim() != image_encoder.output_dim()
        {
            return Err(Error::Checkpoint("encoder and head widths disagree".into()));
        }
        let mut provenance = Vec::new();
        for (i, m) in ckpt.markers("meta.stage.").enumerate() {
            let rest = m
                .strip_prefix(&format!("{i:03}="))
                .ok_or_else(|| Error::Checkpoint(format!("stage markers out of order at `{m}`")))?;
            let parts: Vec<&str> = rest.split('|').collect();
            let [tag, seed, digest] = parts[..] else {
                return Err(Error::Checkpoint(format!("bad stage marker `{m}`")));
            };
            provenance.push(StageRecord {
                tag: tag.to_owned(),
                seed: seed
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad seed in `{m}`")))?,
                digest: digest.to_owned(),
            });
        }
        let pretrained = ckpt
            .markers("meta.pretrained=")
            .map(ParamGroup::from_tag)
            .collect::<Result<_>>()?;
        Ok(Self {
            image_encoder,
            text_encoder,
            attribute_head,
            composer,
            log_tau1: ckpt.require("tau.log_tau1")?.to_scalar()?,
            log_tau2: ckpt.require("tau.log_tau2")?.to_scalar()?,
            provenance,
            pretrained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn embed_image(&self, features: &DenseVec) -> Result<Embedding> {
        encode_image(features, &self.image_encoder)
    }

    pub fn embed_text(&self, features: &DenseVec) -> Result<Embedding> {
        encode_text(features, &self.text_encoder)
    }
}

fn as_slices(v: Vec<&mut Vec<f64>>) -> Vec<&mut [f64]> {
    v.into_iter().map(|s| s.as_mut_slice()).collect()
}

impl RetrievalModel for TrainedModel {
    fn composer_kind(&self) -> ComposerKind {
        self.composer.kind()
    }

    fn embed_candidate(&self, features: &DenseVec) -> Result<Embedding> {
        self.embed_image(features)
    }

    fn embed_query(&self, reference: &DenseVec, text: &DenseVec) -> Result<Embedding> {
        self.composer
            .compose(&self.embed_image(reference)?, &self.embed_text(text)?)
    }
}

/// A model whose parameters are leaves on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub image: BoundEncoder,
    pub text: BoundEncoder,
    pub head: BoundHead,
    pub composer: BoundComposer,
    pub log_tau1: Var,
    pub log_tau2: Var,
}

impl BoundModel {
    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::ImageEncoder => self.image.vars(),
            ParamGroup::TextEncoder => self.text.vars(),
            ParamGroup::AttributeHead => self.head.vars(),
            ParamGroup::Composer => self.composer.vars(),
            ParamGroup::Tau1 => vec![self.log_tau1],
            ParamGroup::Tau2 => vec![self.log_tau2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            image: 5,
            text: 4,
            attributes: 3,
            hidden: 6,
            joint: 4,
        }
    }

    fn model(kind: ComposerKind, seed: u64) -> TrainedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = TrainedModel::init(dims(), kind, 0.07f64.ln(), 0.05f64.ln(), &mut rng);
        m.provenance.push(StageRecord {
            tag: "stage1:random".into(),
            seed,
            digest: "ab".repeat(32),
        });
        m.pretrained.insert(ParamGroup::ImageEncoder);
        m
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(
            model(ComposerKind::Adaptive, 3),
            model(ComposerKind::Adaptive, 3)
        );
        assert_ne!(
            model(ComposerKind::Adaptive, 3),
            model(ComposerKind::Adaptive, 4)
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ComposerKind::ALL {
            let m = model(kind, 1);
            let a = dir.path().join("a.ckpt");
            let b = dir.path().join("b.ckpt");
            m.save(&a).unwrap();
            let back = TrainedModel::load(&a).unwrap();
            assert_eq!(back, m);
            back.save(&b).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }

    #[test]
    fn flatten_round_trip_and_var_alignment() {
        let m = model(ComposerKind::Adaptive, 2);
        let theta = m.flatten();
        let mut other = model(ComposerKind::Adaptive, 9);
        other.unflatten(&theta).unwrap();
        assert_eq!(other.flatten(), theta);
        assert!(other.unflatten(&theta[1..]).is_err());

        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let mut copy = m.clone();
        for g in ParamGroup::ALL {
            let vars = bound.vars(g);
            let slots = copy.slots_mut(g);
            assert_eq!(vars.len(), slots.len());
            for (v, s) in vars.iter().zip(slots) {
                assert_eq!(tape.value(*v), &s[..]);
            }
        }
    }

    #[test]
    fn set_composer_resets_pretrained_flag() {
        let mut m = model(ComposerKind::Mean, 0);
        m.pretrained.insert(ParamGroup::Composer);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.set_composer(ComposerKind::Mean, &mut rng);
        assert!(m.pretrained.contains(&ParamGroup::Composer));
        m.set_composer(ComposerKind::Adaptive, &mut rng);
        assert!(!m.pretrained.contains(&ParamGroup::Composer));
        assert_eq!(m.composer.kind(), ComposerKind::Adaptive);
    }
}
