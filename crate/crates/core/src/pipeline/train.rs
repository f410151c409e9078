use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{InitSource, RunConfig};
use super::model::{BoundModel, ModelDims, ParamGroup, StageRecord, TrainedModel};
use super::optim::{lr_decay, Adam};
use crate::composers::ComposerKind;
use crate::datasets::{
    AttributeExample, Dataset, EmbeddingTable, PairExample, SplitSpec, TripletExample, TRAIN_SPLIT,
};
use crate::error::{Error, Result};
use crate::losses::{
    cl_on_tape, fap_on_tape, fir_on_tape, inverse_temperature, kl_on_tape, total_on_tape,
};
use crate::pseudo_weights::{generate_pseudo_labels, LabelTable, PseudoWeight};
use crate::retrieval_eval::{CandidateIndex, MetricsReport, RetrievalModel};
use crate::tensorgrad::{Tape, Var};

/// Deterministic generator for one stage: the seed and the stage tag are
/// hashed together so stages never share a stream.
pub fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Fir,
    Fap,
    Cl,
    ClKl,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Fir => "fir",
            Task::Fap => "fap",
            Task::Cl => "cl",
            Task::ClKl => "cl+kl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub task: Task,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn losses(&self, task: Task) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.task == task)
            .map(|s| s.loss)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.9}",
                s.stage,
                s.step,
                s.task.tag(),
                s.loss
            );
        }
        out
    }
}

/// Cycles through a shuffled index order, reshuffling each epoch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Runs `iterations` optimizer steps and returns the groups that moved.
#[allow(clippy::too_many_arguments)]
fn optimize<F>(
    stage: &str,
    model: &mut TrainedModel,
    adam: &mut Adam,
    iterations: usize,
    decay_floor: f64,
    groups: &[ParamGroup],
    log: &mut TrainLog,
    mut batch: F,
) -> Result<BTreeSet<ParamGroup>>
where
    F: FnMut(usize, &mut Tape, &BoundModel) -> Result<(Var, Task)>,
{
    let mut moved = BTreeSet::new();
    for t in 0..iterations {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let (loss, task) = batch(t, &mut tape, &bound)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{stage} loss at step {t}")));
        }
        let grads = tape.backward(loss)?;
        let decay = lr_decay(t, iterations, decay_floor);
        for s in adam.step(model, &bound, &grads, groups, decay) {
            moved.insert(s.group);
        }
        log.steps.push(StepLog {
            stage: stage.to_owned(),
            step: t,
            task,
            loss: value,
        });
    }
    Ok(moved)
}

pub(crate) fn fir_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    pairs: &[&PairExample],
) -> Result<Var> {
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let x = tape.leaf(p.image_features.as_slice())?;
        images.push(bound.image.encode(tape, x)?);
        let y = tape.leaf(p.text_features.as_slice())?;
        texts.push(bound.text.encode(tape, y)?);
    }
    let inv = inverse_temperature(tape, bound.log_tau1)?;
    fir_on_tape(tape, &images, &texts, inv)
}

pub(crate) fn fap_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    examples: &[&AttributeExample],
    vocab: usize,
    cfg: &RunConfig,
) -> Result<Var> {
    let mut probs = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for a in examples {
        let x = tape.leaf(a.image_features.as_slice())?;
        let z = bound.image.encode(tape, x)?;
        probs.push(bound.head.predict(tape, z)?);
        labels.push(a.label_vector(vocab));
    }
    fap_on_tape(tape, &probs, &labels, cfg.loss.fap_reduction)
}

/// A triplet with its target's features resolved.
pub(crate) struct Resolved<'a> {
    pub triplet: &'a TripletExample,
    pub target: &'a [f64],
    pub label: Option<PseudoWeight>,
}

/// Contrastive loss over composed queries, plus `lambda * KL` when the
/// composer predicts weights and labels are supplied.
pub(crate) fn triplet_batch(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &[&Resolved],
    lambda: f64,
    cfg: &RunConfig,
) -> Result<(Var, Task)> {
    let mut queries = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut weights = Vec::new();
    for r in batch {
        let x = tape.leaf(r.triplet.reference_features.as_slice())?;
        let zr = bound.image.encode(tape, x)?;
        let y = tape.leaf(r.triplet.text_features.as_slice())?;
        let zt = bound.text.encode(tape, y)?;
        let c = bound.composer.compose(tape, zr, zt)?;
        queries.push(c.query);
        weights.extend(c.weights);
        let t = tape.leaf(r.target)?;
        targets.push(bound.image.encode(tape, t)?);
    }
    let inv = inverse_temperature(tape, bound.log_tau2)?;
    let cl = cl_on_tape(tape, &queries, &targets, inv)?;
    if lambda == 0.0 || weights.len() != batch.len() {
        return Ok((cl, Task::Cl));
    }
    let labels = batch
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::Validation(format!("no label for `{}`", r.triplet.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let kl = kl_on_tape(tape, &labels, &weights, cfg.loss.kl_reduction)?;
    Ok((total_on_tape(tape, cl, kl, lambda)?, Task::ClKl))
}

fn record(model: &mut TrainedModel, tag: String, cfg: &RunConfig) {
    model.provenance.push(StageRecord {
        tag,
        seed: cfg.seed,
        digest: cfg.digest(),
    });
}

pub fn model_dims(data: &Dataset, cfg: &RunConfig) -> ModelDims {
    ModelDims {
        image: data.tables.images.dim(),
        text: data.tables.texts.dim(),
        attributes: data.attributes.vocab,
        hidden: cfg.model.hidden,
        joint: cfg.model.joint_dim,
    }
}

fn check_dims(model: &TrainedModel, data: &Dataset) -> Result<()> {
    let checks = [
        (
            "image features",
            model.image_dim(),
            data.tables.images.dim(),
        ),
        ("text features", model.text_dim(), data.tables.texts.dim()),
        (
            "attribute vocabulary",
            model.num_attributes(),
            data.attributes.vocab,
        ),
    ];
    for (what, want, got) in checks {
        if want != got {
            return Err(Error::Validation(format!(
                "{what}: model expects {want}, corpus has {got}"
            )));
        }
    }
    Ok(())
}

/// Builds the starting model. The composer is mean pooling until stage 3
/// selects another.
pub fn init_stage1(cfg: &RunConfig, data: &Dataset) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, "stage1");
    let mut log = TrainLog::default();
    let mut model = match cfg.init.source {
        InitSource::Checkpoint => {
            let path = cfg.init.checkpoint.as_ref().expect("validated");
            if !path.exists() {
                return Err(Error::Config(format!(
                    "checkpoint {} not found",
                    path.display()
                )));
            }
            let mut m = TrainedModel::load(path)?;
            check_dims(&m, data)?;
            m.pretrained.insert(ParamGroup::ImageEncoder);
            m.pretrained.insert(ParamGroup::TextEncoder);
            m
        }
        InitSource::Random | InitSource::Pretrain => TrainedModel::init(
            model_dims(data, cfg),
            ComposerKind::Mean,
            cfg.loss.tau1_log,
            cfg.loss.tau2_log,
            &mut rng,
        ),
    };
    if cfg.init.source == InitSource::Pretrain {
        if data.generic_pairs.is_empty() {
            return Err(Error::Validation("pretraining needs generic pairs".into()));
        }
        let groups = [
            ParamGroup::ImageEncoder,
            ParamGroup::TextEncoder,
            ParamGroup::Tau1,
        ];
        let mut opt_cfg = cfg.optim.clone();
        opt_cfg.lr_pretrained = cfg.init.lr;
        opt_cfg.lr_scratch = cfg.init.lr;
        let mut adam = Adam::new(opt_cfg);
        let mut batcher = Batcher::new(data.generic_pairs.len());
        let moved = optimize(
            "stage1",
            &mut model,
            &mut adam,
            cfg.init.iterations,
            cfg.optim.decay_floor,
            &groups,
            &mut log,
            |_, tape, bound| {
                let idx = batcher.next(cfg.loss.batch_size, &mut rng);
                let batch: Vec<&PairExample> =
                    idx.iter().map(|&i| &data.generic_pairs[i]).collect();
                Ok((fir_batch(tape, bound, &batch)?, Task::Fir))
            },
        )?;
        model.pretrained.extend(moved);
    }
    record(&mut model, format!("stage1:{}", cfg.init.source.tag()), cfg);
    Ok((model, log))
}

/// Alternates image-text and attribute batches per `stage2.task_mix`.
pub fn run_stage2(
    mut model: TrainedModel,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    check_dims(&model, data)?;
    let (n_fir, n_fap) = cfg.stage2.task_mix;
    if n_fir > 0 && data.pairs.is_empty() {
        return Err(Error::Validation("stage 2 needs image-text pairs".into()));
    }
    if n_fap > 0 && data.attributes.examples.is_empty() {
        return Err(Error::Validation("stage 2 needs attribute examples".into()));
    }
    let mut rng = stage_rng(cfg.seed, "stage2");
    let mut log = TrainLog::default();
    let mut adam = Adam::new(cfg.optim.clone());
    let mut pairs = Batcher::new(data.pairs.len());
    let mut attrs = Batcher::new(data.attributes.examples.len());
    let groups = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::AttributeHead,
        ParamGroup::Tau1,
    ];
    let cycle = n_fir + n_fap;
    let moved = optimize(
        "stage2",
        &mut model,
        &mut adam,
        cfg.stage2.iterations,
        cfg.optim.decay_floor,
        &groups,
        &mut log,
        |t, tape, bound| {
            if t % cycle < n_fir {
                let idx = pairs.next(cfg.loss.batch_size, &mut rng);
                let batch: Vec<&PairExample> = idx.iter().map(|&i| &data.pairs[i]).collect();
                Ok((fir_batch(tape, bound, &batch)?, Task::Fir))
            } else {
                let idx = attrs.next(cfg.loss.batch_size, &mut rng);
                let batch: Vec<&AttributeExample> =
                    idx.iter().map(|&i| &data.attributes.examples[i]).collect();
                let vocab = data.attributes.vocab;
                Ok((fap_batch(tape, bound, &batch, vocab, cfg)?, Task::Fap))
            }
        },
    )?;
    model.pretrained.extend(moved);
    record(&mut model, "stage2".into(), cfg);
    Ok((model, log))
}

/// Fine-tunes on triplets with the composer named in `stage3.composer`.
pub fn run_stage3(
    mut model: TrainedModel,
    triplets: &[TripletExample],
    images: &EmbeddingTable,
    labels: Option<&LabelTable>,
    cfg: &RunConfig,
) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    let kind = cfg.stage3.composer;
    let lambda = if kind == ComposerKind::Adaptive {
        cfg.loss.lambda
    } else {
        0.0
    };
    if triplets.is_empty() {
        return Err(Error::Validation("stage 3 needs triplets".into()));
    }
    if lambda > 0.0 && labels.is_none() {
        return Err(Error::Validation(
            "adaptive composer with lambda > 0 needs a pseudo-label table".into(),
        ));
    }
    if images.dim() != model.image_dim() {
        return Err(Error::shape(
            "stage 3 image features",
            model.image_dim(),
            images.dim(),
        ));
    }
    let resolved = triplets
        .iter()
        .map(|t| {
            if t.reference_features.len() != model.image_dim()
                || t.text_features.len() != model.text_dim()
            {
                return Err(Error::Validation(format!(
                    "triplet `{}` has wrong feature widths",
                    t.id
                )));
            }
            let label = match labels {
                Some(table) if lambda > 0.0 => Some(*table.get(&t.id).ok_or_else(|| {
                    Error::Validation(format!("no pseudo label for triplet `{}`", t.id))
                })?),
                _ => None,
            };
            Ok(Resolved {
                triplet: t,
                target: images.require(&t.target_id)?.as_slice(),
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stage_rng(cfg.seed, "stage3");
    model.set_composer(kind, &mut rng);
    let mut groups = vec![ParamGroup::Composer, ParamGroup::Tau2];
    if !cfg.stage3.freeze_encoders {
        groups.extend([ParamGroup::ImageEncoder, ParamGroup::TextEncoder]);
    }
    let mut log = TrainLog::default();
    let mut adam = Adam::new(cfg.optim.clone());
    let mut batcher = Batcher::new(resolved.len());
    let moved = optimize(
        "stage3",
        &mut model,
        &mut adam,
        cfg.stage3.iterations,
        cfg.optim.decay_floor,
        &groups,
        &mut log,
        |_, tape, bound| {
            let idx = batcher.next(cfg.loss.batch_size, &mut rng);
            let batch: Vec<&Resolved> = idx.iter().map(|&i| &resolved[i]).collect();
            triplet_batch(tape, bound, &batch, lambda, cfg)
        },
    )?;
    model.pretrained.extend(moved);
    record(&mut model, format!("stage3:{}", kind.tag()), cfg);
    Ok((model, log))
}

/// The three single-signal baselines used to derive pseudo labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    pub image: TrainedModel,
    pub text: TrainedModel,
    pub fusion: TrainedModel,
}

pub const BASELINE_KINDS: [ComposerKind; 3] = [
    ComposerKind::ImageOnly,
    ComposerKind::TextOnly,
    ComposerKind::Mean,
];

/// Three stage-3 runs from `start` that differ only in the composer.
pub fn train_baselines(
    start: &TrainedModel,
    triplets: &[TripletExample],
    images: &EmbeddingTable,
    cfg: &RunConfig,
) -> Result<Baselines> {
    let mut runs = BASELINE_KINDS
        .par_iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.stage3.composer = kind;
            run_stage3(start.clone(), triplets, images, None, &c).map(|(m, _)| m)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(Baselines {
        image: runs.next().expect("three runs"),
        text: runs.next().expect("three runs"),
        fusion: runs.next().expect("three runs"),
    })
}

/// Pseudo labels for the training triplets, ranked against the training
/// split.
pub fn label_training_triplets(
    baselines: &Baselines,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<LabelTable> {
    let candidates = data.candidates(TRAIN_SPLIT)?;
    generate_pseudo_labels(
        &data.train_triplets,
        &baselines.image,
        &baselines.text,
        &baselines.fusion,
        &candidates,
        cfg.tau3,
    )
}

/// 1-based target ranks, in triplet order.
pub fn ranks<M: RetrievalModel>(
    model: &M,
    triplets: &[TripletExample],
    index: &CandidateIndex,
) -> Result<Vec<usize>> {
    triplets
        .par_iter()
        .map(|t| {
            let q = model.embed_query(&t.reference_features, &t.text_features)?;
            index.rank_of(&q, &t.target_id)
        })
        .collect()
}

/// Recall@K for each of `ks` and their mean over `split`.
pub fn evaluate<M: RetrievalModel>(
    model: &M,
    triplets: &[TripletExample],
    images: &EmbeddingTable,
    split: &SplitSpec,
    ks: &[usize],
) -> Result<MetricsReport> {
    let index = CandidateIndex::encode_subset(model, images, &split.ids)?;
    if let Some(t) = triplets.iter().find(|t| !index.contains(&t.target_id)) {
        return Err(Error::Validation(format!(
            "target `{}` of `{}` is not in split `{}`",
            t.target_id, t.id, split.name
        )));
    }
    let r = ranks(model, triplets, &index)?;
    MetricsReport::from_ranks(&split.name, &r, ks)
}
