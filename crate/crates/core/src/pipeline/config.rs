//! Run configuration as `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! duplicate keys are errors. [`RunConfig::to_text`] writes every key in a
//! fixed order, and parsing that text gives back the same configuration.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed; every stage derives its own stream |
//! | `model.hidden` | 64 | encoder hidden width |
//! | `model.joint_dim` | 32 | joint embedding width |
//! | `init.source` | pretrain | `random`, `pretrain` or `checkpoint` |
//! | `init.checkpoint` | | checkpoint path for `init.source = checkpoint` |
//! | `init.iterations` | 300 | pretraining steps on generic pairs |
//! | `init.lr` | 5e-3 | pretraining learning rate |
//! | `stage2.iterations` | 2000 | pretraining steps |
//! | `stage2.task_mix` | 1:1 | image-text : attribute batch ratio |
//! | `stage3.iterations` | 500 | triplet fine-tuning steps |
//! | `stage3.composer` | adaptive | composer for fine-tuning |
//! | `stage3.freeze_encoders` | false | train only the composer and temperature |
//! | `optim.lr_pretrained` | 5e-4 | rate for groups trained in an earlier stage |
//! | `optim.lr_scratch` | 5e-3 | rate for newly initialised groups |
//! | `optim.beta1`, `optim.beta2`, `optim.eps` | 0.9, 0.999, 1e-8 | moment parameters |
//! | `optim.decay_floor` | 0.1 | final fraction of the initial rate |
//! | `loss.batch_size` | 32 | examples per batch |
//! | `loss.log_tau1`, `loss.log_tau2` | ln 0.07 | initial log temperatures |
//! | `loss.lambda` | 0.5 | weight of the weighting-distribution loss |
//! | `loss.kl_reduction` | mean | `mean` or `sum` over the batch |
//! | `loss.fap_reduction` | sum | `mean` or `sum` over the batch |
//! | `labels.tau3` | 4 | pseudo-label sharpness |
//! | `eval.split` | original | candidate split |
//! | `eval.ks` | 1,10,50 | recall cut-offs |
//! | `synth.*` | see [`SynthConfig`] | synthetic corpus parameters |
//! | `paths.data`, `paths.model`, `paths.labels`, `paths.baselines` | | inputs |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::composers::ComposerKind;
use crate::datasets::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Reduction};
use crate::pseudo_weights::TAU3_DEFAULT;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitSource {
    Random,
    Pretrain,
    Checkpoint,
}

impl InitSource {
    pub fn tag(self) -> &'static str {
        match self {
            InitSource::Random => "random",
            InitSource::Pretrain => "pretrain",
            InitSource::Checkpoint => "checkpoint",
        }
    }
}

impl FromStr for InitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            InitSource::Random,
            InitSource::Pretrain,
            InitSource::Checkpoint,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
        .ok_or_else(|| Error::Config(format!("unknown init source `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub joint_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub source: InitSource,
    pub checkpoint: Option<PathBuf>,
    pub iterations: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub iterations: usize,
    /// Consecutive image-text batches, then consecutive attribute batches.
    pub task_mix: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Config {
    pub iterations: usize,
    pub composer: ComposerKind,
    pub freeze_encoders: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_pretrained: f64,
    pub lr_scratch: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_pretrained: 5e-4,
            lr_scratch: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_floor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: String,
    pub ks: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub baselines: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub init: InitConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub tau3: f64,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                hidden: 64,
                joint_dim: 32,
            },
            init: InitConfig {
                source: InitSource::Pretrain,
                checkpoint: None,
                iterations: 300,
                lr: 5e-3,
            },
            stage2: Stage2Config {
                iterations: 2000,
                task_mix: (1, 1),
            },
            stage3: Stage3Config {
                iterations: 500,
                composer: ComposerKind::Adaptive,
                freeze_encoders: false,
            },
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            tau3: TAU3_DEFAULT,
            eval: EvalConfig {
                split: crate::datasets::ORIGINAL_SPLIT.into(),
                ks: vec![1, 10, 50],
            },
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(Error::Config(format!("`{key}` must be finite")));
    }
    Ok(v)
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn ratio(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("`{key}` must look like a:b")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.joint_dim" => self.model.joint_dim = num(key, v)?,
            "init.source" => self.init.source = v.parse()?,
            "init.checkpoint" => self.init.checkpoint = path(v),
            "init.iterations" => self.init.iterations = num(key, v)?,
            "init.lr" => self.init.lr = real(key, v)?,
            "stage2.iterations" => self.stage2.iterations = num(key, v)?,
            "stage2.task_mix" => self.stage2.task_mix = ratio(key, v)?,
            "stage3.iterations" => self.stage3.iterations = num(key, v)?,
            "stage3.composer" => self.stage3.composer = v.parse()?,
            "stage3.freeze_encoders" => self.stage3.freeze_encoders = flag(key, v)?,
            "optim.lr_pretrained" => self.optim.lr_pretrained = real(key, v)?,
            "optim.lr_scratch" => self.optim.lr_scratch = real(key, v)?,
            "optim.beta1" => self.optim.beta1 = real(key, v)?,
            "optim.beta2" => self.optim.beta2 = real(key, v)?,
            "optim.eps" => self.optim.eps = real(key, v)?,
            "optim.decay_floor" => self.optim.decay_floor = real(key, v)?,
            "loss.batch_size" => self.loss.batch_size = num(key, v)?,
            "loss.log_tau1" => self.loss.tau1_log = real(key, v)?,
            "loss.log_tau2" => self.loss.tau2_log = real(key, v)?,
            "loss.lambda" => self.loss.lambda = real(key, v)?,
            "loss.kl_reduction" => self.loss.kl_reduction = v.parse::<Reduction>()?,
            "loss.fap_reduction" => self.loss.fap_reduction = v.parse::<Reduction>()?,
            "labels.tau3" => self.tau3 = real(key, v)?,
            "eval.split" => self.eval.split = v.to_owned(),
            "eval.ks" => self.eval.ks = list(key, v)?,
            "synth.attributes" => self.synth.attributes = num(key, v)?,
            "synth.density" => self.synth.density = real(key, v)?,
            "synth.image_noise" => self.synth.image_noise = real(key, v)?,
            "synth.text_noise" => self.synth.text_noise = real(key, v)?,
            "synth.train_items" => self.synth.train_items = num(key, v)?,
            "synth.test_items" => self.synth.test_items = num(key, v)?,
            "synth.pairs_per_item" => self.synth.pairs_per_item = num(key, v)?,
            "synth.generic_pairs" => self.synth.generic_pairs = num(key, v)?,
            "synth.train_triplets" => self.synth.train_triplets = num(key, v)?,
            "synth.test_triplets" => self.synth.test_triplets = num(key, v)?,
            "synth.flips_compose" => self.synth.flips_compose = num(key, v)?,
            "synth.flips_image" => self.synth.flips_image = num(key, v)?,
            "synth.mix" => {
                let m: Vec<f64> = list(key, v)?;
                self.synth.mix = m
                    .try_into()
                    .map_err(|_| Error::Config("`synth.mix` needs three values".into()))?;
            }
            "synth.val_keep" => self.synth.val_keep = real(key, v)?,
            "synth.seed" => self.synth.seed = num(key, v)?,
            "paths.data" => self.paths.data = path(v),
            "paths.model" => self.paths.model = path(v),
            "paths.labels" => self.paths.labels = path(v),
            "paths.baselines" => self.paths.baselines = path(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        vec![
            ("seed", self.seed.to_string()),
            ("model.hidden", self.model.hidden.to_string()),
            ("model.joint_dim", self.model.joint_dim.to_string()),
            ("init.source", self.init.source.tag().into()),
            ("init.checkpoint", show(&self.init.checkpoint)),
            ("init.iterations", self.init.iterations.to_string()),
            ("init.lr", self.init.lr.to_string()),
            ("stage2.iterations", self.stage2.iterations.to_string()),
            (
                "stage2.task_mix",
                format!("{}:{}", self.stage2.task_mix.0, self.stage2.task_mix.1),
            ),
            ("stage3.iterations", self.stage3.iterations.to_string()),
            ("stage3.composer", self.stage3.composer.tag().into()),
            (
                "stage3.freeze_encoders",
                self.stage3.freeze_encoders.to_string(),
            ),
            ("optim.lr_pretrained", self.optim.lr_pretrained.to_string()),
            ("optim.lr_scratch", self.optim.lr_scratch.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.decay_floor", self.optim.decay_floor.to_string()),
            ("loss.batch_size", self.loss.batch_size.to_string()),
            ("loss.log_tau1", self.loss.tau1_log.to_string()),
            ("loss.log_tau2", self.loss.tau2_log.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.kl_reduction", self.loss.kl_reduction.tag().into()),
            ("loss.fap_reduction", self.loss.fap_reduction.tag().into()),
            ("labels.tau3", self.tau3.to_string()),
            ("eval.split", self.eval.split.clone()),
            ("eval.ks", join(&self.eval.ks)),
            ("synth.attributes", s.attributes.to_string()),
            ("synth.density", s.density.to_string()),
            ("synth.image_noise", s.image_noise.to_string()),
            ("synth.text_noise", s.text_noise.to_string()),
            ("synth.train_items", s.train_items.to_string()),
            ("synth.test_items", s.test_items.to_string()),
            ("synth.pairs_per_item", s.pairs_per_item.to_string()),
            ("synth.generic_pairs", s.generic_pairs.to_string()),
            ("synth.train_triplets", s.train_triplets.to_string()),
            ("synth.test_triplets", s.test_triplets.to_string()),
            ("synth.flips_compose", s.flips_compose.to_string()),
            ("synth.flips_image", s.flips_image.to_string()),
            ("synth.mix", join(&s.mix)),
            ("synth.val_keep", s.val_keep.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("paths.data", show(&self.paths.data)),
            ("paths.model", show(&self.paths.model)),
            ("paths.labels", show(&self.paths.labels)),
            ("paths.baselines", show(&self.paths.baselines)),
        ]
    }

    /// Defaults overridden by the keys in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# run config v1\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text without the `paths.*` lines, as
    /// lowercase hex.
    pub fn digest(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("paths."))
            .map(|l| format!("{l}\n"))
            .collect();
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.model.hidden == 0 || self.model.joint_dim == 0 {
            return bad("model widths must be positive");
        }
        for lr in [
            self.init.lr,
            self.optim.lr_pretrained,
            self.optim.lr_scratch,
        ] {
            if lr <= 0.0 {
                return bad("learning rates must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optimizer betas must be in [0, 1)");
        }
        if self.optim.eps <= 0.0 {
            return bad("optim.eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.optim.decay_floor) {
            return bad("optim.decay_floor must be in [0, 1]");
        }
        if self.stage2.task_mix.0 + self.stage2.task_mix.1 == 0 {
            return bad("stage2.task_mix must not be 0:0");
        }
        if self.tau3 <= 0.0 {
            return bad("labels.tau3 must be positive");
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and positive");
        }
        if self.init.source == InitSource::Checkpoint && self.init.checkpoint.is_none() {
            return bad("init.source = checkpoint needs init.checkpoint");
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.synth.validate()
    }
}
