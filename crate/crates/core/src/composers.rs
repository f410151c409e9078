//! Query composing functions: fuse a reference-image embedding and a text
//! embedding into one query embedding.

use rand::Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::encoders::{Activation, Embedding, EncoderParams, Layer};
use crate::error::{Error, Result};
use crate::pseudo_weights::PseudoWeight;
use crate::tensorgrad::{sigmoid, softmax, DenseMat, DenseVec, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComposerKind {
    ImageOnly,
    TextOnly,
    Mean,
    ConcatMlp,
    ResidualGating,
    Adaptive,
}

impl ComposerKind {
    pub const ALL: [ComposerKind; 6] = [
        ComposerKind::ImageOnly,
        ComposerKind::TextOnly,
        ComposerKind::Mean,
        ComposerKind::ConcatMlp,
        ComposerKind::ResidualGating,
        ComposerKind::Adaptive,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ComposerKind::ImageOnly => "image_only",
            ComposerKind::TextOnly => "text_only",
            ComposerKind::Mean => "mean",
            ComposerKind::ConcatMlp => "concat_mlp",
            ComposerKind::ResidualGating => "residual_gating",
            ComposerKind::Adaptive => "adaptive",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(
            self,
            ComposerKind::ConcatMlp | ComposerKind::ResidualGating | ComposerKind::Adaptive
        )
    }
}

impl std::fmt::Display for ComposerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for ComposerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown composer `{s}`")))
    }
}

/// Sigmoid gate and residual branch, both `2d -> d` affine maps over the
/// concatenated inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    pub gate_weight: DenseMat,
    pub gate_bias: DenseVec,
    pub residual_weight: DenseMat,
    pub residual_bias: DenseVec,
}

impl GatingParams {
    pub fn init<R: Rng + ?Sized>(joint_dim: usize, rng: &mut R) -> Self {
        let g = Layer::init(2 * joint_dim, joint_dim, Activation::Identity, rng);
        let r = Layer::init(2 * joint_dim, joint_dim, Activation::Identity, rng);
        Self {
            gate_weight: g.weight,
            gate_bias: g.bias,
            residual_weight: r.weight,
            residual_bias: r.bias,
        }
    }

    fn check(&self, joint_dim: usize) -> Result<()> {
        for (w, b) in [
            (&self.gate_weight, &self.gate_bias),
            (&self.residual_weight, &self.residual_bias),
        ] {
            if w.rows() != joint_dim || w.cols() != 2 * joint_dim || b.len() != joint_dim {
                return Err(Error::shape(
                    "residual gating",
                    format!("{joint_dim}x{}", 2 * joint_dim),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
        }
        Ok(())
    }
}

/// One affine layer `2d -> 2` whose softmax gives the image/text weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveComposerParams {
    pub weight: DenseMat,
    pub bias: DenseVec,
}

impl AdaptiveComposerParams {
    pub fn new(weight: DenseMat, bias: DenseVec) -> Result<Self> {
        if weight.rows() != 2 || bias.len() != 2 || !weight.cols().is_multiple_of(2) {
            return Err(Error::shape(
                "adaptive composer",
                "2 x 2d weights and 2 biases",
                format!("{}x{} and {}", weight.rows(), weight.cols(), bias.len()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(joint_dim: usize) -> Self {
        Self {
            weight: DenseMat::zeros(2, 2 * joint_dim),
            bias: DenseVec::zeros(2),
        }
    }

    pub fn init<R: Rng + ?Sized>(joint_dim: usize, rng: &mut R) -> Self {
        let l = Layer::init(2 * joint_dim, 2, Activation::Identity, rng);
        Self {
            weight: l.weight,
            bias: l.bias,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.weight.cols() / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Composer {
    ImageOnly,
    TextOnly,
    Mean,
    ConcatMlp(EncoderParams),
    ResidualGating(GatingParams),
    Adaptive(AdaptiveComposerParams),
}

fn concat(a: &Embedding, b: &Embedding) -> Result<DenseVec> {
    if a.dim() != b.dim() {
        return Err(Error::shape("compose", a.dim(), b.dim()));
    }
    let mut c = a.as_slice().to_vec();
    c.extend_from_slice(b.as_slice());
    DenseVec::new(c)
}

/// `normalize((z_ir + z_t) / 2)`.
pub fn compose_mean(z_ir: &Embedding, z_t: &Embedding) -> Result<Embedding> {
    if z_ir.dim() != z_t.dim() {
        return Err(Error::shape("compose_mean", z_ir.dim(), z_t.dim()));
    }
    let sum: Vec<f64> = z_ir
        .as_slice()
        .iter()
        .zip(z_t.as_slice())
        .map(|(a, b)| (a + b) * 0.5)
        .collect();
    Embedding::normalize(&sum)
}

/// `normalize(mlp([z_ir; z_t]))`.
pub fn compose_concat_mlp(
    z_ir: &Embedding,
    z_t: &Embedding,
    params: &EncoderParams,
) -> Result<Embedding> {
    if params.output_dim() != z_ir.dim() {
        return Err(Error::shape(
            "compose_concat_mlp",
            z_ir.dim(),
            params.output_dim(),
        ));
    }
    let c = concat(z_ir, z_t)?;
    Embedding::normalize(&params.forward(c.as_slice())?)
}

/// `normalize(sigmoid(gate(c)) * z_ir + residual(c))` with `c = [z_ir; z_t]`.
pub fn compose_residual_gating(
    z_ir: &Embedding,
    z_t: &Embedding,
    params: &GatingParams,
) -> Result<Embedding> {
    params.check(z_ir.dim())?;
    let c = concat(z_ir, z_t)?;
    let gate = crate::tensorgrad::affine(&c, &params.gate_weight, &params.gate_bias)?;
    let res = crate::tensorgrad::affine(&c, &params.residual_weight, &params.residual_bias)?;
    let out: Vec<f64> = gate
        .as_slice()
        .iter()
        .zip(z_ir.as_slice())
        .zip(res.as_slice())
        .map(|((g, z), r)| sigmoid(*g) * z + r)
        .collect();
    Embedding::normalize(&out)
}

/// Predicted weights `softmax(W [z_ir; z_t] + b)` and the query
/// `normalize(w_image * z_ir + w_text * z_t)`.
pub fn compose_adaptive(
    z_ir: &Embedding,
    z_t: &Embedding,
    params: &AdaptiveComposerParams,
) -> Result<(Embedding, PseudoWeight)> {
    if params.joint_dim() != z_ir.dim() {
        return Err(Error::shape(
            "compose_adaptive",
            params.joint_dim(),
            z_ir.dim(),
        ));
    }
    let c = concat(z_ir, z_t)?;
    let logits = crate::tensorgrad::affine(&c, &params.weight, &params.bias)?;
    let w = softmax(&logits, 1.0)?;
    let (wi, wt) = (w[0], w[1]);
    let out: Vec<f64> = z_ir
        .as_slice()
        .iter()
        .zip(z_t.as_slice())
        .map(|(a, b)| wi * a + wt * b)
        .collect();
    Ok((Embedding::normalize(&out)?, PseudoWeight::new(wi, wt)?))
}

impl Composer {
    pub fn init<R: Rng + ?Sized>(kind: ComposerKind, joint_dim: usize, rng: &mut R) -> Self {
        match kind {
            ComposerKind::ImageOnly => Composer::ImageOnly,
            ComposerKind::TextOnly => Composer::TextOnly,
            ComposerKind::Mean => Composer::Mean,
            ComposerKind::ConcatMlp => Composer::ConcatMlp(EncoderParams::init_mlp(
                2 * joint_dim,
                2 * joint_dim,
                joint_dim,
                rng,
            )),
            ComposerKind::ResidualGating => {
                Composer::ResidualGating(GatingParams::init(joint_dim, rng))
            }
            ComposerKind::Adaptive => {
                Composer::Adaptive(AdaptiveComposerParams::init(joint_dim, rng))
            }
        }
    }

    pub fn kind(&self) -> ComposerKind {
        match self {
            Composer::ImageOnly => ComposerKind::ImageOnly,
            Composer::TextOnly => ComposerKind::TextOnly,
            Composer::Mean => ComposerKind::Mean,
            Composer::ConcatMlp(_) => ComposerKind::ConcatMlp,
            Composer::ResidualGating(_) => ComposerKind::ResidualGating,
            Composer::Adaptive(_) => ComposerKind::Adaptive,
        }
    }

    pub fn compose(&self, z_ir: &Embedding, z_t: &Embedding) -> Result<Embedding> {
        if z_ir.dim() != z_t.dim() {
            return Err(Error::shape("compose", z_ir.dim(), z_t.dim()));
        }
        match self {
            Composer::ImageOnly => Ok(z_ir.clone()),
            Composer::TextOnly => Ok(z_t.clone()),
            Composer::Mean => compose_mean(z_ir, z_t),
            Composer::ConcatMlp(p) => compose_concat_mlp(z_ir, z_t, p),
            Composer::ResidualGating(p) => compose_residual_gating(z_ir, z_t, p),
            Composer::Adaptive(p) => compose_adaptive(z_ir, z_t, p).map(|(z, _)| z),
        }
    }

    /// Predicted image/text weights; only the adaptive composer has them.
    pub fn predicted_weights(
        &self,
        z_ir: &Embedding,
        z_t: &Embedding,
    ) -> Result<Option<PseudoWeight>> {
        match self {
            Composer::Adaptive(p) => compose_adaptive(z_ir, z_t, p).map(|(_, w)| Some(w)),
            _ => Ok(None),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundComposer> {
        Ok(match self {
            Composer::ImageOnly => BoundComposer::ImageOnly,
            Composer::TextOnly => BoundComposer::TextOnly,
            Composer::Mean => BoundComposer::Mean,
            Composer::ConcatMlp(p) => BoundComposer::ConcatMlp(p.bind(tape)?),
            Composer::ResidualGating(p) => BoundComposer::ResidualGating {
                gate_weight: tape.leaf(p.gate_weight.as_slice())?,
                gate_bias: tape.leaf(p.gate_bias.as_slice())?,
                residual_weight: tape.leaf(p.residual_weight.as_slice())?,
                residual_bias: tape.leaf(p.residual_bias.as_slice())?,
                joint_dim: p.gate_bias.len(),
            },
            Composer::Adaptive(p) => BoundComposer::Adaptive {
                weight: tape.leaf(p.weight.as_slice())?,
                bias: tape.leaf(p.bias.as_slice())?,
                joint_dim: p.joint_dim(),
            },
        })
    }

    pub(crate) fn slots_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Composer::ImageOnly | Composer::TextOnly | Composer::Mean => Vec::new(),
            Composer::ConcatMlp(p) => p.slots_mut(),
            Composer::ResidualGating(p) => vec![
                p.gate_weight.as_mut_vec(),
                p.gate_bias.as_mut_vec(),
                p.residual_weight.as_mut_vec(),
                p.residual_bias.as_mut_vec(),
            ],
            Composer::Adaptive(p) => vec![p.weight.as_mut_vec(), p.bias.as_mut_vec()],
        }
    }

    pub(crate) fn write_tensors(&self, out: &mut Vec<NamedTensor>) {
        out.push(NamedTensor::marker(format!(
            "composer.kind={}",
            self.kind()
        )));
        let mat = |name: &str, m: &DenseMat| {
            NamedTensor::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
        };
        let vec =
            |name: &str, v: &DenseVec| NamedTensor::new(name, vec![v.len()], v.as_slice().to_vec());
        match self {
            Composer::ImageOnly | Composer::TextOnly | Composer::Mean => {}
            Composer::ConcatMlp(p) => p.write_tensors("composer.mlp", out),
            Composer::ResidualGating(p) => {
                out.push(mat("composer.gate.weight", &p.gate_weight));
                out.push(vec("composer.gate.bias", &p.gate_bias));
                out.push(mat("composer.residual.weight", &p.residual_weight));
                out.push(vec("composer.residual.bias", &p.residual_bias));
            }
            Composer::Adaptive(p) => {
                out.push(mat("composer.adaptive.weight", &p.weight));
                out.push(vec("composer.adaptive.bias", &p.bias));
            }
        }
    }

    pub(crate) fn read_tensors(ckpt: &Checkpoint) -> Result<Self> {
        let kinds: Vec<&str> = ckpt.markers("composer.kind=").collect();
        let [kind] = kinds[..] else {
            return Err(Error::Checkpoint(format!(
                "expected one composer kind marker, found {}",
                kinds.len()
            )));
        };
        let kind: ComposerKind = kind.parse()?;
        Ok(match kind {
            ComposerKind::ImageOnly => Composer::ImageOnly,
            ComposerKind::TextOnly => Composer::TextOnly,
            ComposerKind::Mean => Composer::Mean,
            ComposerKind::ConcatMlp => {
                Composer::ConcatMlp(EncoderParams::read_tensors("composer.mlp", ckpt)?)
            }
            ComposerKind::ResidualGating => Composer::ResidualGating(GatingParams {
                gate_weight: ckpt.require("composer.gate.weight")?.to_mat()?,
                gate_bias: ckpt.require("composer.gate.bias")?.to_vec()?,
                residual_weight: ckpt.require("composer.residual.weight")?.to_mat()?,
                residual_bias: ckpt.require("composer.residual.bias")?.to_vec()?,
            }),
            ComposerKind::Adaptive => Composer::Adaptive(AdaptiveComposerParams::new(
                ckpt.require("composer.adaptive.weight")?.to_mat()?,
                ckpt.require("composer.adaptive.bias")?.to_vec()?,
            )?),
        })
    }
}

/// A composer whose parameters are leaves on a tape.
#[derive(Clone, Debug)]
pub enum BoundComposer {
    ImageOnly,
    TextOnly,
    Mean,
    ConcatMlp(crate::encoders::BoundEncoder),
    ResidualGating {
        gate_weight: Var,
        gate_bias: Var,
        residual_weight: Var,
        residual_bias: Var,
        joint_dim: usize,
    },
    Adaptive {
        weight: Var,
        bias: Var,
        joint_dim: usize,
    },
}

/// Output of composing on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Composed {
    pub query: Var,
    /// Predicted `[w_image, w_text]`, adaptive composer only.
    pub weights: Option<Var>,
}

impl BoundComposer {
    pub fn compose(&self, tape: &mut Tape, z_ir: Var, z_t: Var) -> Result<Composed> {
        let plain = |query| Composed {
            query,
            weights: None,
        };
        match self {
            BoundComposer::ImageOnly => Ok(plain(z_ir)),
            BoundComposer::TextOnly => Ok(plain(z_t)),
            BoundComposer::Mean => {
                let s = tape.add(z_ir, z_t)?;
                let half = tape.scale_const(s, 0.5);
                Ok(plain(tape.normalize(half)?))
            }
            BoundComposer::ConcatMlp(mlp) => {
                let c = tape.concat(z_ir, z_t);
                Ok(plain(mlp.encode(tape, c)?))
            }
            BoundComposer::ResidualGating {
                gate_weight,
                gate_bias,
                residual_weight,
                residual_bias,
                joint_dim,
            } => {
                let (d, c) = (*joint_dim, tape.concat(z_ir, z_t));
                let g = tape.affine(c, *gate_weight, *gate_bias, d, 2 * d)?;
                let g = tape.sigmoid(g);
                let gated = tape.mul(g, z_ir)?;
                let r = tape.affine(c, *residual_weight, *residual_bias, d, 2 * d)?;
                let sum = tape.add(gated, r)?;
                Ok(plain(tape.normalize(sum)?))
            }
            BoundComposer::Adaptive {
                weight,
                bias,
                joint_dim,
            } => {
                let c = tape.concat(z_ir, z_t);
                let logits = tape.affine(c, *weight, *bias, 2, 2 * joint_dim)?;
                let w = tape.softmax(logits, 1.0)?;
                let wi = tape.pick(w, 0)?;
                let wt = tape.pick(w, 1)?;
                let a = tape.scale(z_ir, wi)?;
                let b = tape.scale(z_t, wt)?;
                let sum = tape.add(a, b)?;
                Ok(Composed {
                    query: tape.normalize(sum)?,
                    weights: Some(w),
                })
            }
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundComposer::ImageOnly | BoundComposer::TextOnly | BoundComposer::Mean => Vec::new(),
            BoundComposer::ConcatMlp(mlp) => mlp.vars(),
            BoundComposer::ResidualGating {
                gate_weight,
                gate_bias,
                residual_weight,
                residual_bias,
                ..
            } => vec![*gate_weight, *gate_bias, *residual_weight, *residual_bias],
            BoundComposer::Adaptive { weight, bias, .. } => vec![*weight, *bias],
        }
    }
}
