//! Trainable feature encoders and the attribute-prediction head.
//!
//! Encoders are small perceptrons over precomputed feature vectors. Their
//! output is always L2-normalised, so every [`Embedding`] sits on the unit
//! sphere and dot products are cosine similarities. Reference and target
//! images go through the same [`EncoderParams`].

use rand::Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::tensorgrad::{normalize_raw, sigmoid, DenseMat, DenseVec, Tape, Var};

/// Tolerance on the unit norm of an [`Embedding`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                *x = x.max(0.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DenseMat,
    pub bias: DenseVec,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMat, bias: DenseVec, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("layer", weight.rows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let weight = DenseMat::new(outputs, inputs, draw(outputs * inputs))
            .expect("initialised weights are finite");
        let bias = DenseVec::new(draw(outputs)).expect("initialised bias is finite");
        Self {
            weight,
            bias,
            activation,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.weight.rows(), self.weight.cols());
        let w = self.weight.as_slice();
        let b = self.bias.as_slice();
        let mut out: Vec<f64> = (0..rows)
            .map(|i| crate::tensorgrad::dot(&w[i * cols..(i + 1) * cols], x) + b[i])
            .collect();
        self.activation.apply(&mut out);
        out
    }
}

/// Parameters of a feed-forward encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput(
                "encoder needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::shape(
                    "encoder layers",
                    pair[0].weight.rows(),
                    pair[1].weight.cols(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `input -> hidden (relu) -> output`.
    pub fn init_mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: vec![
                Layer::init(input, hidden, Activation::Relu, rng),
                Layer::init(hidden, output, Activation::Identity, rng),
            ],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Raw (unnormalised) forward pass.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(Error::shape("encoder", self.input_dim(), features.len()));
        }
        let mut h = features.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundEncoder> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(BoundLayer {
                    weight: tape.leaf(l.weight.as_slice())?,
                    bias: tape.leaf(l.bias.as_slice())?,
                    rows: l.weight.rows(),
                    cols: l.weight.cols(),
                    activation: l.activation,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundEncoder { layers })
    }

    /// Parameter buffers in binding order (weight, bias per layer).
    pub(crate) fn slots_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_vec());
            out.push(l.bias.as_mut_vec());
        }
        out
    }

    pub(crate) fn write_tensors(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (i, l) in self.layers.iter().enumerate() {
            let stem = format!("{prefix}.{i}.{}", l.activation.tag());
            out.push(NamedTensor::new(
                format!("{stem}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.as_slice().to_vec(),
            ));
            out.push(NamedTensor::new(
                format!("{stem}.bias"),
                vec![l.bias.len()],
                l.bias.as_slice().to_vec(),
            ));
        }
    }

    pub(crate) fn read_tensors(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        loop {
            let i = layers.len();
            let head = format!("{prefix}.{i}.");
            let Some(weight) = ckpt
                .tensors()
                .iter()
                .find(|t| t.name.starts_with(&head) && t.name.ends_with(".weight"))
            else {
                break;
            };
            let tag = &weight.name[head.len()..weight.name.len() - ".weight".len()];
            let activation = Activation::from_tag(tag).ok_or_else(|| {
                Error::Checkpoint(format!("unknown activation `{tag}` in {}", weight.name))
            })?;
            let bias = ckpt.require(&format!("{head}{tag}.bias"))?;
            layers.push(Layer::new(weight.to_mat()?, bias.to_vec()?, activation)?);
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("no layers for `{prefix}`")));
        }
        Self::new(layers)
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    weight: Var,
    bias: Var,
    rows: usize,
    cols: usize,
    activation: Activation,
}

/// An encoder whose parameters are leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    layers: Vec<BoundLayer>,
}

impl BoundEncoder {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = tape.affine(h, l.weight, l.bias, l.rows, l.cols)?;
            if l.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass followed by L2 normalisation.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.forward(tape, x)?;
        tape.normalize(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

/// Unit-norm vector in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(DenseVec);

impl Embedding {
    /// Normalises `v`; fails on the zero vector.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let (unit, _) = normalize_raw(v)?;
        Ok(Self(DenseVec::new(unit)?))
    }

    /// Wraps a vector that is already unit-norm.
    pub fn from_unit(v: DenseVec) -> Result<Self> {
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidInput(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn vector(&self) -> &DenseVec {
        &self.0
    }

    /// Cosine similarity; both sides are unit-norm so this is a dot product.
    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        self.0.dot(&other.0)
    }
}

fn encode(features: &DenseVec, params: &EncoderParams) -> Result<Embedding> {
    Embedding::normalize(&params.forward(features.as_slice())?)
}

/// Encodes an image feature vector. The same parameters serve reference and
/// target images.
pub fn encode_image(features: &DenseVec, params: &EncoderParams) -> Result<Embedding> {
    encode(features, params)
}

pub fn encode_text(features: &DenseVec, params: &EncoderParams) -> Result<Embedding> {
    encode(features, params)
}

/// Multi-label classifier on image embeddings: `sigmoid(W z + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeHead {
    pub weight: DenseMat,
    pub bias: DenseVec,
}

impl AttributeHead {
    pub fn new(weight: DenseMat, bias: DenseVec) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("attribute head", weight.rows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn init<R: Rng + ?Sized>(num_attributes: usize, joint_dim: usize, rng: &mut R) -> Self {
        let l = Layer::init(joint_dim, num_attributes, Activation::Identity, rng);
        Self {
            weight: l.weight,
            bias: l.bias,
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.weight.rows()
    }

    pub fn joint_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundHead> {
        Ok(BoundHead {
            weight: tape.leaf(self.weight.as_slice())?,
            bias: tape.leaf(self.bias.as_slice())?,
            rows: self.weight.rows(),
            cols: self.weight.cols(),
        })
    }

    pub(crate) fn slots_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![self.weight.as_mut_vec(), self.bias.as_mut_vec()]
    }

    pub(crate) fn write_tensors(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        out.push(NamedTensor::new(
            format!("{prefix}.weight"),
            vec![self.weight.rows(), self.weight.cols()],
            self.weight.as_slice().to_vec(),
        ));
        out.push(NamedTensor::new(
            format!("{prefix}.bias"),
            vec![self.bias.len()],
            self.bias.as_slice().to_vec(),
        ));
    }

    pub(crate) fn read_tensors(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let weight = ckpt.require(&format!("{prefix}.weight"))?.to_mat()?;
        let bias = ckpt.require(&format!("{prefix}.bias"))?.to_vec()?;
        Self::new(weight, bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    weight: Var,
    bias: Var,
    rows: usize,
    cols: usize,
}

impl BoundHead {
    /// Attribute probabilities for embedding `z`.
    pub fn predict(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = tape.affine(z, self.weight, self.bias, self.rows, self.cols)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

pub fn predict_attributes(z: &Embedding, head: &AttributeHead) -> Result<DenseVec> {
    if z.dim() != head.joint_dim() {
        return Err(Error::shape(
            "predict_attributes",
            head.joint_dim(),
            z.dim(),
        ));
    }
    let logits = crate::tensorgrad::affine(z.vector(), &head.weight, &head.bias)?;
    DenseVec::new(logits.as_slice().iter().map(|&x| sigmoid(x)).collect())
}
