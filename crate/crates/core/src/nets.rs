//! The four networks of the distillation setup as multilayer perceptrons:
//! a frozen mapping network (Z → W), a frozen generator (W → image), a
//! frozen teacher (image → embedding) and the trainable student whose last
//! layer is a linear projection head onto the teacher's embedding width.
//!
//! Frozen networks only expose value-level forward passes. There is no way
//! to put a [`FrozenNet`] on a [`Tape`], so no gradient can ever be taken
//! through the teacher.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{self, Activation, Rng, Scalar, Tape, Tensor, Var};

pub type LatentZ<T> = Tensor<T>;
pub type LatentW<T> = Tensor<T>;
pub type ImageBatch<T> = Tensor<T>;
pub type Embedding<T> = Tensor<T>;

const STREAM_NETS: u64 = 0x4E45_5453;
const STREAM_STUDENT: u64 = 0x5354_5544;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    None,
    Tanh,
}

/// Layer widths (input first, output last) and per-hidden-layer activations.
///
/// A single width describes the identity map on that dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    widths: Vec<usize>,
    hidden: Vec<Activation>,
    output: OutputActivation,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, hidden: Vec<Activation>, output: OutputActivation) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("a network needs at least one width".into()));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer width {i} is zero in {widths:?}")));
        }
        let n_hidden = widths.len().saturating_sub(2);
        if hidden.len() != n_hidden {
            return Err(Error::Config(format!(
                "{} hidden layers need {} activations, got {}",
                n_hidden,
                n_hidden,
                hidden.len()
            )));
        }
        Ok(Self {
            widths,
            hidden,
            output,
        })
    }

    /// Same activation on every hidden layer.
    pub fn uniform(widths: Vec<usize>, act: Activation, output: OutputActivation) -> Result<Self> {
        let n = widths.len().saturating_sub(2);
        Self::new(widths, vec![act; n], output)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(vec![dim], vec![], OutputActivation::None)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_activation(&self, layer: usize) -> Option<Activation> {
        if layer + 1 < self.n_layers() {
            Some(self.hidden[layer])
        } else {
            match self.output {
                OutputActivation::None => None,
                OutputActivation::Tanh => Some(Activation::Tanh),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    /// `[fan_in, fan_out]`
    pub weight: Tensor<T>,
    /// `[fan_out]`
    pub bias: Tensor<T>,
}

/// Weights and biases conforming to a [`NetSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    spec: NetSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> MlpParams<T> {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(spec: &NetSpec, rng: &mut Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let scale = T::from_f64_lossy(1.0 / (w[0] as f64).sqrt());
                Layer {
                    weight: rng.sample_normal::<T>(&[w[0], w[1]]).scale(scale),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn from_layers(spec: NetSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        let p = Self { spec, layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.spec.n_layers() {
            return Err(Error::Contract(format!(
                "spec has {} layers, parameters have {}",
                self.spec.n_layers(),
                self.layers.len()
            )));
        }
        for (l, w) in self.layers.iter().zip(self.spec.widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] {
                return Err(Error::dim("weights", l.weight.shape(), &[w[0], w[1]]));
            }
            if l.bias.shape() != [w[1]] {
                return Err(Error::dim("bias", l.bias.shape(), &[w[1]]));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Contract("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, cols) = x.dims2()?;
        if cols != self.spec.input_dim() {
            return Err(Error::dim("network input", x.shape(), &[0, self.spec.input_dim()]));
        }
        Ok(())
    }

    /// Value-only forward pass over a `[batch, input_dim]` tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = numcore::add_bias(&numcore::matmul(&h, &layer.weight)?, &layer.bias)?;
            if let Some(act) = self.spec.layer_activation(i) {
                h = numcore::activation(&h, act);
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`. Returns the output and one variable
    /// per parameter tensor, in [`MlpParams::tensors`] order.
    pub fn forward_taped(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<(Var, Vec<Var>)> {
        self.check_input(x)?;
        let mut h = tape.constant(x.clone());
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            vars.push(w);
            vars.push(b);
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if let Some(act) = self.spec.layer_activation(i) {
                h = tape.activation(h, act)?;
            }
        }
        Ok((h, vars))
    }

    /// SHA-256 over spec widths and the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.spec.widths {
            h.update((*w as u64).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters that no training operation can modify.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenNet<T>(MlpParams<T>);

impl<T: Scalar> FrozenNet<T> {
    pub fn new(params: MlpParams<T>) -> Self {
        Self(params)
    }

    pub fn init(spec: &NetSpec, rng: &mut Rng) -> Self {
        Self(MlpParams::init(spec, rng))
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.0
    }

    pub fn spec(&self) -> &NetSpec {
        self.0.spec()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x)
    }

    pub fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

/// Latent and image dimensions of the generator stack plus embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_z: usize,
    pub d_w: usize,
    pub d_img: usize,
    pub d_emb: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_z: 16,
            d_w: 16,
            d_img: 64,
            d_emb: 32,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_w", self.d_w),
            ("d_img", self.d_img),
            ("d_emb", self.d_emb),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Frozen mapping network and generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStack<T> {
    mapping: FrozenNet<T>,
    generator: FrozenNet<T>,
    dims: Dims,
}

impl<T: Scalar> GeneratorStack<T> {
    pub fn new(mapping: FrozenNet<T>, generator: FrozenNet<T>, dims: Dims) -> Result<Self> {
        let (m, g) = (mapping.spec(), generator.spec());
        if m.input_dim() != dims.d_z || m.output_dim() != dims.d_w {
            return Err(Error::Config(format!(
                "mapping network is {}→{}, dims say {}→{}",
                m.input_dim(),
                m.output_dim(),
                dims.d_z,
                dims.d_w
            )));
        }
        if g.input_dim() != dims.d_w || g.output_dim() != dims.d_img {
            return Err(Error::Config(format!(
                "generator is {}→{}, dims say {}→{}",
                g.input_dim(),
                g.output_dim(),
                dims.d_w,
                dims.d_img
            )));
        }
        Ok(Self {
            mapping,
            generator,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mapping(&self) -> &FrozenNet<T> {
        &self.mapping
    }

    pub fn generator(&self) -> &FrozenNet<T> {
        &self.generator
    }

    /// `w = M(z)`
    pub fn mapping_forward(&self, z: &LatentZ<T>) -> Result<LatentW<T>> {
        self.mapping.forward(z)
    }

    /// `I = G(w)`
    pub fn generator_forward(&self, w: &LatentW<T>) -> Result<ImageBatch<T>> {
        self.generator.forward(w)
    }

    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.mapping.fingerprint(), self.generator.fingerprint())
    }
}

/// Builds the frozen mapping network and generator from `seed`.
pub fn init_frozen_stack<T: Scalar>(
    seed: u64,
    dims: Dims,
    mapping: &NetSpec,
    generator: &NetSpec,
) -> Result<GeneratorStack<T>> {
    dims.validate()?;
    let root = Rng::new(seed).derive(STREAM_NETS);
    let m = FrozenNet::init(mapping, &mut root.derive(0));
    let g = FrozenNet::init(generator, &mut root.derive(1));
    GeneratorStack::new(m, g, dims)
}

/// Frozen teacher drawn from the `seed` network stream.
pub fn init_teacher<T: Scalar>(seed: u64, spec: &NetSpec) -> FrozenNet<T> {
    FrozenNet::init(spec, &mut Rng::new(seed).derive(STREAM_NETS).derive(2))
}

/// Teacher with exactly the student's architecture, so that zero loss is attainable.
pub fn make_realizable_teacher<T: Scalar>(student_spec: &NetSpec, seed: u64) -> FrozenNet<T> {
    init_teacher(seed, student_spec)
}

/// Blackbox embedding network: callers only ever see embedding values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher<T> {
    net: FrozenNet<T>,
    l2_normalize: bool,
}

impl<T: Scalar> Teacher<T> {
    pub fn new(net: FrozenNet<T>, l2_normalize: bool) -> Self {
        Self { net, l2_normalize }
    }

    pub fn net(&self) -> &FrozenNet<T> {
        &self.net
    }

    pub fn embed(&self, images: &ImageBatch<T>) -> Result<Embedding<T>> {
        let mut e = self.net.forward(images)?;
        if self.l2_normalize {
            let (rows, cols) = e.dims2()?;
            let data = e.data_mut();
            for i in 0..rows {
                let row = &mut data[i * cols..(i + 1) * cols];
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    row.iter_mut().for_each(|v| *v = *v / norm);
                }
            }
        }
        Ok(e)
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }
}

/// `e_T = F_T(I)`
pub fn teacher_embed<T: Scalar>(teacher: &Teacher<T>, images: &ImageBatch<T>) -> Result<Embedding<T>> {
    teacher.embed(images)
}

/// Recorded student forward pass.
pub struct StudentForward<T> {
    pub tape: Tape<T>,
    pub output: Var,
    pub params: Vec<Var>,
}

impl<T: Scalar> StudentForward<T> {
    pub fn embeddings(&self) -> &Embedding<T> {
        self.tape.value(self.output)
    }
}

/// Trainable student. The last layer is the projection head onto `d_emb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Student<T> {
    params: MlpParams<T>,
}

impl<T: Scalar> Student<T> {
    pub fn new(params: MlpParams<T>) -> Self {
        Self { params }
    }

    /// Student initialised from the student stream of `seed`.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        Self::new(MlpParams::init(spec, &mut Rng::new(seed).derive(STREAM_STUDENT)))
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams<T> {
        &mut self.params
    }

    pub fn spec(&self) -> &NetSpec {
        self.params.spec()
    }

    pub fn forward(&self, images: &ImageBatch<T>) -> Result<Embedding<T>> {
        self.params.forward(images)
    }

    pub fn embed_taped(&self, images: &ImageBatch<T>) -> Result<StudentForward<T>> {
        let mut tape = Tape::new();
        let (output, params) = self.params.forward_taped(&mut tape, images)?;
        Ok(StudentForward {
            tape,
            output,
            params,
        })
    }
}

/// `F_S(I)` with its tape, ready for a backward pass.
pub fn student_embed<T: Scalar>(student: &Student<T>, images: &ImageBatch<T>) -> Result<StudentForward<T>> {
    student.embed_taped(images)
}
