//! Fully connected building blocks: He-initialized linear stacks with
//! per-layer activations and inverted dropout.

mod optim;

pub use optim::{LrSchedule, Optimizer, OptimizerKind};

use crate::rng::RandomSource;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// One affine map; weight is `[out, in]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights from `N(0, 2/fan_in)`, biases zero.
    pub fn he_init(fan_in: usize, fan_out: usize, rng: &mut RandomSource) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
        LinearLayer {
            weight: Tensor::matrix(fan_out, fan_in, data),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Shape and behavior of one MLP layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub fan_out: usize,
    pub activation: Activation,
    /// Inverted-dropout rate applied after the activation in train mode.
    pub dropout: f64,
}

impl LayerSpec {
    pub fn plain(fan_out: usize, activation: Activation) -> Self {
        LayerSpec {
            fan_out,
            activation,
            dropout: 0.0,
        }
    }
}

/// Stack of linear layers with fixed activations and dropout rates.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub input_dim: usize,
    pub layers: Vec<LinearLayer>,
    specs: Vec<LayerSpec>,
}

impl Mlp {
    pub fn new(input_dim: usize, specs: &[LayerSpec], rng: &mut RandomSource) -> Self {
        assert!(!specs.is_empty(), "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            layers.push(LinearLayer::he_init(fan_in, spec.fan_out, rng));
            fan_in = spec.fan_out;
        }
        Mlp {
            input_dim,
            layers,
            specs: specs.to_vec(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().unwrap().fan_out
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Stable `(name, tensor)` enumeration: `prefix.l{i}.weight`, `.bias`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{i}.weight"), &layer.weight));
            out.push((format!("{prefix}.l{i}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.l{i}.weight"), &mut layer.weight));
            out.push((format!("{prefix}.l{i}.bias"), &mut layer.bias));
        }
        out
    }

    /// Put the parameters on a tape once; every later forward through the
    /// returned binding reuses the same leaves, so gradients from repeated
    /// applications accumulate correctly.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let mk = |t: &Tensor| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                };
                (mk(&l.weight), mk(&l.bias))
            })
            .collect();
        BoundMlp {
            vars,
            specs: self.specs.clone(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    vars: Vec<(Var<'t>, Var<'t>)>,
    specs: Vec<LayerSpec>,
}

impl<'t> BoundMlp<'t> {
    /// Deterministic forward pass; dropout layers are identity.
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        self.run(x, None)
    }

    /// Forward pass with inverted dropout driven by `rng`.
    pub fn forward_train(&self, x: Var<'t>, rng: &mut RandomSource) -> Var<'t> {
        self.run(x, Some(rng))
    }

    fn run(&self, mut x: Var<'t>, mut rng: Option<&mut RandomSource>) -> Var<'t> {
        for ((w, b), spec) in self.vars.iter().zip(&self.specs) {
            x = spec.activation.apply(x.linear(*w, *b));
            if spec.dropout > 0.0 {
                if let Some(rng) = rng.as_deref_mut() {
                    let mask = dropout_mask(&x.shape(), spec.dropout, rng);
                    // The mask is data, not a differentiable input.
                    x = x.hadamard(tape_of(x).constant(mask));
                }
            }
        }
        x
    }

    /// Parameter leaves in `named_params` order (weight, bias per layer).
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.vars.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

fn tape_of<'t>(v: Var<'t>) -> &'t Tape {
    v.tape()
}

/// Map pixel intensities from [0, 1] onto [-1, 1]. Recognition trunks see
/// centered inputs; without this the near-white backgrounds dominate every
/// first-layer gradient and classification crawls.
pub fn center_pixels<'t>(x: Var<'t>) -> Var<'t> {
    x.mul_scalar(2.0).add_scalar(-1.0)
}

/// Inverted-dropout mask: zero with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut RandomSource) -> Tensor {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
    let keep_scale = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
        .collect();
    Tensor::new(shape, data)
}
