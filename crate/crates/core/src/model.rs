//! Declarative CNN construction with optional PACT activations and
//! fake-quantized weights.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::PactLayerState;
use crate::rng::{self, streams};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        out_dim: usize,
    },
    Pact,
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{pad}"),
            LayerSpec::Dense { out_dim } => write!(f, "dense:{out_dim}"),
            LayerSpec::Pact => f.write_str("pact"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::AvgPool { size } => write!(f, "avgpool:{size}"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .filter(|&v: &usize| v > 0 || (parts[0] == "conv" && i == 4))
                .ok_or_else(|| Error::Config(format!("bad layer spec `{s}`")))
        };
        let spec = match (parts[0], parts.len()) {
            ("conv", 5) => LayerSpec::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
                pad: num(4)?,
            },
            ("dense", 2) => LayerSpec::Dense { out_dim: num(1)? },
            ("pact", 1) => LayerSpec::Pact,
            ("relu", 1) => LayerSpec::Relu,
            ("avgpool", 2) => LayerSpec::AvgPool { size: num(1)? },
            ("flatten", 1) => LayerSpec::Flatten,
            _ => return Err(Error::Config(format!("unknown layer spec `{s}`"))),
        };
        Ok(spec)
    }
}

/// Whether a forward pass simulates quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// PACT layers clip to `[0, α]` without rounding; weights are used as-is.
    Float,
    /// PACT layers round to `2^k` levels; weights are fake-quantized.
    Quantized,
}

impl fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForwardMode::Float => "float",
            ForwardMode::Quantized => "quantized",
        })
    }
}

impl FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(ForwardMode::Float),
            "quantized" => Ok(ForwardMode::Quantized),
            other => Err(Error::Config(format!("unknown forward mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Fake-quantize conv/dense weights in quantized mode.
    pub quantize_weights: bool,
    pub activation_bits: u32,
    pub weight_bits: u32,
    /// Mode used when the model is evaluated after training.
    pub forward_mode: ForwardMode,
}

impl ModelConfig {
    /// conv(16) → pact → pool → conv(32) → pact → pool → flatten → dense(10)
    pub fn small_cnn_mnist() -> Self {
        ModelConfig {
            layers: vec![
                conv(16),
                LayerSpec::Pact,
                LayerSpec::AvgPool { size: 2 },
                conv(32),
                LayerSpec::Pact,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10 },
            ],
            input_shape: [1, 28, 28],
            num_classes: 10,
            quantize_weights: true,
            activation_bits: 8,
            weight_bits: 8,
            forward_mode: ForwardMode::Quantized,
        }
    }

    /// The MNIST stack widened to 32/64 channels with a third conv(64) block.
    pub fn small_cnn_cifar() -> Self {
        let block = |c| [conv(c), LayerSpec::Pact, LayerSpec::AvgPool { size: 2 }];
        let mut layers = Vec::new();
        for c in [32, 64, 64] {
            layers.extend(block(c));
        }
        layers.extend([LayerSpec::Flatten, LayerSpec::Dense { out_dim: 10 }]);
        ModelConfig {
            layers,
            input_shape: [3, 32, 32],
            num_classes: 10,
            quantize_weights: true,
            activation_bits: 4,
            weight_bits: 4,
            forward_mode: ForwardMode::Quantized,
        }
    }

    /// Same stack with PACT replaced by ReLU and no weight quantization.
    pub fn without_quantization(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| if *l == LayerSpec::Pact { LayerSpec::Relu } else { *l })
            .collect();
        ModelConfig {
            layers,
            quantize_weights: false,
            forward_mode: ForwardMode::Float,
            ..self.clone()
        }
    }

    pub fn pact_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| **l == LayerSpec::Pact).count()
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',').map(str::parse).collect()
    }

    pub fn features_per_sample(&self) -> usize {
        self.input_shape.iter().product()
    }
}

fn conv(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<f32>,
}

/// Resolved per-layer wiring: indices into `params` / `pact_states`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Resolved {
    Conv { weight: usize, bias: usize, stride: usize, pad: usize },
    Dense { weight: usize, bias: usize },
    Pact { state: usize },
    Relu,
    AvgPool { size: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub pact_states: Vec<PactLayerState>,
    plan: Vec<Resolved>,
}

/// Parameter shapes and wiring implied by a config.
struct Layout {
    params: Vec<(String, ParamKind, Vec<usize>)>,
    pact_layers: usize,
    plan: Vec<Resolved>,
}

fn layout(config: &ModelConfig) -> Result<Layout> {
    if config.input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("input shape {:?} has a zero dimension", config.input_shape)));
    }
    let mut shape: Vec<usize> = config.input_shape.to_vec();
    let mut params = Vec::new();
    let mut plan = Vec::new();
    let mut pact_layers = 0;
    let err = |i: usize, msg: String| Error::Config(format!("layer {i}: {msg}"));
    for (i, layer) in config.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if shape.len() != 3 {
                    return Err(err(i, format!("conv needs a [c,h,w] input, got {shape:?}")));
                }
                if kernel > shape[1] + 2 * pad || kernel > shape[2] + 2 * pad {
                    return Err(err(i, format!("kernel {kernel} exceeds padded input {shape:?}")));
                }
                let weight = params.len();
                params.push((format!("layers.{i}.weight"), ParamKind::Weight, vec![out_channels, shape[0], kernel, kernel]));
                params.push((format!("layers.{i}.bias"), ParamKind::Bias, vec![out_channels]));
                plan.push(Resolved::Conv { weight, bias: weight + 1, stride, pad });
                shape = vec![
                    out_channels,
                    (shape[1] + 2 * pad - kernel) / stride + 1,
                    (shape[2] + 2 * pad - kernel) / stride + 1,
                ];
            }
            LayerSpec::Dense { out_dim } => {
                if shape.len() != 1 {
                    return Err(err(i, format!("dense needs a flat input, got {shape:?}")));
                }
                let weight = params.len();
                params.push((format!("layers.{i}.weight"), ParamKind::Weight, vec![shape[0], out_dim]));
                params.push((format!("layers.{i}.bias"), ParamKind::Bias, vec![out_dim]));
                plan.push(Resolved::Dense { weight, bias: weight + 1 });
                shape = vec![out_dim];
            }
            LayerSpec::Pact => {
                plan.push(Resolved::Pact { state: pact_layers });
                pact_layers += 1;
            }
            LayerSpec::Relu => plan.push(Resolved::Relu),
            LayerSpec::AvgPool { size } => {
                if shape.len() != 3 || shape[1] < size || shape[2] < size {
                    return Err(err(i, format!("avgpool:{size} does not fit input {shape:?}")));
                }
                plan.push(Resolved::AvgPool { size });
                shape = vec![shape[0], shape[1] / size, shape[2] / size];
            }
            LayerSpec::Flatten => {
                plan.push(Resolved::Flatten);
                shape = vec![shape.iter().product()];
            }
        }
    }
    if shape != [config.num_classes] {
        return Err(Error::Config(format!(
            "network ends in shape {shape:?}, expected [{}] logits",
            config.num_classes
        )));
    }
    Ok(Layout { params, pact_layers, plan })
}

/// Tape handles for one registration of a model's parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    /// Float master leaves, parallel to `Model::params`.
    pub params: Vec<Var>,
    /// What the layers consume: fake-quantized weights in quantized mode,
    /// otherwise the leaves themselves.
    pub effective: Vec<Var>,
    /// One-element α leaves, parallel to `Model::pact_states`.
    pub alphas: Vec<Var>,
    mode: ForwardMode,
}

/// He-normal initialization (`std = sqrt(2 / fan_in)`), zero biases, α = 10.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let lay = layout(config)?;
    let mut rng = rng::stream(seed, streams::INIT, &[]);
    let mut params = Vec::with_capacity(lay.params.len());
    for (name, kind, shape) in lay.params {
        let numel: usize = shape.iter().product();
        let data = match kind {
            ParamKind::Bias => vec![0.0; numel],
            ParamKind::Weight => {
                let fan_in = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape[0],
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        params.push(Param {
            name,
            kind,
            tensor: Tensor::new(shape, data)?,
        });
    }
    let pact_states = vec![PactLayerState::new(config.activation_bits); lay.pact_layers];
    Ok(Model {
        config: config.clone(),
        params,
        pact_states,
        plan: lay.plan,
    })
}

impl Model {
    /// Reassembles a model from stored tensors, checking them against `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<(String, Tensor<f32>)>, alphas: Vec<f32>) -> Result<Model> {
        let lay = layout(&config)?;
        if params.len() != lay.params.len() || alphas.len() != lay.pact_layers {
            return Err(Error::Config(format!(
                "expected {} tensors and {} α values, got {} and {}",
                lay.params.len(),
                lay.pact_layers,
                params.len(),
                alphas.len()
            )));
        }
        let mut out = Vec::with_capacity(params.len());
        for ((name, tensor), (want_name, kind, shape)) in params.into_iter().zip(lay.params) {
            if name != want_name || tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{name}` {:?} does not match expected `{want_name}` {shape:?}",
                    tensor.shape()
                )));
            }
            out.push(Param { name, kind, tensor });
        }
        let pact_states = alphas
            .into_iter()
            .map(|a| PactLayerState::with_alpha(a, config.activation_bits))
            .collect();
        Ok(Model {
            config,
            params: out,
            pact_states,
            plan: lay.plan,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.pact_states.iter().map(|s| s.alpha).collect()
    }

    /// Registers the current parameters on `tape`.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, mode: ForwardMode) -> Result<ParamVars> {
        let params: Vec<Tensor<T>> = self.params.iter().map(|p| p.tensor.cast()).collect();
        let alphas: Vec<T> = self.pact_states.iter().map(|s| T::from_f64(s.alpha as f64)).collect();
        self.register_with(tape, &params, &alphas, mode)
    }

    /// Registers caller-supplied parameter values (same layout as `params`).
    pub fn register_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Tensor<T>],
        alphas: &[T],
        mode: ForwardMode,
    ) -> Result<ParamVars> {
        let leaves = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let alphas = alphas.iter().map(|&a| tape.leaf(Tensor::scalar(a))).collect();
        self.bind(tape, leaves, alphas, mode)
    }

    /// Wires existing leaves as this model's parameters, inserting weight
    /// fake-quantization in quantized mode.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, params: Vec<Var>, alphas: Vec<Var>, mode: ForwardMode) -> Result<ParamVars> {
        if params.len() != self.params.len() || alphas.len() != self.pact_states.len() {
            return Err(Error::contract("parameter list does not match the model layout"));
        }
        let mut effective = Vec::with_capacity(params.len());
        for (p, &leaf) in self.params.iter().zip(&params) {
            if tape.shape(leaf) != p.tensor.shape() {
                return Err(Error::shape("bind", tape.shape(leaf), p.tensor.shape()));
            }
            let quantize = mode == ForwardMode::Quantized && self.config.quantize_weights && p.kind == ParamKind::Weight;
            effective.push(if quantize {
                tape.fake_quant(leaf, self.config.weight_bits)?
            } else {
                leaf
            });
        }
        for &a in &alphas {
            if tape.value(a).len() != 1 {
                return Err(Error::contract("α variables must hold one element"));
            }
        }
        Ok(ParamVars {
            params,
            effective,
            alphas,
            mode,
        })
    }

    /// Logits for `x[batch, c, h, w]` using previously registered parameters.
    pub fn forward_on<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        self.run_plan(tape, vars, x, None)
    }

    fn run_plan<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mut pact_taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != self.config.input_shape {
            return Err(Error::shape("model input", xs, &self.config.input_shape));
        }
        let bits = match vars.mode {
            ForwardMode::Float => None,
            ForwardMode::Quantized => Some(self.config.activation_bits),
        };
        let mut h = x;
        for step in &self.plan {
            h = match *step {
                Resolved::Conv { weight, bias, stride, pad } => {
                    let y = tape.conv2d(h, vars.effective[weight], stride, pad)?;
                    tape.channel_bias(y, vars.effective[bias])?
                }
                Resolved::Dense { weight, bias } => tape.dense(h, vars.effective[weight], vars.effective[bias])?,
                Resolved::Pact { state } => {
                    let y = tape.pact(h, vars.alphas[state], bits)?;
                    if let Some(taps) = pact_taps.as_deref_mut() {
                        taps.push(y);
                    }
                    y
                }
                Resolved::Relu => tape.relu(h),
                Resolved::AvgPool { size } => tape.avg_pool2d(h, size)?,
                Resolved::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// One-shot forward pass returning logits.
    pub fn forward<T: Real>(&self, x: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, mode)?;
        let xv = tape.leaf(x.clone());
        let logits = self.forward_on(&mut tape, &vars, xv)?;
        Ok(tape.value(logits).clone())
    }

    /// Activations right after every PACT layer.
    pub fn pact_outputs(&self, x: &Tensor<f32>, mode: ForwardMode) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, mode)?;
        let xv = tape.leaf(x.clone());
        let mut taps = Vec::new();
        self.run_plan(&mut tape, &vars, xv, Some(&mut taps))?;
        Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}
