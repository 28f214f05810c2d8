use std::collections::BTreeMap;

use autodiff::nn;
use autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledBatch, Targets};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Serializable architecture identifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// A single dense layer on flat inputs.
    Linear {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    /// conv3x3 -> BN -> ReLU -> conv3x3/2 -> BN -> ReLU -> dense, on HWC images.
    ToyCnn {
        height: usize,
        width: usize,
        channels: usize,
        conv1: usize,
        conv2: usize,
        classes: usize,
    },
    /// Like `ToyCnn` with an extra average pool before the dense layer.
    PooledCnn {
        height: usize,
        width: usize,
        channels: usize,
        conv1: usize,
        conv2: usize,
        classes: usize,
    },
}

impl Architecture {
    /// The desk-scale classifier used throughout the examples and tests.
    pub fn toy_cnn(height: usize, width: usize, classes: usize) -> Self {
        Architecture::ToyCnn {
            height,
            width,
            channels: 3,
            conv1: 8,
            conv2: 16,
            classes,
        }
    }

    pub fn id(&self) -> String {
        match *self {
            Architecture::Linear {
                inputs,
                outputs,
                bias,
            } => {
                format!("linear-{inputs}x{outputs}{}", if bias { "-b" } else { "" })
            }
            Architecture::ToyCnn {
                height,
                width,
                channels,
                conv1,
                conv2,
                classes,
            } => {
                format!("toycnn-{height}x{width}x{channels}-c{conv1}-c{conv2}-k{classes}")
            }
            Architecture::PooledCnn {
                height,
                width,
                channels,
                conv1,
                conv2,
                classes,
            } => {
                format!("pooledcnn-{height}x{width}x{channels}-c{conv1}-c{conv2}-k{classes}")
            }
        }
    }

    fn layers(&self) -> Result<(Vec<usize>, Vec<Layer>)> {
        let conv = |name: &str, in_ch, out_ch, stride| Layer::Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            pad: 1,
        };
        match *self {
            Architecture::Linear {
                inputs,
                outputs,
                bias,
            } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::config("model", "linear model needs positive sizes"));
                }
                Ok((
                    vec![inputs],
                    vec![Layer::Dense {
                        name: "fc".into(),
                        inputs,
                        outputs,
                        bias,
                    }],
                ))
            }
            Architecture::ToyCnn {
                height,
                width,
                channels,
                conv1,
                conv2,
                classes,
            }
            | Architecture::PooledCnn {
                height,
                width,
                channels,
                conv1,
                conv2,
                classes,
            } => {
                if [height, width, channels, conv1, conv2, classes].contains(&0) {
                    return Err(Error::config("model", "all CNN sizes must be positive"));
                }
                let pooled = matches!(self, Architecture::PooledCnn { .. });
                let (h2, w2) = (
                    nn::conv_output_size(height, 3, 2, 1),
                    nn::conv_output_size(width, 3, 2, 1),
                );
                let (h3, w3) = if pooled { (h2 / 2, w2 / 2) } else { (h2, w2) };
                if h3 == 0 || w3 == 0 {
                    return Err(Error::config(
                        "model",
                        "input too small for the architecture",
                    ));
                }
                let mut layers = vec![
                    conv("conv1", channels, conv1, 1),
                    Layer::BatchNorm {
                        name: "bn1".into(),
                        channels: conv1,
                    },
                    Layer::Relu,
                    conv("conv2", conv1, conv2, 2),
                    Layer::BatchNorm {
                        name: "bn2".into(),
                        channels: conv2,
                    },
                    Layer::Relu,
                ];
                if pooled {
                    layers.push(Layer::AvgPool { size: 2 });
                }
                layers.push(Layer::Flatten);
                layers.push(Layer::Dense {
                    name: "fc".into(),
                    inputs: h3 * w3 * conv2,
                    outputs: classes,
                    bias: true,
                });
                Ok((vec![height, width, channels], layers))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
}

impl Layer {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_ch, *kernel, *kernel, *in_ch],
                ),
                (format!("{name}.bias"), vec![*out_ch]),
            ],
            Layer::BatchNorm { name, channels } => vec![
                (format!("{name}.weight"), vec![*channels]),
                (format!("{name}.bias"), vec![*channels]),
            ],
            Layer::Dense {
                name,
                inputs,
                outputs,
                bias,
            } => {
                let mut v = vec![(format!("{name}.weight"), vec![*outputs, *inputs])];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*outputs]));
                }
                v
            }
            Layer::Relu | Layer::AvgPool { .. } | Layer::Flatten => vec![],
        }
    }
}

/// Loss applied per example; batch losses are the mean of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `(f(x) - y)^2` for single-output models with real targets.
    SquaredError,
}

/// Parameters bound to a tape, keyed by name.
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

/// A differentiable classifier: layer stack plus named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    arch: Architecture,
    seed: u64,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
    linear_layer_names: Vec<String>,
}

impl ModelHandle {
    /// Random initialization: weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, batch-norm scale 1 and shift 0.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let (input_shape, layers) = arch.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in &layers {
            let fan_in = match layer {
                Layer::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
                Layer::Dense { inputs, .. } => *inputs,
                _ => 1,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for (name, shape) in layer.param_shapes() {
                let t = match layer {
                    Layer::BatchNorm { .. } if name.ends_with(".weight") => {
                        Tensor::full(shape, 1.0)
                    }
                    Layer::BatchNorm { .. } => Tensor::zeros(shape),
                    _ => Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)),
                };
                params.insert(name, t);
            }
        }
        Ok(Self::assemble(arch, seed, input_shape, layers, params))
    }

    /// A model with the given parameter values; names and shapes must match
    /// the architecture exactly.
    pub fn from_params(
        arch: Architecture,
        seed: u64,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let (input_shape, layers) = arch.layers()?;
        let expected: BTreeMap<String, Vec<usize>> =
            layers.iter().flat_map(Layer::param_shapes).collect();
        if expected.len() != params.len() {
            return Err(Error::Architecture(format!(
                "{} expects {} parameters, got {}",
                arch.id(),
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Architecture(format!(
                        "parameter {name}: expected shape {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Architecture(format!("missing parameter {name}"))),
            }
        }
        Ok(Self::assemble(arch, seed, input_shape, layers, params))
    }

    fn assemble(
        arch: Architecture,
        seed: u64,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: BTreeMap<String, Tensor>,
    ) -> Self {
        let mut linear_layer_names: Vec<String> = layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { name, .. } | Layer::Dense { name, .. } => {
                    Some(format!("{name}.weight"))
                }
                _ => None,
            })
            .collect();
        linear_layer_names.sort();
        ModelHandle {
            arch,
            seed,
            input_shape,
            layers,
            params,
            linear_layer_names,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn arch_id(&self) -> String {
        self.arch.id()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameters in flattening (lexical) order.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Weight tensors of every convolutional and dense layer.
    pub fn linear_layer_names(&self) -> &[String] {
        &self.linear_layer_names
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    pub fn check_input(&self, batch: &LabeledBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.example_shape() != self.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.input_shape.clone(),
                actual: batch.example_shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Logits (or regression outputs) for a `[B, ...]` input. Batch-norm
    /// layers use the statistics of `x`.
    pub fn forward<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Var<'t> {
        self.run(vars, x, &self.layers)
    }

    /// Activations entering the final layer, `[B, features]` for the CNNs.
    pub fn features<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Var<'t> {
        self.run(vars, x, &self.layers[..self.layers.len() - 1])
    }

    /// Inputs of every ReLU in the forward pass. The second-order attack
    /// objective jumps wherever one of them crosses 0.
    pub fn relu_inputs<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                out.push(self.run(vars, x, &self.layers[..k]));
            }
        }
        out
    }

    fn run<'t>(&self, vars: &ParamVars<'t>, x: Var<'t>, layers: &[Layer]) -> Var<'t> {
        let p = |name: &str| vars[name];
        let mut h = x;
        for layer in layers {
            h = match layer {
                Layer::Conv {
                    name, stride, pad, ..
                } => nn::conv2d(
                    h,
                    p(&format!("{name}.weight")),
                    Some(p(&format!("{name}.bias"))),
                    *stride,
                    *pad,
                ),
                Layer::BatchNorm { name, .. } => nn::batch_norm(
                    h,
                    p(&format!("{name}.weight")),
                    p(&format!("{name}.bias")),
                    BN_EPS,
                ),
                Layer::Relu => h.relu(),
                Layer::AvgPool { size } => nn::avg_pool(h, *size),
                Layer::Flatten => {
                    let s = h.shape();
                    h.reshape(&[s[0], s[1..].iter().product()])
                }
                Layer::Dense { name, bias, .. } => {
                    let b = bias.then(|| p(&format!("{name}.bias")));
                    nn::dense(h, p(&format!("{name}.weight")), b)
                }
            };
        }
        h
    }

    /// Per-example losses `[B]` from a single forward pass over the batch.
    pub fn per_example_losses<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        batch: &LabeledBatch,
        loss: LossKind,
    ) -> Result<Var<'t>> {
        self.check_input(batch)?;
        let x = tape.constant(batch.inputs().clone());
        let out = self.forward(vars, x);
        match (loss, batch.targets()) {
            (LossKind::CrossEntropy, Targets::Classes(labels)) => {
                let k = out.shape()[1];
                if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                    return Err(Error::param(format!(
                        "label {bad} out of range for {k} outputs"
                    )));
                }
                Ok(nn::cross_entropy(out, labels))
            }
            (LossKind::SquaredError, Targets::Values(ys)) => {
                if out.shape()[1] != 1 {
                    return Err(Error::param("squared error needs a single-output model"));
                }
                let pred = out.reshape(&[ys.len()]);
                let y = tape.constant(Tensor::new(vec![ys.len()], ys.clone()));
                Ok(nn::squared_error(pred, y))
            }
            (loss, _) => Err(Error::param(format!("targets do not match loss {loss:?}"))),
        }
    }
}
