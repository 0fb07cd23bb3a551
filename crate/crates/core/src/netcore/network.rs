use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

use super::ops::{self, Chw};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Kaiming-uniform fan-in initialization, bound `sqrt(6 / fan_in)`.
    fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut dyn RngCore) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut p = Param::zeros(shape);
        for v in &mut p.value {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Param {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            grad: vec![0.0; t.len()],
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.value.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Linear { in_dim: usize, out_dim: usize },
    Gelu,
    Relu,
    Dropout { rate: f64 },
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { w: Param, b: Param, c_out: usize },
    Linear { w: Param, b: Param },
    Gelu,
    Relu,
    Dropout(f64),
    Pool,
}

/// Activation flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Act {
    Spatial(Chw, Vec<f64>),
    Flat(Vec<f64>),
}

impl Act {
    pub fn data(&self) -> &[f64] {
        match self {
            Act::Spatial(_, d) | Act::Flat(d) => d,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Act {
        match self {
            Act::Spatial(c, d) => Act::Spatial(*c, d.iter().map(|&v| f(v)).collect()),
            Act::Flat(d) => Act::Flat(d.iter().map(|&v| f(v)).collect()),
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Act {
        match self {
            Act::Spatial(c, _) => Act::Spatial(*c, data),
            Act::Flat(_) => Act::Flat(data),
        }
    }

    /// `[C, H, W]` tensors become spatial activations, 1-D tensors flat ones.
    pub fn from_tensor(t: &Tensor) -> Result<Act> {
        match *t.shape() {
            [c, h, w] => Ok(Act::Spatial(Chw { c, h, w }, t.data().to_vec())),
            [_] => Ok(Act::Flat(t.data().to_vec())),
            _ => Err(Error::DimMismatch(format!(
                "network input must be [C, H, W] or [N], got {:?}",
                t.shape()
            ))),
        }
    }
}

/// How dropout layers behave during a forward pass.
pub enum DropoutMode<'a> {
    /// Identity.
    Eval,
    /// Fresh masks drawn from the generator.
    Train(&'a mut dyn RngCore),
    /// Masks recorded by an earlier pass, indexed by layer.
    Replay(&'a [Option<Vec<f64>>]),
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Act>,
    masks: Vec<Option<Vec<f64>>>,
    output: Act,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.output.data()
    }

    pub fn masks(&self) -> &[Option<Vec<f64>>] {
        &self.masks
    }
}

/// A sequential network over a single sample.
#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    /// Test-only fault injection: scales every weight gradient.
    #[doc(hidden)]
    pub grad_fault: Option<f64>,
}

#[derive(Clone, Copy)]
enum Shape {
    Spatial(usize),
    Flat(usize),
}

fn check_specs(specs: &[LayerSpec], input: Shape) -> Result<Shape> {
    let mut shape = input;
    for (i, spec) in specs.iter().enumerate() {
        let bad = |what: String| Error::DimMismatch(format!("layer {i} ({spec:?}): {what}"));
        shape = match (*spec, shape) {
            (LayerSpec::Conv3x3 { in_channels, out_channels }, Shape::Spatial(c)) => {
                if in_channels != c || out_channels == 0 {
                    return Err(bad(format!("expects {in_channels} channels, got {c}")));
                }
                Shape::Spatial(out_channels)
            }
            (LayerSpec::Linear { in_dim, out_dim }, Shape::Flat(n)) => {
                if in_dim != n || out_dim == 0 {
                    return Err(bad(format!("expects {in_dim} inputs, got {n}")));
                }
                Shape::Flat(out_dim)
            }
            (LayerSpec::GlobalAvgPool, Shape::Spatial(c)) => Shape::Flat(c),
            (LayerSpec::Dropout { rate }, s) => {
                ops::check_dropout_rate(rate)?;
                s
            }
            (LayerSpec::Gelu | LayerSpec::Relu, s) => s,
            (_, Shape::Spatial(_)) => return Err(bad("needs a flat input".into())),
            (_, Shape::Flat(_)) => return Err(bad("needs a spatial input".into())),
        };
    }
    Ok(shape)
}

impl Network {
    /// Builds and initializes a network for spatial inputs with
    /// `in_channels` channels (or flat inputs of that size when the first
    /// layer is linear).
    pub fn new(specs: Vec<LayerSpec>, in_channels: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let input = match specs.first() {
            Some(LayerSpec::Linear { .. }) => Shape::Flat(in_channels),
            _ => Shape::Spatial(in_channels),
        };
        check_specs(&specs, input)?;
        let layers = specs
            .iter()
            .map(|s| match *s {
                LayerSpec::Conv3x3 { in_channels, out_channels } => Layer::Conv {
                    w: Param::kaiming(vec![out_channels, in_channels, 3, 3], in_channels * 9, rng),
                    b: Param::zeros(vec![out_channels]),
                    c_out: out_channels,
                },
                LayerSpec::Linear { in_dim, out_dim } => Layer::Linear {
                    w: Param::kaiming(vec![out_dim, in_dim], in_dim, rng),
                    b: Param::zeros(vec![out_dim]),
                },
                LayerSpec::Gelu => Layer::Gelu,
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => Layer::Dropout(rate),
                LayerSpec::GlobalAvgPool => Layer::Pool,
            })
            .collect();
        Ok(Network {
            specs,
            layers,
            grad_fault: None,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Parameters in layer order, weight before bias.
    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { w, b, .. } | Layer::Linear { w, b } => vec![w, b],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { w, b, .. } | Layer::Linear { w, b } => vec![w, b],
                _ => vec![],
            })
            .collect()
    }

    /// Index of the layer owning each parameter returned by [`Self::params`].
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| match l {
                Layer::Conv { .. } | Layer::Linear { .. } => vec![i, i],
                _ => vec![],
            })
            .collect()
    }

    /// Replaces parameter values, in [`Self::params`] order.
    pub fn load_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::DimMismatch(format!(
                "network has {} parameters, checkpoint has {}",
                params.len(),
                values.len()
            )));
        }
        for (p, t) in params.iter_mut().zip(values) {
            if p.shape != t.shape() {
                return Err(Error::DimMismatch(format!(
                    "parameter shape {:?} vs checkpoint {:?}",
                    p.shape,
                    t.shape()
                )));
            }
            p.value = t.into_data();
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(&self, x: Act, mode: DropoutMode<'_>) -> Result<Tape> {
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(n),
            masks: vec![None; n],
            output: x,
        };
        self.run(0, &mut tape, mode)?;
        Ok(tape)
    }

    /// Recomputes layers `start..` from the recorded input of layer
    /// `start`, overwriting the tape from there on.
    pub fn forward_from(&self, start: usize, tape: &mut Tape, mode: DropoutMode<'_>) -> Result<()> {
        tape.output = tape.inputs[start].clone();
        tape.inputs.truncate(start);
        self.run(start, tape, mode)
    }

    fn run(&self, start: usize, tape: &mut Tape, mut mode: DropoutMode<'_>) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let x = std::mem::replace(&mut tape.output, Act::Flat(Vec::new()));
            let y = match (layer, &x) {
                (Layer::Conv { w, b, c_out, .. }, Act::Spatial(dims, data)) => {
                    let out = ops::conv3x3_forward(data, *dims, &w.value, &b.value, *c_out)?;
                    Act::Spatial(Chw { c: *c_out, ..*dims }, out)
                }
                (Layer::Linear { w, b }, Act::Flat(data)) => {
                    Act::Flat(ops::linear_forward(data, &w.value, &b.value)?)
                }
                (Layer::Pool, Act::Spatial(dims, data)) => {
                    Act::Flat(ops::global_avg_pool(data, *dims))
                }
                (Layer::Gelu, _) => x.map(ops::gelu),
                (Layer::Relu, _) => x.map(ops::relu),
                (Layer::Dropout(rate), _) => {
                    let mask = match &mut mode {
                        DropoutMode::Eval => None,
                        DropoutMode::Train(rng) => Some(ops::dropout_mask(x.data().len(), *rate, *rng)?),
                        DropoutMode::Replay(masks) => masks.get(i).cloned().flatten(),
                    };
                    let y = match &mask {
                        Some(m) => {
                            if m.len() != x.data().len() {
                                return Err(Error::DimMismatch("replayed dropout mask".into()));
                            }
                            x.with_data(x.data().iter().zip(m).map(|(a, b)| a * b).collect())
                        }
                        None => x.clone(),
                    };
                    tape.masks[i] = mask;
                    y
                }
                _ => {
                    return Err(Error::DimMismatch(format!(
                        "layer {i} ({:?}) got incompatible input",
                        self.specs[i]
                    )))
                }
            };
            tape.inputs.push(x);
            tape.output = y;
        }
        Ok(())
    }

    /// Inference with dropout disabled.
    pub fn predict(&self, x: Act) -> Result<Vec<f64>> {
        let tape = self.forward(x, DropoutMode::Eval)?;
        Ok(tape.output.data().to_vec())
    }

    /// Accumulates parameter gradients for `grad_output` (gradient of the
    /// loss with respect to the network output) and returns the gradient
    /// with respect to the network input.
    pub fn backward(&mut self, tape: &Tape, grad_output: &[f64]) -> Result<Vec<f64>> {
        self.backprop(tape, grad_output, false)
    }

    /// Like [`Network::backward`] but stops at the first parameterized
    /// layer, so no input gradient is produced.
    pub fn accumulate_grads(&mut self, tape: &Tape, grad_output: &[f64]) -> Result<()> {
        self.backprop(tape, grad_output, true).map(|_| ())
    }

    fn backprop(&mut self, tape: &Tape, grad_output: &[f64], params_only: bool) -> Result<Vec<f64>> {
        let stop = match params_only {
            true => self.param_layers().first().copied().unwrap_or(self.layers.len()),
            false => 0,
        };
        if grad_output.len() != tape.output.data().len() {
            return Err(Error::DimMismatch(format!(
                "output gradient has {} values, output has {}",
                grad_output.len(),
                tape.output.data().len()
            )));
        }
        let fault = self.grad_fault;
        let mut g = grad_output.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate().rev().take_while(|(i, _)| *i >= stop) {
            let x = &tape.inputs[i];
            let input_grad = !params_only || i > stop;
            g = match (layer, x) {
                (Layer::Conv { w, b, c_out, .. }, Act::Spatial(dims, data)) => {
                    let gx = ops::conv3x3_backward(
                        data,
                        *dims,
                        &w.value,
                        *c_out,
                        &g,
                        &mut w.grad,
                        &mut b.grad,
                        input_grad,
                    );
                    if let Some(f) = fault {
                        w.grad.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                }
                (Layer::Linear { w, b }, Act::Flat(data)) => {
                    let gx = ops::linear_backward(data, &w.value, &g, &mut w.grad, &mut b.grad, input_grad);
                    if let Some(f) = fault {
                        w.grad.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                }
                (Layer::Pool, Act::Spatial(dims, _)) => ops::global_avg_pool_backward(&g, *dims),
                (Layer::Gelu, _) => x.data().iter().zip(&g).map(|(&a, &gv)| gv * ops::gelu_grad(a)).collect(),
                (Layer::Relu, _) => x.data().iter().zip(&g).map(|(&a, &gv)| gv * ops::relu_grad(a)).collect(),
                (Layer::Dropout(_), _) => match &tape.masks[i] {
                    Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => g,
                },
                _ => unreachable!("shapes were checked on the forward pass"),
            };
        }
        Ok(g)
    }

    /// Number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv3x3 { in_channels: 3, out_channels: 3 },
            LayerSpec::Gelu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Linear { in_dim: 3, out_dim: 16 },
            LayerSpec::Gelu,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Linear { in_dim: 16, out_dim: 2 },
        ]
    }

    fn input() -> Act {
        let dims = Chw { c: 3, h: 4, w: 4 };
        Act::Spatial(dims, (0..48).map(|i| (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn rejects_incompatible_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = vec![LayerSpec::GlobalAvgPool, LayerSpec::Linear { in_dim: 5, out_dim: 2 }];
        assert!(Network::new(bad, 3, &mut rng).is_err());
        let bad = vec![LayerSpec::Conv3x3 { in_channels: 2, out_channels: 2 }];
        assert!(Network::new(bad, 3, &mut rng).is_err());
        let bad = vec![LayerSpec::Linear { in_dim: 3, out_dim: 2 }, LayerSpec::GlobalAvgPool];
        assert!(Network::new(bad, 3, &mut rng).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_replay_matches_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(head(), 3, &mut rng).unwrap();
        assert_eq!(net.predict(input()).unwrap(), net.predict(input()).unwrap());
        let tape = net.forward(input(), DropoutMode::Train(&mut rng)).unwrap();
        let replay = net.forward(input(), DropoutMode::Replay(tape.masks())).unwrap();
        assert_eq!(tape.output(), replay.output());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Network::new(head(), 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Network::new(head(), 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.n_params(), 3 * 3 * 9 + 3 + 3 * 16 + 16 + 16 * 2 + 2);
    }

    #[test]
    fn forward_from_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(head(), 3, &mut rng).unwrap();
        let mut tape = net.forward(input(), DropoutMode::Eval).unwrap();
        let full = tape.output().to_vec();
        net.forward_from(4, &mut tape, DropoutMode::Eval).unwrap();
        assert_eq!(tape.output(), &full[..]);
    }

    #[test]
    fn accumulate_grads_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = Network::new(head(), 3, &mut rng).unwrap();
        let mut b = a.clone();
        let tape = a.forward(input(), DropoutMode::Eval).unwrap();
        let gi = a.backward(&tape, &[1.0, -0.5]).unwrap();
        b.accumulate_grads(&tape, &[1.0, -0.5]).unwrap();
        assert_eq!(gi.len(), input().data().len());
        assert_eq!(a.params(), b.params());
    }
}
