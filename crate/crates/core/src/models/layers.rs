use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndiff::{Array, NdiffError, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Anything holding learnable tensors in a fixed order.
pub trait Module {
    /// Named tensors, in the same order as [`Module::tensors_mut`].
    fn tensors(&self) -> Vec<(String, &Array)>;
    fn tensors_mut(&mut self) -> Vec<&mut Array>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Dense layer `x · w + b` with `w: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array,
    pub b: Array,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a));
        Self { w, b: Array::zeros(1, fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array::zeros(fan_in, fan_out), b: Array::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NdiffError> {
        tape.affine(x, self.w, self.b)
    }
}

pub(crate) fn bind_array(tape: &mut Tape, a: &Array, trainable: bool) -> Var {
    if trainable {
        tape.var(a.clone())
    } else {
        tape.constant(a.clone())
    }
}

impl Linear {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear { w: bind_array(tape, &self.w, trainable), b: bind_array(tape, &self.b, trainable) }
    }
}

/// Feed-forward stack; the activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Linear::fan_out).collect()
    }

    pub fn last_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("non-empty mlp")
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            activation: self.activation,
        }
    }

    pub(crate) fn named_tensors<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Array)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &l.w));
            out.push((format!("{prefix}.{i}.b"), &l.b));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NdiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub(crate) fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}
