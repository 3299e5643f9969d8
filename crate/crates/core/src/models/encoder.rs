use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::expect_shape;
use super::layers::{Activation, BoundMlp, Mlp, Module};
use super::ModelError;
use crate::ndiff::{Array, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderShape {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self { data_dim: 2, cond_dim: 8, hidden: vec![64], activation: Activation::Tanh }
    }
}

/// Maps a real data point to its conditioning embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEncoder {
    pub shape: EncoderShape,
    pub net: Mlp,
}

impl InstanceEncoder {
    pub fn init<R: Rng + ?Sized>(shape: EncoderShape, rng: &mut R) -> Self {
        let net = Mlp::init(shape.data_dim, &shape.hidden, shape.cond_dim, shape.activation, rng);
        Self { shape, net }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var, ModelError> {
        let rows = tape.value(x).rows();
        expect_shape(tape.value(x), rows, self.shape.data_dim)?;
        Ok(bound.forward(tape, x)?)
    }

    /// Embeds a batch of points.
    pub fn embed(&self, x: &Array) -> Result<Array, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Embedding of a single reference point.
pub fn embed_instance(x_ref: &[f64], enc: &InstanceEncoder) -> Result<Vec<f64>, ModelError> {
    Ok(enc.embed(&Array::row_vector(x_ref))?.into_vec())
}

impl Module for InstanceEncoder {
    fn tensors(&self) -> Vec<(String, &Array)> {
        self.net.named_tensors("encoder.net")
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array> {
        self.net.tensors_mut()
    }
}
