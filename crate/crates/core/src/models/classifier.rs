use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::expect_shape;
use super::layers::{Activation, BoundLinear, BoundMlp, Linear, Mlp, Module};
use super::ModelError;
use crate::ndiff::{Array, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierShape {
    pub data_dim: usize,
    pub classes: usize,
    /// Width of the penultimate embedding used by the hardness criterion.
    pub embed_dim: usize,
    /// Hidden widths before the embedding layer. Empty makes the whole
    /// classifier linear in its input.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ClassifierShape {
    fn default() -> Self {
        Self { data_dim: 2, classes: 2, embed_dim: 16, hidden: vec![], activation: Activation::Tanh }
    }
}

/// `x -> embedding (k) -> logits (K)`. The embedding layer itself is affine
/// with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub shape: ClassifierShape,
    pub trunk: Mlp,
    pub head: Linear,
}

pub struct BoundClassifier {
    trunk: BoundMlp,
    head: BoundLinear,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutput {
    pub logits: Var,
    pub embedding: Var,
}

impl Classifier {
    /// Random trunk, zero head: an untrained classifier predicts the uniform distribution.
    pub fn init<R: Rng + ?Sized>(shape: ClassifierShape, rng: &mut R) -> Self {
        let trunk = Mlp::init(shape.data_dim, &shape.hidden, shape.embed_dim, shape.activation, rng);
        let head = Linear::zeros(shape.embed_dim, shape.classes);
        Self { shape, trunk, head }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundClassifier {
        BoundClassifier { trunk: self.trunk.bind(tape, trainable), head: self.head.bind(tape, trainable) }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundClassifier,
        x: Var,
    ) -> Result<ClassifierOutput, ModelError> {
        let rows = tape.value(x).rows();
        expect_shape(tape.value(x), rows, self.shape.data_dim)?;
        let embedding = bound.trunk.forward(tape, x)?;
        let logits = bound.head.forward(tape, embedding)?;
        Ok(ClassifierOutput { logits, embedding })
    }

    /// Plain-array `(logits, embedding)` for a batch.
    pub fn predict(&self, x: &Array) -> Result<(Array, Array), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.embedding).clone()))
    }

    /// Argmax labels, lowest index on ties.
    pub fn predict_labels(&self, x: &Array) -> Result<Vec<usize>, ModelError> {
        let (logits, _) = self.predict(x)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    pub(crate) fn bound_vars(bound: &BoundClassifier) -> Vec<Var> {
        let mut v = bound.trunk.vars();
        v.extend([bound.head.w, bound.head.b]);
        v
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Module for Classifier {
    fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = self.trunk.named_tensors("classifier.trunk");
        out.push(("classifier.head.w".into(), &self.head.w));
        out.push(("classifier.head.b".into(), &self.head.b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = self.trunk.tensors_mut();
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}
