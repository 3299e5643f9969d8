use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{bind_array, Activation, BoundMlp, Mlp, Module};
use super::ModelError;
use crate::ndiff::{Array, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub classes: usize,
    pub class_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        Self {
            data_dim: 2,
            classes: 2,
            class_dim: 16,
            cond_dim: 8,
            time_dim: 16,
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl DenoiserShape {
    pub fn input_width(&self) -> usize {
        self.data_dim + self.time_dim + self.class_dim + self.cond_dim
    }
}

/// Sinusoidal features of integer timesteps, `[sin(t f_0), .., cos(t f_0), ..]`
/// with geometrically spaced frequencies `f_i = 10000^(-i / (width / 2))`.
pub fn time_features(ts: &[usize], width: usize) -> Array {
    let half = width / 2;
    Array::from_fn(ts.len(), width, |i, j| {
        let k = if j < half { j } else { j - half };
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = ts[i] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Conditional noise predictor `eps(x_t, t, y, z)`.
///
/// The class embedding of label `y` is `null + delta[y]`; the null embedding
/// is its own learned row and `delta` starts at zero, so an untrained label is
/// indistinguishable from the null label. Weights reading the instance
/// embedding also start at zero. A null instance embedding is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub null_class: Array,
    pub class_delta: Array,
    pub trunk: Mlp,
}

pub struct BoundDenoiser {
    null_class: Var,
    class_delta: Var,
    trunk: BoundMlp,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(shape: DenoiserShape, rng: &mut R) -> Self {
        let mut trunk =
            Mlp::init(shape.input_width(), &shape.hidden, shape.data_dim, shape.activation, rng);
        let z_start = shape.data_dim + shape.time_dim + shape.class_dim;
        let first = &mut trunk.layers[0].w;
        for r in z_start..z_start + shape.cond_dim {
            first.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        let null_class = Array::from_fn(1, shape.class_dim, |_, _| rng.random_range(-1.0..1.0));
        let class_delta = Array::zeros(shape.classes, shape.class_dim);
        Self { shape, null_class, class_delta, trunk }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDenoiser {
        BoundDenoiser {
            null_class: bind_array(tape, &self.null_class, trainable),
            class_delta: bind_array(tape, &self.class_delta, trainable),
            trunk: self.trunk.bind(tape, trainable),
        }
    }

    /// Records the forward pass for a batch. `x` is `B×d`, `z` is `B×m`, and
    /// `ts`/`labels` carry one entry per row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundDenoiser,
        x: Var,
        ts: &[usize],
        labels: &[Option<usize>],
        z: Var,
    ) -> Result<Var, ModelError> {
        let s = &self.shape;
        let rows = tape.value(x).rows();
        expect_shape(tape.value(x), rows, s.data_dim)?;
        expect_shape(tape.value(z), rows, s.cond_dim)?;
        if ts.len() != rows || labels.len() != rows {
            return Err(ModelError::Dimension { expected: rows, got: ts.len().min(labels.len()) });
        }
        let mut onehot = Array::zeros(rows, s.classes);
        for (i, y) in labels.iter().enumerate() {
            if let Some(y) = *y {
                if y >= s.classes {
                    return Err(ModelError::BadClass { class: y, classes: s.classes });
                }
                onehot.set(i, y, 1.0);
            }
        }
        let onehot = tape.constant(onehot);
        let ones = tape.constant(Array::filled(rows, 1, 1.0));
        let base = tape.matmul(ones, bound.null_class)?;
        let delta = tape.matmul(onehot, bound.class_delta)?;
        let class_emb = tape.add(base, delta)?;
        let temb = tape.constant(time_features(ts, s.time_dim));
        let input = tape.concat_cols(&[x, temb, class_emb, z])?;
        Ok(bound.trunk.forward(tape, input)?)
    }

    /// Plain-array prediction for a batch sharing one timestep.
    pub fn predict(
        &self,
        x: &Array,
        t: usize,
        labels: &[Option<usize>],
        z: &Array,
    ) -> Result<Array, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        let ts = vec![t; x.rows()];
        let out = self.forward(&mut tape, &bound, xv, &ts, labels, zv)?;
        Ok(tape.value(out).clone())
    }

    pub(crate) fn bound_vars(bound: &BoundDenoiser) -> Vec<Var> {
        let mut v = vec![bound.null_class, bound.class_delta];
        v.extend(bound.trunk.vars());
        v
    }
}

impl Module for Denoiser {
    fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = vec![
            ("denoiser.null_class".to_string(), &self.null_class),
            ("denoiser.class_delta".to_string(), &self.class_delta),
        ];
        out.extend(self.trunk.named_tensors("denoiser.trunk"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.null_class, &mut self.class_delta];
        out.extend(self.trunk.tensors_mut());
        out
    }
}

pub(crate) fn expect_shape(a: &Array, rows: usize, cols: usize) -> Result<(), ModelError> {
    if a.cols() != cols {
        return Err(ModelError::Dimension { expected: cols, got: a.cols() });
    }
    if a.rows() != rows {
        return Err(ModelError::Dimension { expected: rows, got: a.rows() });
    }
    Ok(())
}
