//! Feedback criteria scoring how useful a sample is to the classifier, and
//! their gradients with respect to the noisy state `x_t`.
//!
//! All three criteria are recorded on a [`Tape`] so that the same code path
//! yields values for evaluation and gradients for guidance. Each returns a
//! `rows×1` column, one value per sample.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::models::{Classifier, Denoiser, ModelError};
use crate::ndiff::{Array, NdiffError, Tape, Var};
use crate::schedule::{predict_x0_on_tape, NoiseSchedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CriteriaError {
    #[error("class {class} has {count} samples; covariance needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
    #[error("covariance of class {0} is not positive definite after regularization")]
    NotPositiveDefinite(usize),
    #[error("no class statistics for class {0}")]
    MissingStats(usize),
    #[error("non-finite criterion gradient at timestep {t}")]
    NonFinite { t: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tape(#[from] NdiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    Loss,
    Entropy,
    Hardness,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 3] = [CriterionKind::Loss, CriterionKind::Entropy, CriterionKind::Hardness];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Loss => "loss",
            CriterionKind::Entropy => "entropy",
            CriterionKind::Hardness => "hardness",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-class Gaussian fit of classifier embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub k: usize,
    pub mu: Vec<Vec<f64>>,
    /// Regularized covariance `S + lambda I`.
    pub sigma: Vec<Array>,
    pub sigma_inv: Vec<Array>,
    pub logdet: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Adds `lambda I`.
    Fixed(f64),
    /// Adds `c * trace(S) / k * I`, computed per class.
    TraceScaled(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::TraceScaled(1e-3)
    }
}

impl ClassStats {
    pub fn classes(&self) -> usize {
        self.mu.len()
    }
}

/// Fits mean, regularized covariance (denominator `n - 1`), its inverse and
/// log-determinant for each class in `0..classes`.
pub fn compute_class_stats(
    embeddings: &Array,
    labels: &[usize],
    classes: usize,
    reg: Regularization,
) -> Result<ClassStats, CriteriaError> {
    let k = embeddings.cols();
    let mut out = ClassStats { k, mu: vec![], sigma: vec![], sigma_inv: vec![], logdet: vec![] };
    for c in 0..classes {
        let rows: Vec<&[f64]> = labels
            .iter()
            .zip(embeddings.iter_rows())
            .filter(|(l, _)| **l == c)
            .map(|(_, r)| r)
            .collect();
        let n = rows.len();
        if n < 2 {
            return Err(CriteriaError::ClassTooSmall { class: c, count: n });
        }
        let mut mu = vec![0.0; k];
        for r in &rows {
            for (m, v) in mu.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(k, k);
        for r in &rows {
            for i in 0..k {
                let di = r[i] - mu[i];
                for j in 0..k {
                    cov[(i, j)] += di * (r[j] - mu[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let lambda = match reg {
            Regularization::Fixed(l) => l,
            Regularization::TraceScaled(s) => s * cov.trace() / k as f64,
        };
        for i in 0..k {
            cov[(i, i)] += lambda;
        }
        let chol = cov.clone().cholesky().ok_or(CriteriaError::NotPositiveDefinite(c))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        // symmetrize to remove rounding asymmetry in the inverse
        let inv = (&inv + inv.transpose()) * 0.5;
        out.mu.push(mu);
        out.sigma.push(Array::from_fn(k, k, |i, j| cov[(i, j)]));
        out.sigma_inv.push(Array::from_fn(k, k, |i, j| inv[(i, j)]));
        out.logdet.push(logdet);
    }
    Ok(out)
}

/// Negative log-softmax at each row's label.
pub fn loss_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, CriteriaError> {
    let (rows, classes) = tape.value(logits).shape();
    let mut onehot = Array::zeros(rows, classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CriteriaError::BadLabel { label: y, classes });
        }
        onehot.set(i, y, 1.0);
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.mask(ls, &onehot)?;
    let s = tape.row_sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Shannon entropy of the softmax of each row.
pub fn entropy_on_tape(tape: &mut Tape, logits: Var) -> Result<Var, CriteriaError> {
    let p = tape.softmax(logits);
    let lp = tape.log_softmax(logits);
    let plp = tape.mul(p, lp)?;
    let s = tape.row_sum(plp);
    Ok(tape.scale(s, -1.0))
}

/// `½[(e - μ)ᵀ Σ⁻¹ (e - μ) + ln det Σ + k ln 2π]` for every row against class `y`.
pub fn hardness_on_tape(
    tape: &mut Tape,
    embedding: Var,
    y: usize,
    stats: &ClassStats,
) -> Result<Var, CriteriaError> {
    if y >= stats.classes() {
        return Err(CriteriaError::MissingStats(y));
    }
    let rows = tape.value(embedding).rows();
    let mu = Array::from_fn(rows, stats.k, |_, j| stats.mu[y][j]);
    let mu = tape.constant(mu);
    let inv = tape.constant(stats.sigma_inv[y].clone());
    let d = tape.sub(embedding, mu)?;
    let dm = tape.matmul(d, inv)?;
    let q = tape.mul(dm, d)?;
    let q = tape.row_sum(q);
    let offset = stats.logdet[y] + stats.k as f64 * (2.0 * std::f64::consts::PI).ln();
    let hs = tape.add_scalar(q, offset);
    Ok(tape.scale(hs, 0.5))
}

fn single_row(values: &[f64]) -> (Tape, Var) {
    let mut tape = Tape::new();
    let v = tape.constant(Array::row_vector(values));
    (tape, v)
}

pub fn criterion_loss(logits: &[f64], y: usize) -> Result<f64, CriteriaError> {
    let (mut tape, l) = single_row(logits);
    let out = loss_on_tape(&mut tape, l, &[y])?;
    Ok(tape.value(out).data()[0])
}

pub fn criterion_entropy(logits: &[f64]) -> Result<f64, CriteriaError> {
    let (mut tape, l) = single_row(logits);
    let out = entropy_on_tape(&mut tape, l)?;
    Ok(tape.value(out).data()[0])
}

pub fn criterion_hardness(embedding: &[f64], y: usize, stats: &ClassStats) -> Result<f64, CriteriaError> {
    let (mut tape, e) = single_row(embedding);
    let out = hardness_on_tape(&mut tape, e, y, stats)?;
    Ok(tape.value(out).data()[0])
}

/// Criterion values of a batch of clean points, all labeled `y`.
pub fn evaluate_criterion(
    kind: CriterionKind,
    classifier: &Classifier,
    x: &Array,
    y: usize,
    stats: Option<&ClassStats>,
) -> Result<Vec<f64>, CriteriaError> {
    let mut tape = Tape::new();
    let bound = classifier.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = classifier.forward(&mut tape, &bound, xv)?;
    let c = criterion_column(&mut tape, kind, out.logits, out.embedding, y, stats)?;
    Ok(tape.value(c).data().to_vec())
}

pub(crate) fn criterion_column(
    tape: &mut Tape,
    kind: CriterionKind,
    logits: Var,
    embedding: Var,
    y: usize,
    stats: Option<&ClassStats>,
) -> Result<Var, CriteriaError> {
    match kind {
        CriterionKind::Loss => {
            let rows = tape.value(logits).rows();
            loss_on_tape(tape, logits, &vec![y; rows])
        }
        CriterionKind::Entropy => entropy_on_tape(tape, logits),
        CriterionKind::Hardness => {
            let stats = stats.ok_or(CriteriaError::MissingStats(y))?;
            hardness_on_tape(tape, embedding, y, stats)
        }
    }
}

/// Everything needed to evaluate a criterion through the predicted clean point.
#[derive(Clone, Copy)]
pub struct GuidanceContext<'a> {
    pub denoiser: &'a Denoiser,
    pub classifier: &'a Classifier,
    pub stats: Option<&'a ClassStats>,
    pub sched: &'a NoiseSchedule,
    pub gamma: f64,
    /// Differentiate through the denoiser's dependence on `x_t`. When false the
    /// guided noise prediction is treated as a constant.
    pub through_denoiser: bool,
}

/// Result of one criterion evaluation on a batch.
#[derive(Debug, Clone)]
pub struct CriterionEval {
    /// `∇_{x_t} C`, one row per sample.
    pub grad: Array,
    /// Criterion value at the predicted clean point, per sample.
    pub value: Vec<f64>,
    /// Guided noise prediction at `x_t`.
    pub eps: Array,
}

/// Guided noise prediction `eps_u + γ (eps_c - eps_u)` recorded on a tape.
pub(crate) fn guided_eps_on_tape(
    tape: &mut Tape,
    denoiser: &Denoiser,
    x: Var,
    t: usize,
    y: usize,
    z: &Array,
    gamma: f64,
) -> Result<Var, CriteriaError> {
    let rows = tape.value(x).rows();
    let bound = denoiser.bind(tape, false);
    let ts = vec![t; rows];
    let zc = tape.constant(z.clone());
    let zn = tape.constant(Array::zeros(rows, z.cols()));
    let cond = denoiser.forward(tape, &bound, x, &ts, &vec![Some(y); rows], zc)?;
    let uncond = denoiser.forward(tape, &bound, x, &ts, &vec![None; rows], zn)?;
    let diff = tape.sub(cond, uncond)?;
    let scaled = tape.scale(diff, gamma);
    Ok(tape.add(uncond, scaled)?)
}

/// Like [`criterion_grad`] but leaves non-finite rows for the caller to handle.
pub(crate) fn criterion_grad_raw(
    ctx: &GuidanceContext<'_>,
    x_t: &Array,
    t: usize,
    y: usize,
    z: &Array,
    kind: CriterionKind,
) -> Result<CriterionEval, CriteriaError> {
    let mut tape = Tape::new();
    let x = tape.var(x_t.clone());
    let eps = guided_eps_on_tape(&mut tape, ctx.denoiser, x, t, y, z, ctx.gamma)?;
    let eps_value = tape.value(eps).clone();
    let eps_used = if ctx.through_denoiser { eps } else { tape.constant(eps_value.clone()) };
    let x0 = predict_x0_on_tape(&mut tape, x, eps_used, t, ctx.sched)?;
    let bound = ctx.classifier.bind(&mut tape, false);
    let out = ctx.classifier.forward(&mut tape, &bound, x0)?;
    let column = criterion_column(&mut tape, kind, out.logits, out.embedding, y, ctx.stats)?;
    let total = tape.sum(column);
    tape.backward(total)?;
    Ok(CriterionEval { grad: tape.grad(x), value: tape.value(column).data().to_vec(), eps: eps_value })
}

/// `∇_{x_t} C(f(x̂₀(x_t)))` for a batch of states sharing timestep `t` and label `y`.
/// `z` holds each row's conditioning embedding (zero rows for none).
pub fn criterion_grad(
    ctx: &GuidanceContext<'_>,
    x_t: &Array,
    t: usize,
    y: usize,
    z: &Array,
    kind: CriterionKind,
) -> Result<CriterionEval, CriteriaError> {
    let eval = criterion_grad_raw(ctx, x_t, t, y, z, kind)?;
    if !eval.grad.all_finite() {
        return Err(CriteriaError::NonFinite { t });
    }
    Ok(eval)
}
