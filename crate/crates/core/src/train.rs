//! Training loops for the denoiser (jointly with the instance encoder) and
//! the classifier, plus the balanced-softmax loss and real/synthetic batch mixing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{id_split, Dataset, Split};
use crate::models::{
    Classifier, ClassifierShape, Denoiser, DenoiserShape, EncoderShape, InstanceEncoder, ModelError, Module,
};
use crate::ndiff::{Array, NdiffError, Tape, Var};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyData,
    #[error("class {0} has zero count")]
    ZeroCount(usize),
    #[error("synthetic pool is empty but mix ratio is {0}")]
    EmptySynthetic(f64),
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("training set contains test point id {0:#x}")]
    TestLeak(u64),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] NdiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

/// Where the denoiser's training-time instance embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceSource {
    /// The training point itself.
    SelfPoint,
    /// A uniformly drawn point of the same class.
    SameClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs (0 disables).
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Balanced-softmax weight in the classifier loss.
    pub alpha: f64,
    /// Fraction of each classifier batch drawn from real data.
    pub mix_ratio: f64,
    /// Probability of training a denoiser row with `(null, null)` conditioning.
    pub p_uncond: f64,
    /// Probability of keeping the class label but nulling the instance embedding.
    pub p_no_instance: f64,
    /// Per-coordinate dropout on the instance embedding.
    pub z_dropout: f64,
    pub instance_source: InstanceSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            seed: 0,
            decay_every: 0,
            decay_factor: 0.5,
            grad_clip: 0.0,
            alpha: 0.0,
            mix_ratio: 1.0,
            p_uncond: 0.1,
            p_no_instance: 0.1,
            z_dropout: 0.0,
            instance_source: InstanceSource::SelfPoint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !prob(self.momentum) || !(self.decay_factor > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("momentum must lie in [0, 1], decay_factor > 0, grad_clip >= 0");
        }
        if !prob(self.alpha) || !prob(self.mix_ratio) {
            return bad("alpha and mix_ratio must lie in [0, 1]");
        }
        if !prob(self.p_uncond) || !prob(self.p_no_instance) || !prob(self.z_dropout) {
            return bad("dropout probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            k => self.lr * self.decay_factor.powi((epoch / k) as i32),
        }
    }
}

/// First-order optimizer with per-tensor state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Array>,
    second: Vec<Array>,
    steps: i32,
}

impl Optimizer {
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Self { kind, momentum, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Array>, grads: &[Array], lr: f64) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Array::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let (b1, b2) = (self.momentum, Self::BETA2);
        let bias1 = 1.0 - b1.powi(self.steps);
        let bias2 = 1.0 - b2.powi(self.steps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                match self.kind {
                    OptimizerKind::Sgd => *w -= lr * gj,
                    OptimizerKind::Momentum => {
                        let mj = &mut m.data_mut()[j];
                        *mj = b1 * *mj + gj;
                        *w -= lr * *mj;
                    }
                    OptimizerKind::Adam => {
                        let mj = &mut m.data_mut()[j];
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        let mhat = *mj / bias1;
                        let vj = &mut v.data_mut()[j];
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *w -= lr * mhat / ((*vj / bias2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

fn clip_grads(grads: &mut [Array], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

fn rng_pair(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(0);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    (init, data)
}

/// Trained denoiser and encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModels {
    pub denoiser: Denoiser,
    pub encoder: InstanceEncoder,
    pub log: TrainLog,
}

/// DDPM noise-prediction training with classifier-free conditioning dropout.
///
/// Each row draws `t` uniformly and `ε ~ N(0, I)` and is trained on
/// `‖ε − ε_θ(x_t, t, y, z)‖²`. With probability `p_uncond` the row sees
/// `(null, null)`; otherwise with probability `p_no_instance` only `z` is nulled.
/// The encoder producing `z` is trained jointly.
pub fn train_denoiser(
    ds: &Dataset,
    den_shape: &DenoiserShape,
    enc_shape: &EncoderShape,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<DiffusionModels, TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if ds.dim() != den_shape.data_dim || enc_shape.data_dim != den_shape.data_dim {
        return Err(ModelError::Dimension { expected: den_shape.data_dim, got: ds.dim() }.into());
    }
    if enc_shape.cond_dim != den_shape.cond_dim {
        return Err(ModelError::Dimension { expected: den_shape.cond_dim, got: enc_shape.cond_dim }.into());
    }
    let (mut init_rng, mut rng) = rng_pair(cfg.seed);
    let mut den = Denoiser::init(den_shape.clone(), &mut init_rng);
    let mut enc = InstanceEncoder::init(enc_shape.clone(), &mut init_rng);
    let by_class: Vec<Vec<usize>> = (0..ds.classes).map(|y| ds.indices_of_class(y)).collect();
    let (d, m, steps_t) = (ds.dim(), den_shape.cond_dim, sched.len());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..ds.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x_t = Array::zeros(b, d);
            let mut eps = Array::zeros(b, d);
            let mut refs = Array::zeros(b, d);
            let mut keep = Array::zeros(b, m);
            let mut ts = Vec::with_capacity(b);
            let mut labels = Vec::with_capacity(b);
            for (r, &i) in chunk.iter().enumerate() {
                let t = rng.random_range(0..steps_t);
                let ab = sched.alpha_bar(t).expect("t in range");
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    eps.set(r, j, e);
                    x_t.set(r, j, sa * ds.points.get(i, j) + sn * e);
                }
                let uncond = rng.random::<f64>() < cfg.p_uncond;
                let no_inst = rng.random::<f64>() < cfg.p_no_instance;
                let pool = &by_class[ds.labels[i]];
                let other = pool[rng.random_range(0..pool.len())];
                let src = match cfg.instance_source {
                    InstanceSource::SelfPoint => i,
                    InstanceSource::SameClass => other,
                };
                refs.row_mut(r).copy_from_slice(ds.points.row(src));
                for j in 0..m {
                    let dropped = rng.random::<f64>() < cfg.z_dropout;
                    keep.set(r, j, if uncond || no_inst || dropped { 0.0 } else { 1.0 });
                }
                ts.push(t);
                labels.push(if uncond { None } else { Some(ds.labels[i]) });
            }

            let mut tape = Tape::new();
            let bd = den.bind(&mut tape, true);
            let be = enc.bind(&mut tape, true);
            let xv = tape.constant(x_t);
            let rv = tape.constant(refs);
            let z_full = enc.forward(&mut tape, &be, rv)?;
            let z = tape.mask(z_full, &keep)?;
            let pred = den.forward(&mut tape, &bd, xv, &ts, &labels, z)?;
            let target = tape.constant(eps);
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, step: log.steps, loss: value });
            }
            tape.backward(loss)?;
            let mut vars: Vec<Var> = Denoiser::bound_vars(&bd);
            vars.extend(be.vars());
            let mut grads: Vec<Array> = vars.iter().map(|&v| tape.grad(v)).collect();
            clip_grads(&mut grads, cfg.grad_clip);
            let mut params = den.tensors_mut();
            params.extend(enc.tensors_mut());
            opt.step(params, &grads, lr);
            total += value;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    Ok(DiffusionModels { denoiser: den, encoder: enc, log })
}

/// Mean denoising MSE at a fixed timestep with fresh noise.
pub fn denoising_mse<R: Rng + ?Sized>(
    den: &Denoiser,
    enc: &InstanceEncoder,
    ds: &Dataset,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let ab = sched.alpha_bar(t).map_err(|e| TrainError::Config(e.to_string()))?;
    let (b, d) = (ds.len(), ds.dim());
    let eps = Array::from_fn(b, d, |_, _| rng.sample(StandardNormal));
    let x_t = Array::from_fn(b, d, |i, j| ab.sqrt() * ds.points.get(i, j) + (1.0 - ab).sqrt() * eps.get(i, j));
    let z = enc.embed(&ds.points)?;
    let labels: Vec<Option<usize>> = ds.labels.iter().map(|&y| Some(y)).collect();
    let pred = den.predict(&x_t, t, &labels, &z)?;
    let se: f64 = pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(se / (b * d) as f64)
}

/// `α L_bal + (1 − α) L_CE` for one example, where
/// `L_bal = −log(n_y e^{z_y} / Σ_j n_j e^{z_j})`.
pub fn balanced_softmax_loss(logits: &[f64], y: usize, counts: &[usize], alpha: f64) -> Result<f64, TrainError> {
    if counts.len() != logits.len() {
        return Err(ModelError::Dimension { expected: logits.len(), got: counts.len() }.into());
    }
    if y >= logits.len() {
        return Err(TrainError::BadLabel { label: y, classes: logits.len() });
    }
    if counts[y] == 0 {
        return Err(TrainError::ZeroCount(y));
    }
    let nll = |shift: &dyn Fn(usize) -> f64| {
        let s: Vec<f64> = logits.iter().enumerate().map(|(j, z)| z + shift(j)).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - s[y]
    };
    let bal = nll(&|j| if counts[j] == 0 { f64::NEG_INFINITY } else { (counts[j] as f64).ln() });
    let ce = nll(&|_| 0.0);
    Ok(alpha * bal + (1.0 - alpha) * ce)
}

fn balanced_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    log_prior: &[f64],
    alpha: f64,
) -> Result<Var, TrainError> {
    let (b, k) = tape.value(logits).shape();
    let onehot = Array::from_fn(b, k, |i, j| if labels[i] == j { -1.0 / b as f64 } else { 0.0 });
    let ce = {
        let ls = tape.log_softmax(logits);
        let picked = tape.mask(ls, &onehot)?;
        tape.sum(picked)
    };
    if alpha == 0.0 {
        return Ok(ce);
    }
    let prior = tape.constant(Array::from_fn(b, k, |_, j| log_prior[j]));
    let shifted = tape.add(logits, prior)?;
    let ls = tape.log_softmax(shifted);
    let picked = tape.mask(ls, &onehot)?;
    let bal = tape.sum(picked);
    if alpha == 1.0 {
        return Ok(bal);
    }
    let a = tape.scale(bal, alpha);
    let c = tape.scale(ce, 1.0 - alpha);
    Ok(tape.add(a, c)?)
}

/// Indices of one mixed minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub real: Vec<usize>,
    pub synthetic: Vec<usize>,
}

/// Draws without replacement, reshuffling when the pool runs out.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One epoch of batches with exactly `⌊ratio · batch⌋` real rows each and
/// the remainder synthetic. The epoch length is set by the real pool (or the
/// synthetic pool for real-free batches), so every real point appears at least once.
pub fn make_balanced_batches<R: Rng + ?Sized>(
    real_len: usize,
    synth_len: usize,
    batch: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<MixedBatch>, TrainError> {
    if batch == 0 || !(0.0..=1.0).contains(&ratio) {
        return Err(TrainError::Config(format!("batch {batch} / ratio {ratio}")));
    }
    let n_real = (ratio * batch as f64).floor() as usize;
    let n_synth = batch - n_real;
    if n_synth > 0 && synth_len == 0 {
        return Err(TrainError::EmptySynthetic(ratio));
    }
    if n_real > 0 && real_len == 0 {
        return Err(TrainError::EmptyData);
    }
    let count = if n_real > 0 { real_len.div_ceil(n_real) } else { synth_len.div_ceil(n_synth) };
    let mut real = Cycler::new(real_len, rng);
    let mut synth = Cycler::new(synth_len, rng);
    Ok((0..count)
        .map(|_| MixedBatch {
            real: (0..n_real).map(|_| real.next(rng)).collect(),
            synthetic: (0..n_synth).map(|_| synth.next(rng)).collect(),
        })
        .collect())
}

/// Trained classifier and loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierRun {
    pub classifier: Classifier,
    pub log: TrainLog,
}

/// Minibatch training of the classifier on real data, optionally mixed with
/// synthetic data at `cfg.mix_ratio`. The balanced-softmax prior uses the
/// class counts of the real set. Test-split points are rejected.
pub fn train_classifier(
    real: &Dataset,
    synth: Option<&Dataset>,
    shape: &ClassifierShape,
    cfg: &TrainConfig,
) -> Result<ClassifierRun, TrainError> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let empty = Dataset::empty(real.dim(), real.classes, real.group_classes.clone());
    let synth = synth.unwrap_or(&empty);
    for &id in real.ids.iter().chain(&synth.ids) {
        if id_split(id) == Split::Test as u8 {
            return Err(TrainError::TestLeak(id));
        }
    }
    for &label in real.labels.iter().chain(&synth.labels) {
        if label >= shape.classes {
            return Err(TrainError::BadLabel { label, classes: shape.classes });
        }
    }
    let counts = real.class_counts();
    if cfg.alpha > 0.0 {
        if let Some(y) = counts.iter().position(|&c| c == 0) {
            return Err(TrainError::ZeroCount(y));
        }
    }
    let log_prior: Vec<f64> = counts.iter().map(|&c| (c.max(1) as f64).ln()).collect();
    let ratio = if synth.is_empty() { 1.0 } else { cfg.mix_ratio };

    let (mut init_rng, mut rng) = rng_pair(cfg.seed);
    let mut clf = Classifier::init(shape.clone(), &mut init_rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = make_balanced_batches(real.len(), synth.len(), cfg.batch_size, ratio, &mut rng)?;
        let mut total = 0.0;
        for mb in &batches {
            let rows: Vec<&[f64]> = mb
                .real
                .iter()
                .map(|&i| real.points.row(i))
                .chain(mb.synthetic.iter().map(|&i| synth.points.row(i)))
                .collect();
            let labels: Vec<usize> = mb
                .real
                .iter()
                .map(|&i| real.labels[i])
                .chain(mb.synthetic.iter().map(|&i| synth.labels[i]))
                .collect();
            let x = Array::from_fn(rows.len(), real.dim(), |i, j| rows[i][j]);

            let mut tape = Tape::new();
            let bound = clf.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = clf.forward(&mut tape, &bound, xv)?;
            let loss = balanced_loss_on_tape(&mut tape, out.logits, &labels, &log_prior, cfg.alpha)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, step: log.steps, loss: value });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Array> = Classifier::bound_vars(&bound).iter().map(|&v| tape.grad(v)).collect();
            clip_grads(&mut grads, cfg.grad_clip);
            opt.step(clf.tensors_mut(), &grads, lr);
            total += value;
            log.steps += 1;
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    Ok(ClassifierRun { classifier: clf, log })
}
