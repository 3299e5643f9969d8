//! Feedback-guided reverse sampling.
//!
//! Each step combines conditional and unconditional noise predictions with
//! classifier-free guidance. On every `period`-th step (counted from the first
//! reverse step) the criterion gradient is converted to noise space and
//! subtracted before the DDIM update.
//!
//! Every sample owns its randomness: a setup stream (initial state, reference
//! choice, dropout mask) and a separate noise stream for stochastic steps,
//! both derived from `(seed, sample index, attempt)`. Rows are processed in
//! batches whose arithmetic is row-independent, so results do not depend on
//! batch size or worker count.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    criterion_grad_raw, guided_eps_on_tape, ClassStats, CriteriaError, CriterionKind, GuidanceContext,
};
use crate::data::{parse_schema_line, point_id, DataError, Dataset, Split};
use crate::models::{dropout_mask, Classifier, Denoiser, InstanceEncoder, ModelError};
use crate::ndiff::{Array, Tape};
use crate::schedule::{ddim_step, ddim_step_rows, NoiseSchedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("no reference points for class {0}")]
    NoReferences(usize),
    #[error("criterion {0:?} needs a classifier")]
    MissingClassifier(CriterionKind),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale.
    pub gamma: f64,
    /// Feedback scale.
    pub omega: f64,
    pub criterion: Option<CriterionKind>,
    pub dropout_p: f64,
    pub period: usize,
    pub steps: usize,
    pub eta: f64,
    /// Condition on the embedding of a real reference point.
    pub instance_conditioning: bool,
    /// Differentiate the criterion through the denoiser (else treat the noise
    /// prediction as constant in `x_t`).
    pub through_denoiser: bool,
    /// Fresh-seed regenerations allowed for a sample that goes non-finite.
    pub max_retries: usize,
    /// Clamp each coordinate of the predicted clean point to `[-c, c]` before
    /// every update, re-deriving the noise prediction from the clamped point.
    pub clip_x0: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            omega: 0.0,
            criterion: None,
            dropout_p: 0.0,
            period: 5,
            steps: 30,
            eta: 0.0,
            instance_conditioning: true,
            through_denoiser: true,
            max_retries: 3,
            clip_x0: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Config(m.to_string()));
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(self.omega >= 0.0) {
            return bad("omega must be >= 0");
        }
        if self.period == 0 {
            return bad("period must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if self.clip_x0.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_x0 must be positive");
        }
        Ok(())
    }

    /// Feedback is applied only with a criterion and a positive scale.
    pub fn feedback_active(&self) -> bool {
        self.criterion.is_some() && self.omega > 0.0
    }
}

/// `eps_u + γ (eps_c - eps_u)`.
pub fn cfg_epsilon(eps_uncond: &[f64], eps_cond: &[f64], gamma: f64) -> Vec<f64> {
    eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + gamma * (c - u)).collect()
}

/// Adds `ω ∇C` in score space, expressed on the noise prediction:
/// `eps - ω sqrt(1 - ab_t) grad`.
pub fn apply_feedback(
    eps: &[f64],
    grad_c: &[f64],
    omega: f64,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, ScheduleError> {
    let s = sched.noise_scale(t)?;
    Ok(eps.iter().zip(grad_c).map(|(e, g)| e - omega * s * g).collect())
}

/// Replaces `eps` so that the implied clean point lies in `[-c, c]^d`.
/// Rows already inside the box are left untouched.
pub fn clip_epsilon(x_t: &[f64], eps: &mut [f64], t: usize, sched: &NoiseSchedule, c: f64) -> Result<(), ScheduleError> {
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0: Vec<f64> = x_t.iter().zip(eps.iter()).map(|(x, e)| (x - sn * e) / sa).collect();
    if x0.iter().all(|v| v.abs() <= c) {
        return Ok(());
    }
    for ((e, x), v) in eps.iter_mut().zip(x_t).zip(x0) {
        *e = (x - sa * v.clamp(-c, c)) / sn;
    }
    Ok(())
}

/// Read-only models used while sampling.
#[derive(Clone, Copy)]
pub struct SamplerModels<'a> {
    pub denoiser: &'a Denoiser,
    pub encoder: &'a InstanceEncoder,
    pub classifier: Option<&'a Classifier>,
    pub stats: Option<&'a ClassStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub attempt: usize,
    pub step: usize,
}

/// Output of [`guided_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Successful samples in index order.
    pub points: Array,
    /// Seed of the attempt that produced each point.
    pub seeds: Vec<u64>,
    /// Criterion evaluations performed for each point.
    pub criterion_calls: Vec<usize>,
    /// Every non-finite attempt, in the order encountered.
    pub failures: Vec<SampleFailure>,
    /// Indices that exhausted their retries.
    pub dropped: Vec<usize>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of attempt `attempt` for sample `index` of a batch seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize, attempt: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 ^ splitmix(attempt as u64 ^ 0x5EED)))
}

/// `(setup, noise)` streams of one sample.
pub fn sample_rngs(sample_seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut setup = ChaCha8Rng::seed_from_u64(sample_seed);
    setup.set_stream(0);
    let mut noise = ChaCha8Rng::seed_from_u64(sample_seed);
    noise.set_stream(1);
    (setup, noise)
}

struct ChainOutput {
    x0: Array,
    failed_at: Vec<Option<usize>>,
    calls: Vec<usize>,
}

struct Chain<'a> {
    models: SamplerModels<'a>,
    cfg: &'a GuidanceConfig,
    sched: NoiseSchedule,
    y: usize,
    refs: &'a Array,
}

impl<'a> Chain<'a> {
    /// Initial state and conditioning embedding of one sample, drawn from its setup stream.
    fn setup(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>), SampleError> {
        let d = self.models.denoiser.shape.data_dim;
        let m = self.models.denoiser.shape.cond_dim;
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let r = rng.random_range(0..self.refs.rows());
        let z = if self.cfg.instance_conditioning {
            self.models.encoder.embed(&Array::row_vector(self.refs.row(r)))?.into_vec()
        } else {
            vec![0.0; m]
        };
        let mask = dropout_mask(m, self.cfg.dropout_p, rng)?;
        Ok((x, z.iter().zip(&mask).map(|(v, k)| v * k).collect()))
    }

    fn run(&self, mut x: Array, z: &Array, noise: &mut [ChaCha8Rng]) -> Result<ChainOutput, SampleError> {
        let rows = x.rows();
        let ts = self.sched.strided_timesteps(self.cfg.steps);
        let mut failed_at: Vec<Option<usize>> = vec![None; rows];
        let mut calls = vec![0usize; rows];
        for (step, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(step + 1).copied();
            let feedback = self.cfg.feedback_active() && step % self.cfg.period == 0;
            let eps = if feedback {
                let kind = self.cfg.criterion.expect("feedback implies a criterion");
                let ctx = GuidanceContext {
                    denoiser: self.models.denoiser,
                    classifier: self.models.classifier.ok_or(SampleError::MissingClassifier(kind))?,
                    stats: self.models.stats,
                    sched: &self.sched,
                    gamma: self.cfg.gamma,
                    through_denoiser: self.cfg.through_denoiser,
                };
                let eval = criterion_grad_raw(&ctx, &x, t, self.y, z, kind)?;
                let s = self.sched.noise_scale(t)?;
                let mut eps = eval.eps;
                for (i, c) in calls.iter_mut().enumerate().take(rows) {
                    *c += 1;
                    for (e, g) in eps.row_mut(i).iter_mut().zip(eval.grad.row(i)) {
                        *e -= self.cfg.omega * s * g;
                    }
                }
                eps
            } else {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let e = guided_eps_on_tape(&mut tape, self.models.denoiser, xv, t, self.y, z, self.cfg.gamma)?;
                tape.value(e).clone()
            };
            let mut eps = eps;
            if let Some(c) = self.cfg.clip_x0 {
                for i in 0..rows {
                    clip_epsilon(x.row(i), eps.row_mut(i), t, &self.sched, c)?;
                }
            }
            x = ddim_step_rows(&x, &eps, t, t_prev, &self.sched, noise)?;

            for (i, f) in failed_at.iter_mut().enumerate() {
                if f.is_none() && !x.row(i).iter().all(|v| v.is_finite()) {
                    *f = Some(step);
                }
            }
        }
        Ok(ChainOutput { x0: x, failed_at, calls })
    }
}

/// Generates `n` samples of class `y`, conditioning each on one reference row
/// of `x_refs` chosen uniformly. Work is split over `jobs` threads.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    n: usize,
    y: usize,
    x_refs: &Array,
    cfg: &GuidanceConfig,
    models: SamplerModels<'_>,
    sched: &NoiseSchedule,
    seed: u64,
    jobs: usize,
) -> Result<SampleBatch, SampleError> {
    cfg.validate()?;
    if x_refs.rows() == 0 {
        return Err(SampleError::NoReferences(y));
    }
    if let Some(kind) = cfg.criterion.filter(|_| cfg.feedback_active()) {
        if models.classifier.is_none() {
            return Err(SampleError::MissingClassifier(kind));
        }
        if kind == CriterionKind::Hardness && models.stats.is_none() {
            return Err(CriteriaError::MissingStats(y).into());
        }
    }
    let chain = Chain { models, cfg, sched: sched.with_eta(cfg.eta)?, y, refs: x_refs };
    let d = models.denoiser.shape.data_dim;

    let mut results: Vec<Option<(Vec<f64>, u64, usize)>> = vec![None; n];
    let mut failures = Vec::new();
    let mut pending: Vec<usize> = (0..n).collect();
    for attempt in 0..=cfg.max_retries {
        if pending.is_empty() {
            break;
        }
        let outcomes = run_parallel(&chain, &pending, seed, attempt, jobs)?;
        let mut still = Vec::new();
        for (&idx, outcome) in pending.iter().zip(outcomes) {
            match outcome {
                Ok((point, calls)) => results[idx] = Some((point, sample_seed(seed, idx, attempt), calls)),
                Err(step) => {
                    failures.push(SampleFailure { index: idx, attempt, step });
                    still.push(idx);
                }
            }
        }
        pending = still;
    }

    let mut points = Vec::new();
    let mut seeds = Vec::new();
    let mut criterion_calls = Vec::new();
    for (p, s, c) in results.into_iter().flatten() {
        points.push(p);
        seeds.push(s);
        criterion_calls.push(c);
    }
    Ok(SampleBatch {
        points: Array::from_rows(&points, d).expect("rows have data_dim entries"),
        seeds,
        criterion_calls,
        failures,
        dropped: pending,
    })
}

type Outcome = Result<(Vec<f64>, usize), usize>;

fn run_parallel(
    chain: &Chain<'_>,
    indices: &[usize],
    seed: u64,
    attempt: usize,
    jobs: usize,
) -> Result<Vec<Outcome>, SampleError> {
    let jobs = jobs.max(1).min(indices.len().max(1));
    let chunk = indices.len().div_ceil(jobs).max(1);
    if jobs == 1 {
        return run_chunk(chain, indices, seed, attempt);
    }
    let parts: Vec<Result<Vec<Outcome>, SampleError>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|c| s.spawn(move || run_chunk(chain, c, seed, attempt)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampler worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn run_chunk(chain: &Chain<'_>, indices: &[usize], seed: u64, attempt: usize) -> Result<Vec<Outcome>, SampleError> {
    let d = chain.models.denoiser.shape.data_dim;
    let m = chain.models.denoiser.shape.cond_dim;
    let mut x = Array::zeros(indices.len(), d);
    let mut z = Array::zeros(indices.len(), m);
    let mut noise = Vec::with_capacity(indices.len());
    for (row, &idx) in indices.iter().enumerate() {
        let (mut setup, noise_rng) = sample_rngs(sample_seed(seed, idx, attempt));
        let (x0, z0) = chain.setup(&mut setup)?;
        x.row_mut(row).copy_from_slice(&x0);
        z.row_mut(row).copy_from_slice(&z0);
        noise.push(noise_rng);
    }
    let out = chain.run(x, &z, &mut noise)?;
    Ok((0..indices.len())
        .map(|row| match out.failed_at[row] {
            Some(step) => Err(step),
            None => Ok((out.x0.row(row).to_vec(), out.calls[row])),
        })
        .collect())
}

/// Plain classifier-free DDIM sampling, one sample at a time, with the same
/// per-sample random streams as [`guided_sample`] but no feedback and no
/// dropout. Serves as the reference the guided sampler must reduce to.
#[allow(clippy::too_many_arguments)]
pub fn cfg_sample(
    n: usize,
    y: usize,
    x_refs: &Array,
    gamma: f64,
    steps: usize,
    instance_conditioning: bool,
    clip_x0: Option<f64>,
    models: SamplerModels<'_>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array, SampleError> {
    if x_refs.rows() == 0 {
        return Err(SampleError::NoReferences(y));
    }
    let den = models.denoiser;
    let (d, m) = (den.shape.data_dim, den.shape.cond_dim);
    let ts = sched.strided_timesteps(steps);
    let mut out = Array::zeros(n, d);
    for i in 0..n {
        let (mut setup, mut noise) = sample_rngs(sample_seed(seed, i, 0));
        let mut x: Vec<f64> = (0..d).map(|_| setup.sample(StandardNormal)).collect();
        let r = setup.random_range(0..x_refs.rows());
        let z = if instance_conditioning {
            models.encoder.embed(&Array::row_vector(x_refs.row(r)))?
        } else {
            Array::zeros(1, m)
        };
        let null_z = Array::zeros(1, m);
        for (step, &t) in ts.iter().enumerate() {
            let xa = Array::row_vector(&x);
            let cond = den.predict(&xa, t, &[Some(y)], &z)?;
            let uncond = den.predict(&xa, t, &[None], &null_z)?;
            let mut eps = cfg_epsilon(uncond.data(), cond.data(), gamma);
            if let Some(c) = clip_x0 {
                clip_epsilon(&x, &mut eps, t, sched, c)?;
            }
            x = ddim_step(&x, &eps, t, ts.get(step + 1).copied(), sched, &mut noise)?;
        }
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// One cell of a guidance-scale grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub gamma: f64,
    pub omega: f64,
    pub batch: SampleBatch,
}

/// Samples every `(γ, ω)` pair with the same seed, row-major over `gammas`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_grid(
    gammas: &[f64],
    omegas: &[f64],
    n: usize,
    y: usize,
    x_refs: &Array,
    base: &GuidanceConfig,
    models: SamplerModels<'_>,
    sched: &NoiseSchedule,
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepCell>, SampleError> {
    if gammas.is_empty() || omegas.is_empty() {
        return Err(SampleError::Config("sweep needs at least one gamma and one omega".into()));
    }
    let mut cells = Vec::with_capacity(gammas.len() * omegas.len());
    for &gamma in gammas {
        for &omega in omegas {
            let cfg = GuidanceConfig { gamma, omega, ..base.clone() };
            let batch = guided_sample(n, y, x_refs, &cfg, models, sched, seed, jobs)?;
            cells.push(SweepCell { gamma, omega, batch });
        }
    }
    Ok(cells)
}

pub const SAMPLES_SCHEMA: &str = "fbgs-samples";
pub const SAMPLES_VERSION: u32 = 1;

/// Generated points with their labels, provenance seeds and guidance settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Array,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub omega: f64,
    pub criterion: Option<CriterionKind>,
}

impl SampleSet {
    pub fn empty(dim: usize, cfg: &GuidanceConfig) -> Self {
        Self {
            points: Array::zeros(0, dim),
            labels: vec![],
            seeds: vec![],
            gamma: cfg.gamma,
            omega: cfg.omega,
            criterion: cfg.criterion,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Appends a batch generated for class `y`.
    pub fn push(&mut self, y: usize, batch: &SampleBatch) {
        self.points = self.points.vstack(&batch.points).expect("matching sample dimension");
        self.labels.extend(std::iter::repeat_n(y, batch.points.rows()));
        self.seeds.extend(&batch.seeds);
    }

    /// Synthetic-split dataset with the given group tags.
    pub fn to_dataset(&self, classes: usize, group_classes: Vec<usize>, groups: Vec<usize>) -> Dataset {
        Dataset {
            points: self.points.clone(),
            labels: self.labels.clone(),
            groups,
            classes,
            group_classes,
            ids: (0..self.len()).map(|i| point_id(Split::Synthetic, i)).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let crit = self.criterion.map_or("none", CriterionKind::name);
        let _ = writeln!(
            out,
            "# {SAMPLES_SCHEMA} v{SAMPLES_VERSION} gamma={:?} omega={:?} criterion={crit}",
            self.gamma, self.omega
        );
        let mut header: Vec<String> = (1..=self.points.cols()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        header.push("seed".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            for v in self.points.row(i) {
                let _ = write!(out, "{v:?},");
            }
            let _ = writeln!(out, "{},{}", self.labels[i], self.seeds[i]);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| DataError::Schema { found: "<empty file>".into() })?;
        let meta = parse_schema_line(first, SAMPLES_SCHEMA, SAMPLES_VERSION).map_err(|found| DataError::Schema { found })?;
        let lookup = |key: &str| meta.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let bad = |line: usize, msg: String| DataError::Parse { line, msg };
        let num = |key: &str| -> Result<f64, DataError> {
            lookup(key).and_then(|v| v.parse().ok()).ok_or_else(|| bad(1, format!("missing {key}=")))
        };
        let (gamma, omega) = (num("gamma")?, num("omega")?);
        let criterion = match lookup("criterion") {
            Some("none") => None,
            Some(v) => Some(CriterionKind::parse(v).ok_or_else(|| bad(1, format!("unknown criterion `{v}`")))?),
            None => return Err(bad(1, "missing criterion=".into())),
        };
        let header = lines.next().ok_or_else(|| bad(2, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2..] != ["label", "seed"] {
            return Err(bad(2, format!("unexpected header `{header}`")));
        }
        let dim = cols.len() - 2;
        let (mut data, mut labels, mut seeds) = (vec![], vec![], vec![]);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let lineno = i + 3;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 2 {
                return Err(bad(lineno, format!("expected {} columns, found {}", dim + 2, f.len())));
            }
            for v in &f[..dim] {
                data.push(v.parse::<f64>().map_err(|_| bad(lineno, format!("bad number `{v}`")))?);
            }
            labels.push(f[dim].parse().map_err(|_| bad(lineno, format!("bad label `{}`", f[dim])))?);
            seeds.push(f[dim + 1].parse().map_err(|_| bad(lineno, format!("bad seed `{}`", f[dim + 1])))?);
        }
        let points = Array::from_vec(labels.len(), dim, data).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        Ok(Self { points, labels, seeds, gamma, omega, criterion })
    }
}
