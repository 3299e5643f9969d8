//! End-to-end experiment stages and their on-disk artifacts.
//!
//! `run` executes data → diffusion → classifier → stats → plan → unguided and
//! guided samples → retrain → evaluate, loading any stage whose outputs exist
//! unless forced. `sweep` and `ablate` reuse the same prerequisites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, load_diffusion, save_classifier, save_diffusion};
use crate::config::{ExperimentConfig, PlanLevel, SeedStage};
use crate::criteria::{compute_class_stats, evaluate_criterion, ClassStats, CriterionKind};
use crate::data::{
    balance_plan, dataset_from_csv, dataset_to_csv, gen_group_imbalanced, gen_longtail_2d, BalancePlan, BalanceTarget,
    DataError, Dataset, Split,
};
use crate::error::{read_text, write_file, Error, Result};
use crate::metrics::{
    density_coverage, frechet_distance, minority_mode_fraction, predictions_from_csv, predictions_to_csv,
    stratified_accuracy, worst_group_accuracy, StratifiedReport,
};
use crate::models::{Classifier, Denoiser, InstanceEncoder};
use crate::ndiff::Array;
use crate::plot::{grid_svg, three_panel_svg, Panel};
use crate::sampler::{guided_sample, GuidanceConfig, SampleSet, SamplerModels};
use crate::schedule::NoiseSchedule;
use crate::train::{train_classifier, train_denoiser};

pub const REPORT_VERSION: u32 = 1;
pub const STATS_VERSION: u32 = 1;
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Recompute stages even when their outputs exist.
    pub force: bool,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { force: false, jobs: 1 }
    }
}

/// File layout under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        };
        self.root.join("data").join(format!("{name}.csv"))
    }

    pub fn diffusion(&self) -> PathBuf {
        self.root.join("models/diffusion.ckpt")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("models/classifier.ckpt")
    }

    pub fn retrained(&self) -> PathBuf {
        self.root.join("models/retrained.ckpt")
    }

    pub fn stats(&self) -> PathBuf {
        self.root.join("models/stats.json")
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.root.join("samples").join(format!("{name}.csv"))
    }

    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{name}.csv"))
    }

    pub fn figure(&self) -> PathBuf {
        self.root.join("figures/samples.svg")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn schema(path: &Path, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.to_path_buf(), msg: msg.into() }
}

fn data_error(path: &Path, e: DataError) -> Error {
    match e {
        DataError::Schema { found } => schema(path, format!("found `{found}`")),
        other => Error::Other(format!("{}: {other}", path.display())),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, version: u32) -> Result<T> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema(path, e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_u64());
    if found != Some(version as u64) {
        return Err(schema(path, format!("version {found:?}, expected {version}")));
    }
    serde_json::from_value(value).map_err(|e| schema(path, e.to_string()))
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    dataset_from_csv(&read_text(path)?, split).map_err(|e| data_error(path, e))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, dataset_to_csv(ds))
}

pub fn load_samples(path: &Path) -> Result<SampleSet> {
    SampleSet::from_csv(&read_text(path)?).map_err(|e| data_error(path, e))
}

pub fn save_samples(path: &Path, set: &SampleSet) -> Result<()> {
    write_file(path, set.to_csv())
}

pub fn load_predictions(path: &Path) -> Result<Vec<usize>> {
    predictions_from_csv(&read_text(path)?).map_err(|e| data_error(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Draws train, validation and test sets in that order from the data seed.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SeedStage::Data));
    let d = &cfg.data;
    match (&d.toy, &d.groups) {
        (Some(t), None) => Ok(Splits {
            train: gen_longtail_2d(t, Split::Train, &mut rng)?,
            validation: gen_longtail_2d(&t.balanced(d.validation_per_group), Split::Validation, &mut rng)?,
            test: gen_longtail_2d(&t.balanced(d.test_per_group), Split::Test, &mut rng)?,
        }),
        (None, Some(g)) => Ok(Splits {
            train: gen_group_imbalanced(g, Split::Train, &mut rng)?,
            validation: gen_group_imbalanced(&g.uniform(d.validation_per_group), Split::Validation, &mut rng)?,
            test: gen_group_imbalanced(&g.uniform(d.test_per_group), Split::Test, &mut rng)?,
        }),
        _ => Err(Error::Config("exactly one of data.toy and data.groups must be set".into())),
    }
}

pub fn save_splits(art: &Artifacts, s: &Splits) -> Result<()> {
    save_dataset(&art.split(Split::Train), &s.train)?;
    save_dataset(&art.split(Split::Validation), &s.validation)?;
    save_dataset(&art.split(Split::Test), &s.test)
}

pub fn load_splits(art: &Artifacts) -> Result<Splits> {
    Ok(Splits {
        train: load_dataset(&art.split(Split::Train), Split::Train)?,
        validation: load_dataset(&art.split(Split::Validation), Split::Validation)?,
        test: load_dataset(&art.split(Split::Test), Split::Test)?,
    })
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::from_params(&cfg.schedule)?)
}

pub fn fit_diffusion(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Denoiser, InstanceEncoder)> {
    let tcfg = cfg.seeded(&cfg.train.denoiser, SeedStage::Diffusion);
    let m = train_denoiser(train, &cfg.denoiser, &cfg.encoder, &tcfg, &schedule(cfg)?)?;
    Ok((m.denoiser, m.encoder))
}

/// The real-only classifier.
pub fn fit_classifier(cfg: &ExperimentConfig, train: &Dataset) -> Result<Classifier> {
    let tcfg = cfg.seeded(&cfg.train.classifier, SeedStage::Classifier);
    Ok(train_classifier(train, None, &cfg.classifier, &tcfg)?.classifier)
}

/// Classifier trained on real data mixed with synthetic data. Shares the
/// initial classifier's seed.
pub fn fit_retrained(cfg: &ExperimentConfig, train: &Dataset, synth: &Dataset) -> Result<Classifier> {
    let tcfg = cfg.seeded(&cfg.train.retrain, SeedStage::Classifier);
    Ok(train_classifier(train, Some(synth), &cfg.classifier, &tcfg)?.classifier)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsFile {
    version: u32,
    k: usize,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<Vec<f64>>>,
    sigma_inv: Vec<Vec<Vec<f64>>>,
    logdet: Vec<f64>,
}

fn rows_of(a: &Array) -> Vec<Vec<f64>> {
    a.iter_rows().map(<[f64]>::to_vec).collect()
}

fn from_rows(path: &Path, rows: &[Vec<f64>], k: usize) -> Result<Array> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(schema(path, format!("expected {k}x{k} matrices")));
    }
    Ok(Array::from_fn(k, k, |i, j| rows[i][j]))
}

pub fn fit_stats(cfg: &ExperimentConfig, clf: &Classifier, train: &Dataset) -> Result<ClassStats> {
    let (_, emb) = clf.predict(&train.points)?;
    Ok(compute_class_stats(&emb, &train.labels, train.classes, cfg.metrics.regularization)?)
}

pub fn save_stats(path: &Path, s: &ClassStats) -> Result<()> {
    let file = StatsFile {
        version: STATS_VERSION,
        k: s.k,
        mu: s.mu.clone(),
        sigma: s.sigma.iter().map(rows_of).collect(),
        sigma_inv: s.sigma_inv.iter().map(rows_of).collect(),
        logdet: s.logdet.clone(),
    };
    write_file(path, to_json(&file))
}

pub fn load_stats(path: &Path) -> Result<ClassStats> {
    let f: StatsFile = read_json(path, STATS_VERSION)?;
    let sigma = f.sigma.iter().map(|m| from_rows(path, m, f.k)).collect::<Result<Vec<_>>>()?;
    let sigma_inv = f.sigma_inv.iter().map(|m| from_rows(path, m, f.k)).collect::<Result<Vec<_>>>()?;
    Ok(ClassStats { k: f.k, mu: f.mu, sigma, sigma_inv, logdet: f.logdet })
}

/// Samples of one class, conditioned on the class's real points or on one
/// group's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub class: usize,
    pub group: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub version: u32,
    pub balance: BalancePlan,
    pub requests: Vec<Request>,
}

pub fn make_plan(cfg: &ExperimentConfig, train: &Dataset) -> Result<SynthesisPlan> {
    let counts = match cfg.plan.level {
        PlanLevel::Class => train.class_counts(),
        PlanLevel::Group => train.group_counts(),
    };
    let t = cfg.plan.target.unwrap_or_else(|| counts.iter().copied().max().unwrap_or(0));
    let target = match cfg.plan.level {
        PlanLevel::Class => BalanceTarget::PerClass(t),
        PlanLevel::Group => BalanceTarget::PerGroup(t),
    };
    let balance = balance_plan(train, target);
    let requests = match (cfg.plan.pool, cfg.plan.level) {
        (PlanLevel::Class, _) => balance
            .per_class(&train.group_classes, train.classes)
            .into_iter()
            .enumerate()
            .filter(|(_, n)| *n > 0)
            .map(|(class, count)| Request { class, group: None, count })
            .collect(),
        (PlanLevel::Group, PlanLevel::Group) => balance
            .deficits
            .iter()
            .enumerate()
            .filter(|(_, n)| **n > 0)
            .map(|(g, &count)| Request { class: train.group_classes[g], group: Some(g), count })
            .collect(),
        (PlanLevel::Group, PlanLevel::Class) => {
            return Err(Error::Config("plan.pool = \"group\" needs plan.level = \"group\"".into()))
        }
    };
    Ok(SynthesisPlan { version: PLAN_VERSION, balance, requests })
}

pub fn per_class_requests(classes: usize, count: usize) -> Vec<Request> {
    (0..classes).map(|class| Request { class, group: None, count }).collect()
}

/// Seed of one request. Requests for the same class (or group) share a seed
/// across stages, so their samples coincide index by index.
pub fn request_seed(cfg: &ExperimentConfig, r: &Request) -> u64 {
    let key = match r.group {
        None => r.class as u64,
        Some(g) => (1 << 32) | g as u64,
    };
    mix(cfg.stage_seed(SeedStage::Sampling) ^ mix(key))
}

pub struct Trained<'a> {
    pub denoiser: &'a Denoiser,
    pub encoder: &'a InstanceEncoder,
    pub classifier: Option<&'a Classifier>,
    pub stats: Option<&'a ClassStats>,
}

impl Trained<'_> {
    fn sampler(&self) -> SamplerModels<'_> {
        SamplerModels { denoiser: self.denoiser, encoder: self.encoder, classifier: self.classifier, stats: self.stats }
    }
}

pub fn sample_requests(
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    requests: &[Request],
    train: &Dataset,
    models: &Trained<'_>,
    jobs: usize,
) -> Result<SampleSet> {
    let sched = schedule(cfg)?;
    let mut set = SampleSet::empty(train.dim(), guidance);
    for r in requests {
        let idx = match r.group {
            Some(g) => train.indices_of_group(g),
            None => train.indices_of_class(r.class),
        };
        let refs = train.points.select_rows(&idx);
        let batch = guided_sample(r.count, r.class, &refs, guidance, models.sampler(), &sched, request_seed(cfg, r), jobs)?;
        set.push(r.class, &batch);
    }
    Ok(set)
}

pub fn synthetic_dataset(cfg: &ExperimentConfig, set: &SampleSet, train: &Dataset) -> Dataset {
    let mut ds = set.to_dataset(train.classes, train.group_classes.clone(), vec![0; set.len()]);
    ds.groups = cfg.assign_groups(&ds);
    ds
}

/// The unguided baseline: the configured guidance with feedback and
/// embedding dropout off.
pub fn unguided(cfg: &ExperimentConfig) -> GuidanceConfig {
    GuidanceConfig { omega: 0.0, criterion: None, dropout_p: 0.0, ..cfg.guidance.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stratified: StratifiedReport,
    pub worst_group: f64,
    pub worst_group_id: usize,
}

pub fn evaluate_predictions(
    cfg: &ExperimentConfig,
    predictions: &[usize],
    test: &Dataset,
    train_class_counts: &[usize],
) -> Result<Evaluation> {
    let stratified = stratified_accuracy(predictions, test, train_class_counts, cfg.metrics.strata)?;
    let (worst_group, worst_group_id) = worst_group_accuracy(predictions, test)?;
    Ok(Evaluation { stratified, worst_group, worst_group_id })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeMetrics {
    pub samples: usize,
    /// Per class share of samples nearest a minority mode (toy data only).
    pub minority_fraction: Option<Vec<Option<f64>>>,
    pub frechet_raw: f64,
    pub frechet_embedding: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Sample quality against the real training set, in data space and in the
/// classifier's embedding space.
pub fn generative_metrics(cfg: &ExperimentConfig, set: &SampleSet, train: &Dataset, clf: &Classifier) -> Result<GenerativeMetrics> {
    let (_, real_emb) = clf.predict(&train.points)?;
    let (_, fake_emb) = clf.predict(&set.points)?;
    let (density, coverage) = density_coverage(&train.points, &set.points, cfg.metrics.knn_k)?;
    Ok(GenerativeMetrics {
        samples: set.len(),
        minority_fraction: cfg.data.toy.as_ref().map(|t| minority_mode_fraction(&set.points, &set.labels, t)),
        frechet_raw: frechet_distance(&train.points, &set.points)?,
        frechet_embedding: frechet_distance(&real_emb, &fake_emb)?,
        density,
        coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config: ExperimentConfig,
    pub train_group_counts: Vec<usize>,
    pub plan: SynthesisPlan,
    pub before: Evaluation,
    pub after: Evaluation,
    pub overall_change: f64,
    pub worst_group_change: f64,
    pub unguided: GenerativeMetrics,
    pub guided: GenerativeMetrics,
}

impl Report {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path, REPORT_VERSION)
    }
}

/// Loads a stage's output when present (and not forced), otherwise computes
/// and saves it. Errors carry the stage name.
fn stage<T>(
    name: &'static str,
    paths: &[PathBuf],
    opts: RunOptions,
    load: impl FnOnce() -> Result<T>,
    compute: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T) -> Result<()>,
) -> Result<T> {
    let inner = || {
        if !opts.force && paths.iter().all(|p| p.exists()) {
            return load();
        }
        let v = compute()?;
        save(&v)?;
        Ok(v)
    };
    inner().map_err(|e| e.in_stage(name))
}

/// Trained prerequisites shared by `run`, `sweep` and `ablate`.
pub struct Prepared {
    pub splits: Splits,
    pub denoiser: Denoiser,
    pub encoder: InstanceEncoder,
    pub classifier: Classifier,
    pub stats: ClassStats,
    pub plan: SynthesisPlan,
}

impl Prepared {
    pub fn models(&self) -> Trained<'_> {
        Trained {
            denoiser: &self.denoiser,
            encoder: &self.encoder,
            classifier: Some(&self.classifier),
            stats: Some(&self.stats),
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig, art: &Artifacts, opts: RunOptions) -> Result<Prepared> {
    cfg.validate()?;
    let split_paths = vec![art.split(Split::Train), art.split(Split::Validation), art.split(Split::Test)];
    let splits = stage("data", &split_paths, opts, || load_splits(art), || generate_data(cfg), |s| save_splits(art, s))?;
    let train = &splits.train;
    let (denoiser, encoder) = stage(
        "diffusion",
        &[art.diffusion()],
        opts,
        || load_diffusion(&art.diffusion()),
        || fit_diffusion(cfg, train),
        |(d, e)| save_diffusion(&art.diffusion(), d, e),
    )?;
    let classifier = stage(
        "classifier",
        &[art.classifier()],
        opts,
        || load_classifier(&art.classifier()),
        || fit_classifier(cfg, train),
        |c| save_classifier(&art.classifier(), c),
    )?;
    let stats = stage(
        "stats",
        &[art.stats()],
        opts,
        || load_stats(&art.stats()),
        || fit_stats(cfg, &classifier, train),
        |s| save_stats(&art.stats(), s),
    )?;
    let plan = stage(
        "plan",
        &[art.plan()],
        opts,
        || read_json(&art.plan(), PLAN_VERSION),
        || make_plan(cfg, train),
        |p| write_file(&art.plan(), to_json(p)),
    )?;
    Ok(Prepared { splits, denoiser, encoder, classifier, stats, plan })
}

fn panel_of(cfg: &ExperimentConfig, title: &str, ds: &Dataset) -> Panel {
    let offsets: Vec<usize> = match &cfg.data.toy {
        Some(t) => t.group_offsets(),
        None => (0..ds.classes).map(|k| ds.group_classes.iter().position(|&c| c == k).unwrap_or(0)).collect(),
    };
    let markers = ds.groups.iter().zip(&ds.labels).map(|(&g, &y)| g.saturating_sub(offsets[y])).collect();
    Panel::new(title, ds.points.clone(), ds.labels.clone(), markers)
}

/// The full pipeline. Returns the report written to `report.json`.
pub fn run(cfg: &ExperimentConfig, art: &Artifacts, opts: RunOptions) -> Result<Report> {
    let prep = prepare(cfg, art, opts)?;
    let train = &prep.splits.train;
    let test = &prep.splits.test;
    let models = prep.models();

    let n_metric = cfg.metrics.samples_per_class;
    let unguided_set = stage(
        "unguided",
        &[art.samples("unguided")],
        opts,
        || load_samples(&art.samples("unguided")),
        || sample_requests(cfg, &unguided(cfg), &per_class_requests(train.classes, n_metric), train, &models, opts.jobs),
        |s| save_samples(&art.samples("unguided"), s),
    )?;
    let guided_set = stage(
        "guided",
        &[art.samples("guided")],
        opts,
        || load_samples(&art.samples("guided")),
        || sample_requests(cfg, &cfg.guidance, &prep.plan.requests, train, &models, opts.jobs),
        |s| save_samples(&art.samples("guided"), s),
    )?;
    let synth = synthetic_dataset(cfg, &guided_set, train);
    let retrained = stage(
        "retrain",
        &[art.retrained()],
        opts,
        || load_classifier(&art.retrained()),
        || fit_retrained(cfg, train, &synth),
        |c| save_classifier(&art.retrained(), c),
    )?;

    let inner = || -> Result<Report> {
        let counts = train.class_counts();
        let before_pred = prep.classifier.predict_labels(&test.points)?;
        let after_pred = retrained.predict_labels(&test.points)?;
        write_file(&art.predictions("before"), predictions_to_csv(&before_pred))?;
        write_file(&art.predictions("after"), predictions_to_csv(&after_pred))?;
        let before = evaluate_predictions(cfg, &before_pred, test, &counts)?;
        let after = evaluate_predictions(cfg, &after_pred, test, &counts)?;
        let unguided_ds = synthetic_dataset(cfg, &unguided_set, train);
        let svg = three_panel_svg(
            &panel_of(cfg, "real", train),
            &panel_of(cfg, "unguided", &unguided_ds),
            &panel_of(cfg, "guided", &synth),
            &cfg.plot,
        )?;
        write_file(&art.figure(), svg)?;
        let report = Report {
            version: REPORT_VERSION,
            config: cfg.clone(),
            train_group_counts: train.group_counts(),
            plan: prep.plan.clone(),
            overall_change: after.stratified.overall - before.stratified.overall,
            worst_group_change: after.worst_group - before.worst_group,
            before,
            after,
            unguided: generative_metrics(cfg, &unguided_set, train, &prep.classifier)?,
            guided: generative_metrics(cfg, &guided_set, train, &prep.classifier)?,
        };
        write_file(&art.report(), report.to_json())?;
        Ok(report)
    };
    inner().map_err(|e| e.in_stage("evaluate"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub omega: f64,
    /// `None` on success, else the failure message.
    pub error: Option<String>,
    pub samples: usize,
    pub minority_fraction: Option<Vec<Option<f64>>>,
    /// Mean criterion of the final samples under the real-only classifier.
    pub mean_criterion: Option<f64>,
}

impl SweepRow {
    /// Smallest per-class minority fraction.
    pub fn worst_minority_fraction(&self) -> Option<f64> {
        let f = self.minority_fraction.as_ref()?;
        f.iter().map(|v| v.unwrap_or(0.0)).reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub version: u32,
    pub criterion: CriterionKind,
    pub rows: Vec<SweepRow>,
    /// Row with the largest worst-class minority fraction.
    pub best: Option<usize>,
}

fn mean_criterion(kind: CriterionKind, clf: &Classifier, stats: &ClassStats, set: &SampleSet) -> Result<f64> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in set.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut total = 0.0;
    for (y, idx) in by_class {
        total += evaluate_criterion(kind, clf, &set.points.select_rows(&idx), y, Some(stats))?.iter().sum::<f64>();
    }
    Ok(total / set.len().max(1) as f64)
}

fn cell_name(gamma: f64, omega: f64) -> String {
    format!("cell_g{gamma:?}_w{omega:?}")
}

/// Samples the configured γ×ω grid. A failing cell is recorded and skipped.
pub fn sweep(cfg: &ExperimentConfig, art: &Artifacts, opts: RunOptions) -> Result<SweepSummary> {
    let prep = prepare(cfg, art, opts)?;
    let train = &prep.splits.train;
    let models = prep.models();
    let requests = match cfg.sweep.samples_per_class {
        Some(n) => per_class_requests(train.classes, n),
        None => prep.plan.requests.clone(),
    };
    let dir = art.sweep_dir();
    let mut rows = vec![];
    let mut panels = vec![];
    for &gamma in &cfg.sweep.gammas {
        for &omega in &cfg.sweep.omegas {
            let g = GuidanceConfig { gamma, omega, criterion: Some(cfg.sweep.criterion), ..cfg.guidance.clone() };
            let name = cell_name(gamma, omega);
            let cell = || -> Result<SampleSet> {
                let set = sample_requests(cfg, &g, &requests, train, &models, opts.jobs)?;
                save_samples(&dir.join(format!("{name}.csv")), &set)?;
                Ok(set)
            };
            let title = format!("γ={gamma} ω={omega}");
            match cell() {
                Ok(set) => {
                    let ds = synthetic_dataset(cfg, &set, train);
                    panels.push(panel_of(cfg, &title, &ds));
                    rows.push(SweepRow {
                        gamma,
                        omega,
                        error: None,
                        samples: set.len(),
                        minority_fraction: cfg.data.toy.as_ref().map(|t| minority_mode_fraction(&set.points, &set.labels, t)),
                        mean_criterion: mean_criterion(cfg.sweep.criterion, &prep.classifier, &prep.stats, &set).ok(),
                    });
                }
                Err(e) => {
                    panels.push(Panel::new(format!("{title} (failed)"), Array::zeros(0, 2), vec![], vec![]));
                    rows.push(SweepRow { gamma, omega, error: Some(e.to_string()), samples: 0, minority_fraction: None, mean_criterion: None });
                }
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(f) = r.worst_minority_fraction().filter(|_| r.error.is_none()) {
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((i, f));
            }
        }
    }
    let summary = SweepSummary { version: REPORT_VERSION, criterion: cfg.sweep.criterion, rows, best: best.map(|b| b.0) };
    write_file(&dir.join("summary.csv"), sweep_csv(&summary, train.classes))?;
    write_file(&dir.join("summary.json"), to_json(&summary))?;
    write_file(&dir.join("montage.svg"), grid_svg(&panels, cfg.sweep.omegas.len(), &cfg.plot)?)?;
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn sweep_csv(s: &SweepSummary, classes: usize) -> String {
    let mut out = format!("# fbgs-sweep v{REPORT_VERSION} criterion={}\n", s.criterion.name());
    out.push_str("gamma,omega,status,samples");
    for c in 0..classes {
        let _ = write!(out, ",minority_fraction_{c}");
    }
    out.push_str(",mean_criterion,best\n");
    for (i, r) in s.rows.iter().enumerate() {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = write!(out, "{:?},{:?},{status},{}", r.gamma, r.omega, r.samples);
        for c in 0..classes {
            let f = r.minority_fraction.as_ref().and_then(|f| f.get(c).copied().flatten());
            let _ = write!(out, ",{}", opt(f));
        }
        let _ = writeln!(out, ",{},{}", opt(r.mean_criterion), s.best == Some(i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub error: Option<String>,
    pub frechet_raw: Option<f64>,
    pub frechet_embedding: Option<f64>,
    pub density: Option<f64>,
    pub coverage: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub worst_group_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub rows: Vec<AblationRow>,
}

/// The ablation matrix: class conditioning alone, then instance
/// conditioning, embedding dropout and each feedback criterion added in turn.
pub fn ablation_matrix(cfg: &ExperimentConfig) -> Vec<(String, GuidanceConfig)> {
    let a = &cfg.ablate;
    let cond = GuidanceConfig { instance_conditioning: false, dropout_p: 0.0, criterion: None, omega: 0.0, ..cfg.guidance.clone() };
    let inst = GuidanceConfig { instance_conditioning: true, ..cond.clone() };
    let drop = GuidanceConfig { dropout_p: a.dropout_p, ..inst.clone() };
    let mut rows = vec![("cond-only".to_string(), cond), ("+instance".into(), inst), ("+dropout".into(), drop.clone())];
    for (name, kind) in [("+Loss", CriterionKind::Loss), ("+Hardness", CriterionKind::Hardness), ("+Entropy", CriterionKind::Entropy)] {
        rows.push((name.into(), GuidanceConfig { criterion: Some(kind), omega: a.omega, ..drop.clone() }));
    }
    rows
}

pub fn ablate(cfg: &ExperimentConfig, art: &Artifacts, opts: RunOptions) -> Result<AblationReport> {
    let prep = prepare(cfg, art, opts)?;
    let train = &prep.splits.train;
    let test = &prep.splits.test;
    let models = prep.models();
    let mut rows = vec![];
    for (name, g) in ablation_matrix(cfg) {
        let row = || -> Result<AblationRow> {
            let small = sample_requests(cfg, &g, &per_class_requests(train.classes, cfg.ablate.samples_per_class), train, &models, opts.jobs)?;
            let m = generative_metrics(cfg, &small, train, &prep.classifier)?;
            let (mut overall, mut wga) = (None, None);
            if cfg.ablate.retrain {
                let set = sample_requests(cfg, &g, &prep.plan.requests, train, &models, opts.jobs)?;
                let clf = fit_retrained(cfg, train, &synthetic_dataset(cfg, &set, train))?;
                let e = evaluate_predictions(cfg, &clf.predict_labels(&test.points)?, test, &train.class_counts())?;
                overall = Some(e.stratified.overall);
                wga = Some(e.worst_group);
            }
            Ok(AblationRow {
                name: name.clone(),
                error: None,
                frechet_raw: Some(m.frechet_raw),
                frechet_embedding: Some(m.frechet_embedding),
                density: Some(m.density),
                coverage: Some(m.coverage),
                overall_accuracy: overall,
                worst_group_accuracy: wga,
            })
        };
        rows.push(row().unwrap_or_else(|e| AblationRow {
            name: name.clone(),
            error: Some(e.to_string()),
            frechet_raw: None,
            frechet_embedding: None,
            density: None,
            coverage: None,
            overall_accuracy: None,
            worst_group_accuracy: None,
        }));
    }
    let report = AblationReport { version: REPORT_VERSION, rows };
    let dir = art.ablate_dir();
    write_file(&dir.join("ablation.json"), to_json(&report))?;
    write_file(&dir.join("ablation.csv"), ablation_csv(&report))?;
    Ok(report)
}

fn ablation_csv(r: &AblationReport) -> String {
    let mut out = format!("# fbgs-ablation v{REPORT_VERSION}\n");
    out.push_str("config,status,frechet_raw,frechet_embedding,density,coverage,overall_accuracy,worst_group_accuracy\n");
    for row in &r.rows {
        let status = if row.error.is_some() { "failed" } else { "ok" };
        let _ = writeln!(
            out,
            "{},{status},{},{},{},{},{},{}",
            row.name,
            opt(row.frechet_raw),
            opt(row.frechet_embedding),
            opt(row.density),
            opt(row.coverage),
            opt(row.overall_accuracy),
            opt(row.worst_group_accuracy)
        );
    }
    out
}

pub fn load_evaluation_inputs(art: &Artifacts) -> Result<(Dataset, Dataset)> {
    Ok((load_dataset(&art.split(Split::Train), Split::Train)?, load_dataset(&art.split(Split::Test), Split::Test)?))
}

pub fn load_plan(art: &Artifacts) -> Result<SynthesisPlan> {
    read_json(&art.plan(), PLAN_VERSION)
}

pub fn save_plan(art: &Artifacts, plan: &SynthesisPlan) -> Result<()> {
    write_file(&art.plan(), to_json(plan))
}

pub fn load_predictions_for(path: &Path, test: &Dataset) -> Result<Vec<usize>> {
    let p = load_predictions(path)?;
    if p.len() != test.len() {
        return Err(schema(path, format!("{} predictions for {} test points", p.len(), test.len())));
    }
    Ok(p)
}

pub fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_file(path, to_json(v))
}
