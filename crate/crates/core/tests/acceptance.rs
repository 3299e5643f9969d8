//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use fbgs::checkpoint::{load_classifier, load_diffusion};
use fbgs::config::ExperimentConfig;
use fbgs::criteria::{
    compute_class_stats, criterion_grad, criterion_hardness, evaluate_criterion, ClassStats, CriterionKind,
    GuidanceContext, Regularization,
};
use fbgs::data::{dataset_from_csv, Split};
use fbgs::metrics::{density_coverage, frechet_distance, mean_pairwise_distance};
use fbgs::models::{Activation, Classifier, ClassifierShape, Denoiser, DenoiserShape, Module};
use fbgs::ndiff::Array;
use fbgs::pipeline::{self, Artifacts, Report, RunOptions};
use fbgs::sampler::{cfg_sample, guided_sample, GuidanceConfig, SampleBatch, SamplerModels};
use fbgs::schedule::NoiseSchedule;
use fbgs::train::{balanced_softmax_loss, make_balanced_batches};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, StudentsT};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: &'static str, pass: bool, detail: String) {
    println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

struct SeedRun {
    report: Report,
    best_fraction: Vec<f64>,
    best_cell: (f64, f64),
    seconds: f64,
    unguided_seconds: f64,
}

fn seed_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed, out_dir: "acceptance".into(), ..Default::default() }
}

fn run_seed(seed: u64, root: &Path) -> SeedRun {
    let cfg = seed_config(seed);
    let art = Artifacts::new(root.join(format!("seed{seed}")));
    let opts = RunOptions { force: true, jobs: 1 };
    let start = Instant::now();
    let prep = pipeline::prepare(&cfg, &art, opts).expect("prepare");
    let train = &prep.splits.train;
    let requests = pipeline::per_class_requests(train.classes, cfg.metrics.samples_per_class);
    pipeline::sample_requests(&cfg, &pipeline::unguided(&cfg), &requests, train, &prep.models(), 1).expect("unguided");
    let unguided_seconds = start.elapsed().as_secs_f64();
    let report = pipeline::run(&cfg, &art, RunOptions { force: false, jobs: 1 }).expect("run");
    let seconds = start.elapsed().as_secs_f64();
    let sweep = pipeline::sweep(&cfg, &art, RunOptions { force: false, jobs: 4 }).expect("sweep");
    let best = &sweep.rows[sweep.best.expect("sweep has a best cell")];
    let best_fraction = best.minority_fraction.clone().unwrap().into_iter().map(|f| f.unwrap()).collect();
    SeedRun { report, best_fraction, best_cell: (best.gamma, best.omega), seconds, unguided_seconds }
}

fn fractions(report_side: &pipeline::GenerativeMetrics) -> Vec<f64> {
    report_side.minority_fraction.clone().unwrap().into_iter().map(|f| f.unwrap()).collect()
}

fn toy_reproduction(out: &mut Vec<Outcome>, runs: &[SeedRun]) {
    let mut ok_a = true;
    let mut detail_a = vec![];
    for (s, r) in runs.iter().enumerate() {
        let f = fractions(&r.report.unguided);
        let n = r.report.unguided.samples;
        ok_a &= n >= 1000 && f.iter().all(|v| (v - 0.10).abs() <= 0.05);
        detail_a.push(format!("seed {s}: {f:.3?}"));
    }
    let t_a = runs[0].unguided_seconds;
    ok_a &= t_a <= 120.0;
    record(
        out,
        "1a",
        ok_a,
        format!("unguided minority fraction within 0.10±0.05 per class, {}; train+sample {t_a:.1}s (≤120s)", detail_a.join(", ")),
    );

    let mut ok_b = true;
    let mut detail_b = vec![];
    for (s, r) in runs.iter().enumerate() {
        let base = fractions(&r.report.unguided);
        let ratio: Vec<f64> = r.best_fraction.iter().zip(&base).map(|(g, u)| g / u).collect();
        ok_b &= ratio.iter().all(|q| *q >= 2.0);
        detail_b.push(format!(
            "seed {s} (γ={}, ω={}): {:.3?} ratios {:.2?}",
            r.best_cell.0, r.best_cell.1, r.best_fraction, ratio
        ));
    }
    record(out, "1b", ok_b, format!("best-cell guided fraction ≥ 2× unguided; {}", detail_b.join("; ")));

    let n = runs.len() as f64;
    let d_wga = runs.iter().map(|r| r.report.worst_group_change).sum::<f64>() / n;
    let d_all = runs.iter().map(|r| r.report.overall_change).sum::<f64>() / n;
    let total: f64 = runs.iter().map(|r| r.seconds).sum();
    let per: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}->{:.3}", r.report.before.worst_group, r.report.after.worst_group))
        .collect();
    record(
        out,
        "1c",
        d_wga >= 0.10 && d_all >= -0.02 && total <= 600.0,
        format!(
            "mean worst-group gain {d_wga:+.4} (≥+0.10), mean overall change {d_all:+.4} (≥-0.02) over {} seeds [{}]; {total:.0}s (≤600s)",
            runs.len(),
            per.join(", ")
        ),
    );
}

struct Flagship {
    cfg: ExperimentConfig,
    denoiser: Denoiser,
    encoder: fbgs::models::InstanceEncoder,
    classifier: Classifier,
    stats: ClassStats,
    train: fbgs::data::Dataset,
    sched: NoiseSchedule,
}

impl Flagship {
    fn load(root: &Path) -> Self {
        let cfg = seed_config(0);
        let art = Artifacts::new(root.join("seed0"));
        let (denoiser, encoder) = load_diffusion(&art.diffusion()).unwrap();
        let classifier = load_classifier(&art.classifier()).unwrap();
        let stats = pipeline::load_stats(&art.stats()).unwrap();
        let text = std::fs::read_to_string(art.split(Split::Train)).unwrap();
        let train = dataset_from_csv(&text, Split::Train).unwrap();
        let sched = NoiseSchedule::from_params(&cfg.schedule).unwrap();
        Self { cfg, denoiser, encoder, classifier, stats, train, sched }
    }

    fn models(&self) -> SamplerModels<'_> {
        SamplerModels {
            denoiser: &self.denoiser,
            encoder: &self.encoder,
            classifier: Some(&self.classifier),
            stats: Some(&self.stats),
        }
    }

    fn refs(&self, y: usize) -> Array {
        self.train.points.select_rows(&self.train.indices_of_class(y))
    }
}

fn reduction_identity(out: &mut Vec<Outcome>, f: &Flagship) {
    let mut mismatches = 0;
    let mut compared = 0;
    for seed in 0..100u64 {
        let y = (seed % 2) as usize;
        let inst = seed % 4 < 2;
        let cfg = GuidanceConfig {
            omega: 0.0,
            dropout_p: 0.0,
            eta: 0.0,
            instance_conditioning: inst,
            criterion: Some(CriterionKind::Entropy),
            ..f.cfg.guidance.clone()
        };
        let refs = f.refs(y);
        let a = guided_sample(4, y, &refs, &cfg, f.models(), &f.sched, seed, 1).unwrap();
        let b = cfg_sample(4, y, &refs, cfg.gamma, cfg.steps, inst, cfg.clip_x0, f.models(), &f.sched, seed).unwrap();
        compared += b.len();
        let same = a.points.shape() == b.shape()
            && a.points.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    record(
        out,
        "2",
        mismatches == 0,
        format!("feedback sampler at ω=0, p=0, η=0 vs plain CFG sampler: {mismatches} of 100 seeds differ ({compared} coordinates compared bitwise)"),
    );
}

/// Values of one criterion for the samples present in `batch`, keyed by index.
fn criterion_by_index(kind: CriterionKind, f: &Flagship, batch: &SampleBatch, n: usize, y: usize) -> Vec<Option<f64>> {
    let vals = evaluate_criterion(kind, &f.classifier, &batch.points, y, Some(&f.stats)).unwrap();
    let mut out = vec![None; n];
    let kept: Vec<usize> = (0..n).filter(|i| !batch.dropped.contains(i)).collect();
    for (i, v) in kept.into_iter().zip(vals) {
        out[i] = Some(v);
    }
    out
}

fn monotonicity(out: &mut Vec<Outcome>, f: &Flagship) {
    let omega = f.cfg.guidance.omega;
    let mut ok = true;
    let mut parts = vec![];
    for kind in [CriterionKind::Loss, CriterionKind::Hardness, CriterionKind::Entropy] {
        let mut diffs = vec![];
        let (mut m0, mut m1) = (0.0, 0.0);
        for y in 0..2 {
            let n = 100;
            let refs = f.refs(y);
            let base = GuidanceConfig { criterion: Some(kind), ..f.cfg.guidance.clone() };
            let g0 = guided_sample(n, y, &refs, &GuidanceConfig { omega: 0.0, ..base.clone() }, f.models(), &f.sched, 900 + y as u64, 4).unwrap();
            let g1 = guided_sample(n, y, &refs, &base, f.models(), &f.sched, 900 + y as u64, 4).unwrap();
            let c0 = criterion_by_index(kind, f, &g0, n, y);
            let c1 = criterion_by_index(kind, f, &g1, n, y);
            for (a, b) in c0.iter().zip(&c1) {
                if let (Some(a), Some(b)) = (a, b) {
                    diffs.push(b - a);
                    m0 += a;
                    m1 += b;
                }
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let t = mean / (var / n).sqrt();
        let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
        let pass = mean > 0.0 && p < 0.01;
        ok &= pass;
        parts.push(format!("{} {:.4}->{:.4} (n={}, t={t:.2}, p={p:.1e})", kind.name(), m0 / n, m1 / n, diffs.len()));
    }
    record(out, "3", ok, format!("paired one-sided t-test ω=0 vs ω={omega}, p<0.01: {}", parts.join("; ")));
}

fn perturbed<M: Module>(m: &mut M, scale: f64, rng: &mut ChaCha8Rng) {
    for a in m.tensors_mut() {
        for v in a.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn gradient_correctness(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let sched = NoiseSchedule::from_params(&Default::default()).unwrap();
    let mut den = Denoiser::init(
        DenoiserShape { activation: Activation::Tanh, hidden: vec![16, 16], ..Default::default() },
        &mut rng,
    );
    perturbed(&mut den, 0.3, &mut rng);
    let mut clf = Classifier::init(ClassifierShape { hidden: vec![12], embed_dim: 4, ..Default::default() }, &mut rng);
    perturbed(&mut clf, 0.5, &mut rng);
    let probe = Array::from_fn(200, 2, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let (_, emb) = clf.predict(&probe).unwrap();
    let stats = compute_class_stats(&emb, &labels, 2, Regularization::default()).unwrap();
    let ctx = GuidanceContext { denoiser: &den, classifier: &clf, stats: Some(&stats), sched: &sched, gamma: 1.5, through_denoiser: true };
    let (mut worst_rel, mut worst_abs, mut resolved): (f64, f64, usize) = (0.0, 0.0, 0);
    let h = 1e-3;
    for _ in 0..50 {
        let t = rng.random_range(0..sched.len());
        let y = rng.random_range(0..2);
        let x = Array::from_fn(1, 2, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let z = Array::from_fn(1, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        for kind in [CriterionKind::Loss, CriterionKind::Entropy, CriterionKind::Hardness] {
            let g = criterion_grad(&ctx, &x, t, y, &z, kind).unwrap().grad;
            let value = |p: &Array| criterion_grad(&ctx, p, t, y, &z, kind).unwrap().value[0];
            let central = |j: usize, h: f64| {
                let (mut hi, mut lo) = (x.clone(), x.clone());
                hi.data_mut()[j] += h;
                lo.data_mut()[j] -= h;
                (value(&hi) - value(&lo)) / (2.0 * h)
            };
            // Richardson extrapolation of two central differences, O(h^4).
            let num: Vec<f64> = (0..2).map(|j| (4.0 * central(j, h / 2.0) - central(j, h)) / 3.0).collect();
            let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let abs = g.data().iter().zip(&num).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if scale >= 1e-4 {
                resolved += 1;
                worst_rel = worst_rel.max(abs / scale);
            } else {
                worst_abs = worst_abs.max(abs);
            }
        }
    }
    record(
        out,
        "4",
        worst_rel < 1e-5 && worst_abs < 1e-9 && resolved >= 100,
        format!(
            "criterion gradient vs extrapolated central differences at 50 points × 3 criteria: max relative error {worst_rel:.2e} (<1e-5) over {resolved} points with |grad| >= 1e-4; max absolute error {worst_abs:.2e} (<1e-9) on the rest"
        ),
    );
}

fn brute_density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let radius: Vec<f64> = real
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = real.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| dist(r, s)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut count = 0;
    for f in fake {
        for (r, rad) in real.iter().zip(&radius) {
            if dist(f, r) <= *rad {
                count += 1;
            }
        }
    }
    let covered = real.iter().zip(&radius).filter(|(r, rad)| fake.iter().any(|f| dist(f, r) <= **rad)).count();
    let density = if fake.is_empty() { 0.0 } else { count as f64 / (k * fake.len()) as f64 };
    (density, covered as f64 / real.len() as f64)
}

/// Closed-form Fréchet distance between 2-D Gaussians: for 2×2 matrices with
/// positive eigenvalues, `tr √M = √(tr M + 2 √det M)`.
fn frechet_2d(mu_a: [f64; 2], sa: [[f64; 2]; 2], mu_b: [f64; 2], sb: [[f64; 2]; 2]) -> f64 {
    let m = [
        [sa[0][0] * sb[0][0] + sa[0][1] * sb[1][0], sa[0][0] * sb[0][1] + sa[0][1] * sb[1][1]],
        [sa[1][0] * sb[0][0] + sa[1][1] * sb[1][0], sa[1][0] * sb[0][1] + sa[1][1] * sb[1][1]],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let tr_sqrt = (m[0][0] + m[1][1] + 2.0 * det.sqrt()).sqrt();
    (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2) + sa[0][0] + sa[1][1] + sb[0][0] + sb[1][1] - 2.0 * tr_sqrt
}

fn gaussian_sample(n: usize, mu: [f64; 2], cov: [[f64; 2]; 2], rng: &mut ChaCha8Rng) -> Array {
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (cov[1][1] - l10 * l10).sqrt();
    let mut a = Array::zeros(n, 2);
    for i in 0..n {
        let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        a.row_mut(i).copy_from_slice(&[mu[0] + l00 * u, mu[1] + l10 * u + l11 * v]);
    }
    a
}

fn metric_oracles(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut mismatches = 0;
    for _ in 0..200 {
        let nr = rng.random_range(2..=20);
        let nf = rng.random_range(0..=20);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..nr);
        // coarse grid coordinates make exact ties on ball boundaries common
        let mut pt = || -> Vec<f64> { (0..d).map(|_| rng.random_range(-3..=3) as f64 * 0.5).collect() };
        let real: Vec<Vec<f64>> = (0..nr).map(|_| pt()).collect();
        let fake: Vec<Vec<f64>> = (0..nf).map(|_| pt()).collect();
        let expected = brute_density_coverage(&real, &fake, k);
        let ra = Array::from_rows(&real, d).unwrap();
        let fa = Array::from_rows(&fake, d).unwrap();
        if density_coverage(&ra, &fa, k).unwrap() != expected {
            mismatches += 1;
        }
    }
    let (mu_a, sa) = ([0.0, 0.0], [[1.0, 0.0], [0.0, 2.0]]);
    let (mu_b, sb) = ([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]]);
    let exact = frechet_2d(mu_a, sa, mu_b, sb);
    let a = gaussian_sample(10_000, mu_a, sa, &mut rng);
    let b = gaussian_sample(10_000, mu_b, sb, &mut rng);
    let est = frechet_distance(&a, &b).unwrap();
    let rel = (est - exact).abs() / exact;
    let same = frechet_distance(&a, &a).unwrap();
    record(
        out,
        "5",
        mismatches == 0 && rel < 0.05 && same.abs() < 1e-8,
        format!(
            "density/coverage vs brute force: {mismatches} of 200 differ; Fréchet n=1e4 {est:.4} vs closed form {exact:.4} (rel {rel:.3}, <0.05); identical sets {same:.1e} (<1e-8)"
        ),
    );
}

fn stats_2d(mu: [f64; 2], s: [[f64; 2]; 2]) -> ClassStats {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let arr = |m: [[f64; 2]; 2]| Array::from_fn(2, 2, |i, j| m[i][j]);
    ClassStats { k: 2, mu: vec![mu.to_vec()], sigma: vec![arr(s)], sigma_inv: vec![arr(inv)], logdet: vec![det.ln()] }
}

fn hardness_closed_form(out: &mut Vec<Outcome>) {
    let mu = [0.7, -1.3];
    let at_mean = criterion_hardness(&mu, 0, &stats_2d(mu, [[1.0, 0.0], [0.0, 1.0]])).unwrap();
    let err = (at_mean - (2.0 * std::f64::consts::PI).ln()).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = [[a.cos(), -a.sin()], [a.sin(), a.cos()]];
        let rot = |v: [f64; 2]| [r[0][0] * v[0] + r[0][1] * v[1], r[1][0] * v[0] + r[1][1] * v[1]];
        let (l1, l2, c): (f64, f64, f64) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(-0.4..0.4));
        let s = [[l1, c * (l1 * l2).sqrt()], [c * (l1 * l2).sqrt(), l2]];
        // R S Rᵀ
        let rs = [[r[0][0] * s[0][0] + r[0][1] * s[1][0], r[0][0] * s[0][1] + r[0][1] * s[1][1]], [r[1][0] * s[0][0] + r[1][1] * s[1][0], r[1][0] * s[0][1] + r[1][1] * s[1][1]]];
        let rsr = [[rs[0][0] * r[0][0] + rs[0][1] * r[0][1], rs[0][0] * r[1][0] + rs[0][1] * r[1][1]], [rs[1][0] * r[0][0] + rs[1][1] * r[0][1], rs[1][0] * r[1][0] + rs[1][1] * r[1][1]]];
        let m = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let e = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let h0 = criterion_hardness(&e, 0, &stats_2d(m, s)).unwrap();
        let h1 = criterion_hardness(&rot(e), 0, &stats_2d(rot(m), rsr)).unwrap();
        worst = worst.max((h0 - h1).abs());
    }
    record(
        out,
        "6",
        err <= 1e-12 && worst <= 1e-9,
        format!("hardness at μ with Σ=I, k=2 differs from ln 2π by {err:.1e} (≤1e-12); max rotation change {worst:.1e} (≤1e-9)"),
    );
}

fn balanced_softmax(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = rng.random_range(0..k);
        let n = rng.random_range(1..500);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ce = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y];
        worst = worst.max((balanced_softmax_loss(&z, y, &vec![n; k], 1.0).unwrap() - ce).abs());
    }
    let hand = balanced_softmax_loss(&[0.0, 0.0], 1, &[90, 10], 1.0).unwrap();
    let herr = (hand - 10f64.ln()).abs();
    record(
        out,
        "7",
        worst <= 1e-12 && herr <= 1e-12,
        format!("uniform counts vs cross-entropy: max diff {worst:.1e} over 100 cases (≤1e-12); z=(0,0), n=(90,10), y=1 gives {hand:.12} vs ln 10 (diff {herr:.1e})"),
    );
}

fn dropout_diversity(out: &mut Vec<Outcome>, f: &Flagship) {
    let idx = f.train.indices_of_class(0);
    let one = f.train.points.select_rows(&idx[..1]);
    let spread = |p: f64| {
        let cfg = GuidanceConfig { omega: 0.0, criterion: None, instance_conditioning: true, dropout_p: p, ..f.cfg.guidance.clone() };
        let b = guided_sample(200, 0, &one, &cfg, f.models(), &f.sched, 808, 4).unwrap();
        (mean_pairwise_distance(&b.points), b.points.rows())
    };
    let ((d0, n0), (d5, n5)) = (spread(0.0), spread(0.5));
    record(
        out,
        "8",
        d5 > d0 && n0 == 200 && n5 == 200,
        format!("mean pairwise distance with one reference: p=0 {d0:.4}, p=0.5 {d5:.4}"),
    );
}

fn protocol_fidelity(out: &mut Vec<Outcome>, f: &Flagship, root: &Path) {
    let cfg = GuidanceConfig { steps: 30, period: 5, ..f.cfg.guidance.clone() };
    let b = guided_sample(20, 1, &f.refs(1), &cfg, f.models(), &f.sched, 3, 2).unwrap();
    let calls_ok = b.criterion_calls.iter().all(|&c| c == 6) && b.criterion_calls.len() == b.points.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batches = make_balanced_batches(2000, 1600, 128, 0.5, &mut rng).unwrap();
    let split_ok = batches.iter().all(|m| m.real.len() == 64 && m.synthetic.len() == 64);
    let cfg0 = seed_config(0);
    let ab = pipeline::ablate(&cfg0, &Artifacts::new(root.join("seed0")), RunOptions { force: false, jobs: 4 }).unwrap();
    let names: Vec<&str> = ab.rows.iter().map(|r| r.name.as_str()).collect();
    let rows_ok = names == ["cond-only", "+instance", "+dropout", "+Loss", "+Hardness", "+Entropy"] && ab.rows.iter().all(|r| r.error.is_none());
    record(
        out,
        "9",
        calls_ok && split_ok && rows_ok,
        format!(
            "criterion calls per sample {:?} (expect 6); {} batches all 64/64 real/synthetic: {split_ok}; ablation rows {names:?}",
            b.criterion_calls.iter().copied().collect::<std::collections::BTreeSet<_>>(),
            batches.len()
        ),
    );
}

fn determinism(out: &mut Vec<Outcome>, root: &Path) {
    let cfg = seed_config(0);
    let a = Artifacts::new(root.join("seed0"));
    let b = Artifacts::new(root.join("repeat0"));
    pipeline::run(&cfg, &b, RunOptions { force: true, jobs: 3 }).unwrap();
    let same = |p: &Path, q: &Path| std::fs::read(p).unwrap() == std::fs::read(q).unwrap();
    let report = same(&a.report(), &b.report());
    let figure = same(&a.figure(), &b.figure());
    record(out, "10", report && figure, format!("second full run: report identical {report}, figure identical {figure}"));
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut out = vec![];
    let runs: Vec<SeedRun> = (0..5).map(|s| run_seed(s, root.path())).collect();
    toy_reproduction(&mut out, &runs);
    let flagship = Flagship::load(root.path());
    reduction_identity(&mut out, &flagship);
    monotonicity(&mut out, &flagship);
    gradient_correctness(&mut out);
    metric_oracles(&mut out);
    hardness_closed_form(&mut out);
    balanced_softmax(&mut out);
    dropout_diversity(&mut out, &flagship);
    protocol_fidelity(&mut out, &flagship, root.path());
    determinism(&mut out, root.path());
    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {} of {} criteria pass", out.len() - failed.len(), out.len());
    if !failed.is_empty() {
        for o in out.iter().filter(|o| !o.pass) {
            eprintln!("failed {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
