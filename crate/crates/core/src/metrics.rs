//! Accuracy breakdowns and generative-sample quality metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{parse_schema_line, DataError, Dataset, ToySpec};
use crate::ndiff::Array;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("need more than {dim} points per set, got {got}")]
    TooFewPoints { dim: usize, got: usize },
    #[error("k = {k} requires more than k real points, got {n}")]
    BadK { k: usize, n: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("matrix square root did not converge")]
    NoConvergence,
    #[error("{0} predictions for {1} test points")]
    PredictionCount(usize, usize),
    #[error("empty test set")]
    Empty,
}

/// Class-count strata: `Many` above `hi`, `Medium` in `[lo, hi]`, `Few` below `lo`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrataThresholds {
    pub hi: usize,
    pub lo: usize,
}

impl Default for StrataThresholds {
    fn default() -> Self {
        Self { hi: 100, lo: 20 }
    }
}

impl StrataThresholds {
    pub fn stratum(&self, train_count: usize) -> &'static str {
        if train_count > self.hi {
            "many"
        } else if train_count >= self.lo {
            "medium"
        } else {
            "few"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    /// Fraction of correct test points.
    pub overall: f64,
    /// Mean per-class accuracy within each stratum; strata without classes are absent.
    pub strata: BTreeMap<String, f64>,
    pub per_class: Vec<Option<f64>>,
    pub class_strata: Vec<String>,
    pub per_group: Vec<Option<f64>>,
    pub thresholds: StrataThresholds,
}

fn check_predictions(predictions: &[usize], test: &Dataset) -> Result<(), MetricError> {
    if test.is_empty() {
        return Err(MetricError::Empty);
    }
    if predictions.len() != test.len() {
        return Err(MetricError::PredictionCount(predictions.len(), test.len()));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len().max(1) as f64
}

fn tally(keys: &[usize], correct: impl Fn(usize) -> bool, buckets: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; buckets];
    let mut totals = vec![0usize; buckets];
    for (i, &k) in keys.iter().enumerate() {
        totals[k] += 1;
        if correct(i) {
            hits[k] += 1;
        }
    }
    hits.iter().zip(&totals).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect()
}

/// Within-group accuracy for every group id; `None` for groups absent from `test`.
pub fn group_accuracies(predictions: &[usize], test: &Dataset) -> Result<Vec<Option<f64>>, MetricError> {
    check_predictions(predictions, test)?;
    Ok(tally(&test.groups, |i| predictions[i] == test.labels[i], test.group_count()))
}

/// Strata are assigned from the training class counts.
pub fn stratified_accuracy(
    predictions: &[usize],
    test: &Dataset,
    train_class_counts: &[usize],
    thresholds: StrataThresholds,
) -> Result<StratifiedReport, MetricError> {
    check_predictions(predictions, test)?;
    let per_class = tally(&test.labels, |i| predictions[i] == test.labels[i], test.classes);
    let class_strata: Vec<String> =
        (0..test.classes).map(|c| thresholds.stratum(train_class_counts.get(c).copied().unwrap_or(0)).to_string()).collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (c, acc) in per_class.iter().enumerate() {
        if let Some(a) = acc {
            let e = sums.entry(class_strata[c].clone()).or_insert((0.0, 0));
            e.0 += a;
            e.1 += 1;
        }
    }
    Ok(StratifiedReport {
        overall: accuracy(predictions, &test.labels),
        strata: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        per_class,
        class_strata,
        per_group: group_accuracies(predictions, test)?,
        thresholds,
    })
}

/// Minimum within-group accuracy over groups present in `test`, with the
/// lowest group id winning ties.
pub fn worst_group_accuracy(predictions: &[usize], test: &Dataset) -> Result<(f64, usize), MetricError> {
    let groups = group_accuracies(predictions, test)?;
    let mut best: Option<(f64, usize)> = None;
    for (g, acc) in groups.iter().enumerate() {
        if let Some(a) = *acc {
            if best.is_none_or(|(b, _)| a < b) {
                best = Some((a, g));
            }
        }
    }
    best.ok_or(MetricError::Empty)
}

fn mean_cov(points: &Array) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = points.shape();
    let mut mu = DVector::zeros(d);
    for r in points.iter_rows() {
        for j in 0..d {
            mu[j] += r[j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in points.iter_rows() {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    SymmetricEigen::try_new(m, 1e-15, 10_000).ok_or(MetricError::NoConvergence)
}

/// Fréchet distance between two Gaussians given by mean and covariance.
pub fn frechet_from_stats(
    mu_a: &[f64],
    cov_a: &Array,
    mu_b: &[f64],
    cov_b: &Array,
) -> Result<f64, MetricError> {
    let d = mu_a.len();
    if mu_b.len() != d {
        return Err(MetricError::Dimension(d, mu_b.len()));
    }
    let to_mat = |a: &Array| DMatrix::from_fn(d, d, |i, j| a.get(i, j));
    frechet_core(&DVector::from_column_slice(mu_a), &to_mat(cov_a), &DVector::from_column_slice(mu_b), &to_mat(cov_b))
}

fn frechet_core(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64, MetricError> {
    // Tr((A B)^½) = Tr((√A B √A)^½), and the inner product is symmetric PSD.
    let ea = sym_eigen(cov_a.clone())?;
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_sqrt: f64 = sym_eigen(inner)?.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt)
}

/// Fréchet distance between Gaussian fits of two point sets. Each covariance
/// gets `1e-6 I` added before the square root.
pub fn frechet_distance(a: &Array, b: &Array) -> Result<f64, MetricError> {
    let d = a.cols();
    if b.cols() != d {
        return Err(MetricError::Dimension(d, b.cols()));
    }
    for set in [a, b] {
        if set.rows() <= d {
            return Err(MetricError::TooFewPoints { dim: d, got: set.rows() });
        }
    }
    let (mu_a, mut cov_a) = mean_cov(a);
    let (mu_b, mut cov_b) = mean_cov(b);
    for i in 0..d {
        cov_a[(i, i)] += 1e-6;
        cov_b[(i, i)] += 1e-6;
    }
    frechet_core(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each real point to its `k`-th nearest other real point.
fn knn_radii(real: &Array, k: usize) -> Vec<f64> {
    let n = real.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| euclidean(real.row(i), real.row(j))).collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

/// k-NN manifold density and coverage of `fake` against `real`. Ball
/// membership is inclusive.
pub fn density_coverage(real: &Array, fake: &Array, k: usize) -> Result<(f64, f64), MetricError> {
    if real.cols() != fake.cols() {
        return Err(MetricError::Dimension(real.cols(), fake.cols()));
    }
    if k == 0 || k >= real.rows() {
        return Err(MetricError::BadK { k, n: real.rows() });
    }
    let radii = knn_radii(real, k);
    let mut inside = 0usize;
    let mut covered = vec![false; real.rows()];
    for f in fake.iter_rows() {
        for (i, r) in real.iter_rows().enumerate() {
            if euclidean(f, r) <= radii[i] {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = if fake.rows() == 0 { 0.0 } else { inside as f64 / (k * fake.rows()) as f64 };
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.rows() as f64;
    Ok((density, coverage))
}

/// Index of the nearest center, lowest index on exact ties.
pub fn nearest_mode(point: &[f64], centers: &[&[f64]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = euclidean(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Share of each class's samples closer to a non-majority mode of that class;
/// `None` for classes with no samples.
pub fn minority_mode_fraction(samples: &Array, labels: &[usize], spec: &ToySpec) -> Vec<Option<f64>> {
    let k = spec.classes.len();
    let mut minority = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (row, &y) in samples.iter_rows().zip(labels) {
        let centers: Vec<&[f64]> = spec.classes[y].modes.iter().map(|m| m.center.as_slice()).collect();
        totals[y] += 1;
        if nearest_mode(row, &centers) != spec.majority_mode(y) {
            minority[y] += 1;
        }
    }
    minority.iter().zip(&totals).map(|(&m, &n)| (n > 0).then(|| m as f64 / n as f64)).collect()
}

/// Mean Euclidean distance over all unordered pairs.
pub fn mean_pairwise_distance(points: &Array) -> f64 {
    let n = points.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += euclidean(points.row(i), points.row(j));
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub const PREDICTIONS_SCHEMA: &str = "fbgs-predictions";
pub const PREDICTIONS_VERSION: u32 = 1;

/// One predicted label per test point, in test order.
pub fn predictions_to_csv(predictions: &[usize]) -> String {
    let mut out = format!("# {PREDICTIONS_SCHEMA} v{PREDICTIONS_VERSION} n={}\nprediction\n", predictions.len());
    for p in predictions {
        out.push_str(&p.to_string());
        out.push('\n');
    }
    out
}

pub fn predictions_from_csv(text: &str) -> Result<Vec<usize>, DataError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| DataError::Schema { found: "<empty file>".into() })?;
    let meta = parse_schema_line(first, PREDICTIONS_SCHEMA, PREDICTIONS_VERSION)
        .map_err(|found| DataError::Schema { found })?;
    if lines.next() != Some("prediction") {
        return Err(DataError::Parse { line: 2, msg: "expected header `prediction`".into() });
    }
    let preds: Vec<usize> = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| DataError::Parse { line: i + 3, msg: format!("bad label `{l}`") }))
        .collect::<Result<_, _>>()?;
    let declared = meta.iter().find(|(k, _)| *k == "n").and_then(|(_, v)| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n != preds.len()) {
        return Err(DataError::Parse { line: 1, msg: format!("declares {declared:?} rows, found {}", preds.len()) });
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{point_id, Split};

    fn toy_test_set(per_group: usize) -> Dataset {
        let mut labels = vec![];
        let mut groups = vec![];
        for g in 0..4 {
            for _ in 0..per_group {
                labels.push(g / 2);
                groups.push(g);
            }
        }
        let n = labels.len();
        Dataset {
            points: Array::zeros(n, 2),
            labels,
            groups,
            classes: 2,
            group_classes: vec![0, 0, 1, 1],
            ids: (0..n).map(|i| point_id(Split::Test, i)).collect(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let test = toy_test_set(10);
        let r = stratified_accuracy(&test.labels, &test, &[500, 500], StrataThresholds::default()).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.strata.get("many"), Some(&1.0));
        assert!(!r.strata.contains_key("few"));
        assert_eq!(worst_group_accuracy(&test.labels, &test).unwrap(), (1.0, 0));
    }

    #[test]
    fn per_group_hand_tally() {
        let test = toy_test_set(100);
        let wrong_per_group = [5, 50, 4, 45];
        let mut preds = test.labels.clone();
        for (g, &w) in wrong_per_group.iter().enumerate() {
            for i in 0..w {
                let idx = g * 100 + i;
                preds[idx] = 1 - preds[idx];
            }
        }
        let r = stratified_accuracy(&preds, &test, &[1000, 1000], StrataThresholds::default()).unwrap();
        assert_eq!(r.per_group, vec![Some(0.95), Some(0.50), Some(0.96), Some(0.55)]);
        assert!((r.overall - (400 - 104) as f64 / 400.0).abs() < 1e-15);
        assert_eq!(worst_group_accuracy(&preds, &test).unwrap(), (0.5, 1));
    }

    #[test]
    fn strata_partition() {
        let t = StrataThresholds::default();
        assert_eq!(t.stratum(101), "many");
        assert_eq!(t.stratum(100), "medium");
        assert_eq!(t.stratum(20), "medium");
        assert_eq!(t.stratum(19), "few");
    }

    #[test]
    fn one_group_all_wrong() {
        let test = toy_test_set(3);
        let mut preds = test.labels.clone();
        for p in preds.iter_mut().skip(6).take(3) {
            *p = 0;
        }
        assert_eq!(worst_group_accuracy(&preds, &test).unwrap(), (0.0, 2));
    }

    #[test]
    fn density_coverage_hand_case() {
        let real = Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]], 2).unwrap();
        let fake = Array::from_rows(&[vec![0.0, 0.0]], 2).unwrap();
        assert_eq!(density_coverage(&real, &fake, 1).unwrap(), (2.0, 1.0));
        let far = Array::from_rows(&[vec![50.0, 50.0]], 2).unwrap();
        assert_eq!(density_coverage(&real, &far, 1).unwrap(), (0.0, 0.0));
        assert!(density_coverage(&real, &fake, 2).is_err());
    }

    #[test]
    fn frechet_shift_only() {
        let i2 = Array::identity(2);
        let d = frechet_from_stats(&[0.0, 0.0], &i2, &[1.0, 0.0], &i2).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_identical_sets() {
        let a = Array::from_fn(50, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37 - (j as f64));
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        assert!(frechet_distance(&a.select_rows(&[0, 1, 2]), &a).is_err());
    }

    #[test]
    fn mode_fraction_extremes() {
        let spec = ToySpec::two_class(10, 2.0, 0.6);
        let minority = Array::from_rows(&vec![spec.classes[0].modes[1].center.clone(); 5], 2).unwrap();
        assert_eq!(minority_mode_fraction(&minority, &[0; 5], &spec), vec![Some(1.0), None]);
        let majority = Array::from_rows(&vec![spec.classes[1].modes[0].center.clone(); 5], 2).unwrap();
        assert_eq!(minority_mode_fraction(&majority, &[1; 5], &spec), vec![None, Some(0.0)]);
    }

    #[test]
    fn predictions_round_trip() {
        let p = vec![0, 1, 1, 3];
        let text = predictions_to_csv(&p);
        assert_eq!(predictions_from_csv(&text).unwrap(), p);
        assert!(predictions_from_csv(&text.replace("n=4", "n=5")).is_err());
        assert!(matches!(predictions_from_csv("# other v1\n"), Err(DataError::Schema { .. })));
    }
}
