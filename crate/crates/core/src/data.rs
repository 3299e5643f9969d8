//! Synthetic imbalanced datasets, balancing plans and the dataset CSV format.
//!
//! File layout:
//!
//! ```text
//! # fbgs-dataset v1 classes=2 group_classes=0,0,1,1
//! x1,x2,label,group
//! -3.1,0.2,0,0
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ndiff::Array;

pub const DATASET_SCHEMA: &str = "fbgs-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema `{found}` (expected {DATASET_SCHEMA} v{DATASET_VERSION})")]
    Schema { found: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Origin of a point, stored in the top byte of its id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train = 1,
    Validation = 2,
    Test = 3,
    Synthetic = 4,
}

pub fn point_id(split: Split, index: usize) -> u64 {
    ((split as u64) << 56) | index as u64
}

pub fn id_split(id: u64) -> u8 {
    (id >> 56) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Array,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub classes: usize,
    /// Class owning each group id; groups may be empty of points.
    pub group_classes: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn empty(dim: usize, classes: usize, group_classes: Vec<usize>) -> Self {
        Self {
            points: Array::zeros(0, dim),
            labels: vec![],
            groups: vec![],
            classes,
            group_classes,
            ids: vec![],
        }
    }

    /// Checks label ranges, group/label consistency and column lengths.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.points.rows();
        if self.labels.len() != n || self.groups.len() != n || self.ids.len() != n {
            return Err(DataError::InvalidSpec("column lengths differ".into()));
        }
        for (i, (&y, &g)) in self.labels.iter().zip(&self.groups).enumerate() {
            if y >= self.classes {
                return Err(DataError::InvalidSpec(format!("row {i}: label {y} >= {}", self.classes)));
            }
            if self.group_classes.get(g) != Some(&y) {
                return Err(DataError::InvalidSpec(format!("row {i}: group {g} does not belong to class {y}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn group_count(&self) -> usize {
        self.group_classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.group_count()];
        self.groups.iter().for_each(|&g| c[g] += 1);
        c
    }

    pub fn indices_of_class(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }

    pub fn indices_of_group(&self, g: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == g).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            classes: self.classes,
            group_classes: self.group_classes.clone(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Rows of `other` appended after `self`. Group tables must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.classes != other.classes || self.group_classes != other.group_classes {
            return Err(DataError::InvalidSpec("cannot concatenate datasets with different groups".into()));
        }
        let points = self.points.vstack(&other.points).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        Ok(Dataset {
            points,
            labels: [self.labels.as_slice(), &other.labels].concat(),
            groups: [self.groups.as_slice(), &other.groups].concat(),
            classes: self.classes,
            group_classes: self.group_classes.clone(),
            ids: [self.ids.as_slice(), &other.ids].concat(),
        })
    }

    pub fn retag(&mut self, split: Split) {
        self.ids = (0..self.len()).map(|i| point_id(split, i)).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMode {
    pub center: Vec<f64>,
    pub std: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyClass {
    pub count: usize,
    pub modes: Vec<ToyMode>,
}

/// Per-class Gaussian mixtures; group ids enumerate `(class, mode)` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub classes: Vec<ToyClass>,
}

impl ToySpec {
    /// Two classes, each a 90/10 majority/minority mixture. Majority modes sit
    /// at `(∓3, 0)`; minority modes start at `(∓3, ±4)` and are moved `skew`
    /// toward the opposing class along the first axis.
    pub fn two_class(count: usize, skew: f64, std: f64) -> Self {
        let class = |sign: f64| ToyClass {
            count,
            modes: vec![
                ToyMode { center: vec![3.0 * sign, 0.0], std, proportion: 0.9 },
                ToyMode { center: vec![(3.0 - skew) * sign, -4.0 * sign], std, proportion: 0.1 },
            ],
        };
        Self { classes: vec![class(-1.0), class(1.0)] }
    }

    pub fn dim(&self) -> usize {
        self.classes.first().and_then(|c| c.modes.first()).map_or(0, |m| m.center.len())
    }

    pub fn group_classes(&self) -> Vec<usize> {
        self.classes.iter().enumerate().flat_map(|(y, c)| std::iter::repeat_n(y, c.modes.len())).collect()
    }

    /// First group id of each class.
    pub fn group_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.classes
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.modes.len();
                o
            })
            .collect()
    }

    /// Index of the largest-proportion mode of class `y`, lowest index on ties.
    pub fn majority_mode(&self, y: usize) -> usize {
        let modes = &self.classes[y].modes;
        let mut best = 0;
        for (i, m) in modes.iter().enumerate() {
            if m.proportion > modes[best].proportion {
                best = i;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::InvalidSpec("no classes".into()));
        }
        let d = self.dim();
        if d == 0 {
            return Err(DataError::InvalidSpec("modes need a non-empty center".into()));
        }
        for (y, c) in self.classes.iter().enumerate() {
            if c.modes.is_empty() {
                return Err(DataError::InvalidSpec(format!("class {y} has no modes")));
            }
            let total: f64 = c.modes.iter().map(|m| m.proportion).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DataError::InvalidSpec(format!("class {y} proportions sum to {total}")));
            }
            for m in &c.modes {
                if m.center.len() != d {
                    return Err(DataError::InvalidSpec(format!("class {y} has a center of dimension {}", m.center.len())));
                }
                if !(m.std >= 0.0) || !(m.proportion >= 0.0) {
                    return Err(DataError::InvalidSpec(format!("class {y} has a negative std or proportion")));
                }
            }
        }
        Ok(())
    }

    /// Exact per-mode counts for each class (largest-remainder rounding).
    pub fn mode_counts(&self) -> Vec<Vec<usize>> {
        self.classes
            .iter()
            .map(|c| quota(c.count, &c.modes.iter().map(|m| m.proportion).collect::<Vec<_>>()))
            .collect()
    }

    /// Same geometry with every class count replaced by per-mode `count`s.
    pub fn balanced(&self, per_mode: usize) -> ToySpec {
        let classes = self
            .classes
            .iter()
            .map(|c| {
                let k = c.modes.len();
                ToyClass {
                    count: per_mode * k,
                    modes: c.modes.iter().map(|m| ToyMode { proportion: 1.0 / k as f64, ..m.clone() }).collect(),
                }
            })
            .collect();
        ToySpec { classes }
    }
}

/// Splits `n` by `proportions` with largest-remainder rounding.
pub fn quota(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn gaussian_point<R: Rng + ?Sized>(center: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    center.iter().map(|c| c + std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Samples every class by exact mode quotas; noise only perturbs positions.
pub fn gen_longtail_2d<R: Rng + ?Sized>(spec: &ToySpec, split: Split, rng: &mut R) -> Result<Dataset, DataError> {
    spec.validate()?;
    let offsets = spec.group_offsets();
    let mut rows = Vec::new();
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for (y, (class, counts)) in spec.classes.iter().zip(spec.mode_counts()).enumerate() {
        for (m, (mode, &count)) in class.modes.iter().zip(&counts).enumerate() {
            for _ in 0..count {
                rows.push(gaussian_point(&mode.center, mode.std, rng));
                labels.push(y);
                groups.push(offsets[y] + m);
            }
        }
    }
    let points = Array::from_rows(&rows, spec.dim()).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let n = labels.len();
    Ok(Dataset {
        points,
        labels,
        groups,
        classes: spec.classes.len(),
        group_classes: spec.group_classes(),
        ids: (0..n).map(|i| point_id(split, i)).collect(),
    })
}

/// Class-by-context grid in the plane. Class `k` sits at angle `2πk/K` on a
/// circle of `class_radius`; context `c` shifts it tangentially by
/// `context_spacing * (c - (C-1)/2)`. Group id is `k * C + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub classes: usize,
    pub contexts: usize,
    pub counts: Vec<Vec<usize>>,
    pub class_radius: f64,
    pub context_spacing: f64,
    pub std: f64,
}

impl GroupSpec {
    pub fn center(&self, class: usize, context: usize) -> [f64; 2] {
        let theta = 2.0 * std::f64::consts::PI * class as f64 / self.classes as f64;
        let shift = self.context_spacing * (context as f64 - (self.contexts as f64 - 1.0) / 2.0);
        [
            self.class_radius * theta.cos() - shift * theta.sin(),
            self.class_radius * theta.sin() + shift * theta.cos(),
        ]
    }

    pub fn group_classes(&self) -> Vec<usize> {
        (0..self.classes).flat_map(|k| std::iter::repeat_n(k, self.contexts)).collect()
    }

    pub fn with_counts(&self, counts: Vec<Vec<usize>>) -> Self {
        Self { counts, ..self.clone() }
    }

    pub fn uniform(&self, per_group: usize) -> Self {
        self.with_counts(vec![vec![per_group; self.contexts]; self.classes])
    }
}

pub fn gen_group_imbalanced<R: Rng + ?Sized>(spec: &GroupSpec, split: Split, rng: &mut R) -> Result<Dataset, DataError> {
    if spec.classes == 0 || spec.contexts == 0 {
        return Err(DataError::InvalidSpec("need at least one class and one context".into()));
    }
    if spec.counts.len() != spec.classes || spec.counts.iter().any(|r| r.len() != spec.contexts) {
        return Err(DataError::InvalidSpec(format!(
            "count matrix must be {}x{}",
            spec.classes, spec.contexts
        )));
    }
    if let Some(k) = spec.counts.iter().position(|r| r.iter().all(|&c| c == 0)) {
        return Err(DataError::InvalidSpec(format!("class {k} has no samples in any context")));
    }
    if !(spec.std >= 0.0) {
        return Err(DataError::InvalidSpec("std must be non-negative".into()));
    }
    let mut rows = Vec::new();
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for k in 0..spec.classes {
        for c in 0..spec.contexts {
            let center = spec.center(k, c);
            for _ in 0..spec.counts[k][c] {
                rows.push(gaussian_point(&center, spec.std, rng));
                labels.push(k);
                groups.push(k * spec.contexts + c);
            }
        }
    }
    let points = Array::from_rows(&rows, 2).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let n = labels.len();
    Ok(Dataset {
        points,
        labels,
        groups,
        classes: spec.classes,
        group_classes: spec.group_classes(),
        ids: (0..n).map(|i| point_id(split, i)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceTarget {
    PerClass(usize),
    PerGroup(usize),
}

/// Synthetic counts needed to lift every cell to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub target: BalanceTarget,
    /// One entry per class or per group, matching `target`.
    pub deficits: Vec<usize>,
}

impl BalancePlan {
    pub fn total(&self) -> usize {
        self.deficits.iter().sum()
    }

    /// Deficits summed per class.
    pub fn per_class(&self, group_classes: &[usize], classes: usize) -> Vec<usize> {
        match self.target {
            BalanceTarget::PerClass(_) => self.deficits.clone(),
            BalanceTarget::PerGroup(_) => {
                let mut out = vec![0; classes];
                for (g, &d) in self.deficits.iter().enumerate() {
                    out[group_classes[g]] += d;
                }
                out
            }
        }
    }
}

pub fn balance_plan(ds: &Dataset, target: BalanceTarget) -> BalancePlan {
    let (counts, t) = match target {
        BalanceTarget::PerClass(t) => (ds.class_counts(), t),
        BalanceTarget::PerGroup(t) => (ds.group_counts(), t),
    };
    BalancePlan { target, deficits: counts.iter().map(|&c| t.saturating_sub(c)).collect() }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    let gc: Vec<String> = ds.group_classes.iter().map(usize::to_string).collect();
    let _ = writeln!(
        out,
        "# {DATASET_SCHEMA} v{DATASET_VERSION} classes={} group_classes={}",
        ds.classes,
        gc.join(",")
    );
    let mut header: Vec<String> = (1..=ds.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    header.push("group".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        for v in ds.points.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", ds.labels[i], ds.groups[i]);
    }
    out
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, dataset_to_csv(ds)).map_err(|e| io_err(path, e))
}

/// Parses the `# <schema> v<N> key=value ...` line heading every CSV artifact.
pub(crate) fn parse_schema_line<'a>(
    line: &'a str,
    schema: &str,
    version: u32,
) -> Result<Vec<(&'a str, &'a str)>, String> {
    let rest = line.strip_prefix("# ").ok_or_else(|| line.to_string())?;
    let mut parts = rest.split_whitespace();
    let (name, ver) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if name != schema || ver != format!("v{version}") {
        return Err(format!("{name} {ver}"));
    }
    Ok(parts.filter_map(|kv| kv.split_once('=')).collect())
}

pub fn dataset_from_csv(text: &str, split: Split) -> Result<Dataset, DataError> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| DataError::Schema { found: "<empty file>".into() })?;
    let meta = parse_schema_line(first, DATASET_SCHEMA, DATASET_VERSION)
        .map_err(|found| DataError::Schema { found })?;
    let lookup = |key: &str| meta.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let classes: usize = lookup("classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::Parse { line: 1, msg: "missing classes=".into() })?;
    let group_classes: Vec<usize> = match lookup("group_classes") {
        Some("") | None => vec![],
        Some(v) => v
            .split(',')
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| DataError::Parse { line: 1, msg: "bad group_classes".into() })?,
    };
    let header = lines.next().ok_or_else(|| DataError::Parse { line: 2, msg: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "group" {
        return Err(DataError::Parse { line: 2, msg: format!("unexpected header `{header}`") });
    }
    let dim = cols.len() - 2;
    let mut data = Vec::new();
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected {} columns, found {}", dim + 2, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.trim().parse().map_err(|_| DataError::Parse { line: lineno, msg: format!("bad number `{f}`") })?;
            data.push(v);
        }
        let parse_idx = |f: &str| -> Result<usize, DataError> {
            f.trim().parse().map_err(|_| DataError::Parse { line: lineno, msg: format!("bad index `{f}`") })
        };
        labels.push(parse_idx(fields[dim])?);
        groups.push(parse_idx(fields[dim + 1])?);
    }
    let n = labels.len();
    let ds = Dataset {
        points: Array::from_vec(n, dim, data).map_err(|e| DataError::InvalidSpec(e.to_string()))?,
        labels,
        groups,
        classes,
        group_classes,
        ids: (0..n).map(|i| point_id(split, i)).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    dataset_from_csv(&text, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quota_is_exact() {
        assert_eq!(quota(1000, &[0.9, 0.1]), vec![900, 100]);
        assert_eq!(quota(7, &[0.5, 0.5]), vec![4, 3]);
        assert_eq!(quota(10, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn toy_counts_and_determinism() {
        let spec = ToySpec::two_class(1000, 2.0, 0.6);
        let a = gen_longtail_2d(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gen_longtail_2d(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.group_counts(), vec![900, 100, 900, 100]);
        assert_eq!(a.class_counts(), vec![1000, 1000]);
        a.validate().unwrap();
    }

    #[test]
    fn zero_std_sits_on_centers() {
        let spec = ToySpec::two_class(20, 2.0, 0.0);
        let ds = gen_longtail_2d(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..ds.len() {
            let g = ds.groups[i];
            let (y, m) = (g / 2, g % 2);
            assert_eq!(ds.points.row(i), spec.classes[y].modes[m].center.as_slice());
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = ToySpec::two_class(10, 2.0, 0.6);
        spec.classes[0].modes[0].proportion = 0.8;
        assert!(gen_longtail_2d(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn group_grid_bookkeeping() {
        let spec = GroupSpec {
            classes: 2,
            contexts: 2,
            counts: vec![vec![100, 0], vec![50, 50]],
            class_radius: 3.0,
            context_spacing: 3.0,
            std: 0.5,
        };
        let ds = gen_group_imbalanced(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.group_counts(), vec![100, 0, 50, 50]);
        assert_eq!(ds.group_count(), 4);
        let again = gen_group_imbalanced(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds, again);
        let bad = spec.with_counts(vec![vec![0, 0], vec![5, 5]]);
        assert!(gen_group_imbalanced(&bad, Split::Train, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn balance_plans() {
        let spec = GroupSpec {
            classes: 2,
            contexts: 1,
            counts: vec![vec![900], vec![100]],
            class_radius: 3.0,
            context_spacing: 0.0,
            std: 0.5,
        };
        let ds = gen_group_imbalanced(&spec, Split::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(balance_plan(&ds, BalanceTarget::PerClass(1000)).deficits, vec![100, 900]);
        assert_eq!(balance_plan(&ds, BalanceTarget::PerClass(900)).deficits, vec![0, 800]);
        assert_eq!(balance_plan(&ds, BalanceTarget::PerClass(50)).deficits, vec![0, 0]);

        let toy = gen_longtail_2d(&ToySpec::two_class(500, 2.0, 0.6), Split::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let plan = balance_plan(&toy, BalanceTarget::PerGroup(450));
        assert_eq!(plan.deficits, vec![0, 400, 0, 400]);
        assert_eq!(plan.per_class(&toy.group_classes, 2), vec![400, 400]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = gen_longtail_2d(&ToySpec::two_class(30, 2.0, 0.6), Split::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let back = dataset_from_csv(&dataset_to_csv(&ds), Split::Train).unwrap();
        assert_eq!(back, ds);

        let empty = Dataset::empty(2, 2, vec![0, 1]);
        let text = dataset_to_csv(&empty);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(dataset_from_csv(&text, Split::Train).unwrap(), empty);

        let broken = format!("{}1.0,2.0,0\n", dataset_to_csv(&empty));
        match dataset_from_csv(&broken, Split::Train) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let wrong_version = text.replace("v1", "v9");
        assert!(matches!(dataset_from_csv(&wrong_version, Split::Train), Err(DataError::Schema { .. })));
    }
}
