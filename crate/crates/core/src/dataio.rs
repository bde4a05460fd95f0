//! Feature tables: CSV I/O, the interleaved-spiral generator and group-level
//! train/test splitting.
//!
//! The CSV layout is `group_id,label,f0,f1,...,f{D-1}` with one row per patch
//! feature. Values are written with the shortest representation that parses
//! back to the same `f64`, so a save/load cycle is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Patch features with per-row class labels and slide (group) identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Array2<f64>,
    labels: Vec<usize>,
    group_ids: Vec<String>,
}

impl LabeledFeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, group_ids: Vec<String>) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || group_ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} labels and {} group ids",
                labels.len(),
                group_ids.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::Data("feature dimension must be at least 1".into()));
        }
        if let Some(((row, col), value)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature {value} at row {row}, column {col}"
            )));
        }
        Ok(Self {
            features,
            labels,
            group_ids,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// One past the largest label present (0 for an empty set).
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Checks that every class in `0..n_classes` has at least one row.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        let mut seen = vec![false; n_classes];
        for &label in &self.labels {
            if label >= n_classes {
                return Err(Error::Data(format!(
                    "label {label} outside declared range 0..{n_classes}"
                )));
            }
            seen[label] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(missing) => Err(Error::Data(format!("class {missing} has no samples"))),
            None => Ok(()),
        }
    }

    /// Row indices belonging to class `c`, in row order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    /// Distinct group ids in first-appearance order.
    pub fn groups(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for g in &self.group_ids {
            if seen.insert(g.as_str()) {
                out.push(g.as_str());
            }
        }
        out
    }

    /// Majority label of each group (ties go to the lower label).
    pub fn group_labels(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
        for (g, &l) in self.group_ids.iter().zip(&self.labels) {
            *counts.entry(g.as_str()).or_default().entry(l).or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(g, by_label)| {
                let best = by_label
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(&l, _)| l)
                    .unwrap_or(0);
                (g, best)
            })
            .collect()
    }

    /// Rows of the set, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            group_ids: rows.iter().map(|&i| self.group_ids[i].clone()).collect(),
        }
    }

    /// Same labels and groups with a different feature matrix (e.g. embeddings).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.group_ids.clone())
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<LabeledFeatureSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_error(path, 1, "empty file")),
        Some(rec) => rec.map_err(|e| parse_error(path, 1, e.to_string()))?,
    };
    if header.len() < 3 || &header[0] != "group_id" || &header[1] != "label" {
        return Err(parse_error(
            path,
            1,
            "header must be `group_id,label,f0,...`",
        ));
    }
    let dim = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_error(
                path,
                1,
                format!("expected column `f{j}`, found `{name}`"),
            ));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut group_ids = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 2 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} columns, found {}", dim + 2, rec.len()),
            ));
        }
        group_ids.push(rec[0].to_string());
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad label `{}`", &rec[1])))?;
        labels.push(label);
        for (j, cell) in rec.iter().skip(2).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("non-numeric value `{cell}` in f{j}")))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("non-finite value `{cell}` in f{j}")));
            }
            values.push(v);
        }
    }

    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabeledFeatureSet::new(features, labels, group_ids)
}

pub fn save_feature_table(set: &LabeledFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_table(set, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn write_feature_table<W: Write>(set: &LabeledFeatureSet, out: W) -> std::io::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["group_id".to_string(), "label".to_string()];
    header.extend((0..set.dim()).map(|j| format!("f{j}")));
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(set.dim() + 2);
    for i in 0..set.len() {
        record.clear();
        record.push(set.group_ids[i].clone());
        record.push(set.labels[i].to_string());
        record.extend(set.features.row(i).iter().map(|v| format!("{v:?}")));
        writer.write_record(&record)?;
    }
    writer.flush()
}

/// Parameters of the two-class interleaved spiral generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    /// Standard deviation of isotropic Gaussian noise added to every coordinate.
    pub noise: f64,
    /// Number of full turns each spiral arm makes.
    pub turns: f64,
    pub seed: u64,
    /// Rows of a class are spread round-robin over this many slides.
    pub slides_per_class: usize,
    /// When set above 3, the 3-D points are zero-padded and randomly rotated
    /// into this many dimensions.
    pub lift_dim: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            noise: 0.05,
            turns: 2.0,
            seed: 0,
            slides_per_class: 10,
            lift_dim: None,
        }
    }
}

/// Two interleaved 3-D spiral arms, one per class, with default slide layout.
pub fn gen_interleaved_manifolds(
    n_per_class: usize,
    noise: f64,
    turns: f64,
    seed: u64,
) -> Result<LabeledFeatureSet> {
    gen_interleaved_manifolds_with(&SynthConfig {
        n_per_class,
        noise,
        turns,
        seed,
        slides_per_class: SynthConfig::default().slides_per_class.min(n_per_class),
        lift_dim: None,
    })
}

/// Arm `c` follows `r(t) = 0.25 + t`, angle `2π·turns·t + cπ`, height
/// `0.4·t − 0.2` for `t ~ U(0, 1)`. The two arms are half a turn apart, so
/// Euclidean neighbors across arms are common while each arm is a smooth
/// 1-D curve.
pub fn gen_interleaved_manifolds_with(cfg: &SynthConfig) -> Result<LabeledFeatureSet> {
    if cfg.n_per_class < 4 {
        return Err(Error::Param(format!(
            "n_per_class must be at least 4, got {}",
            cfg.n_per_class
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Param(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    if !(cfg.turns > 0.0 && cfg.turns.is_finite()) {
        return Err(Error::Param(format!("turns must be > 0, got {}", cfg.turns)));
    }
    if cfg.slides_per_class == 0 || cfg.slides_per_class > cfg.n_per_class {
        return Err(Error::Param(format!(
            "slides_per_class must be in 1..={}, got {}",
            cfg.n_per_class, cfg.slides_per_class
        )));
    }

    let mut rng = rng::seeded(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Param(e.to_string()))?;
    let n = 2 * cfg.n_per_class;
    let mut points = Array2::<f64>::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    let mut group_ids = Vec::with_capacity(n);

    for class in 0..2usize {
        let mut slots: Vec<usize> = (0..cfg.n_per_class).collect();
        slots.shuffle(&mut rng);
        for (i, slot) in slots.into_iter().enumerate() {
            let t: f64 = rng.random();
            let angle = 2.0 * PI * cfg.turns * t + class as f64 * PI;
            let radius = 0.25 + t;
            let row = class * cfg.n_per_class + i;
            points[[row, 0]] = radius * angle.cos() + normal.sample(&mut rng);
            points[[row, 1]] = radius * angle.sin() + normal.sample(&mut rng);
            points[[row, 2]] = 0.4 * t - 0.2 + normal.sample(&mut rng);
            labels.push(class);
            group_ids.push(format!("c{class}-s{:03}", slot % cfg.slides_per_class));
        }
    }

    let features = match cfg.lift_dim {
        Some(d) if d > 3 => lift(&points, d, &mut rng),
        Some(d) if d < 3 => {
            return Err(Error::Param(format!("lift_dim must be >= 3, got {d}")));
        }
        _ => points,
    };
    LabeledFeatureSet::new(features, labels, group_ids)
}

/// Zero-pads to `dim` columns and applies a random orthogonal rotation.
fn lift(points: &Array2<f64>, dim: usize, rng: &mut rng::DetRng) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((dim, dim));
    for v in basis.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    // modified Gram-Schmidt on rows
    for i in 0..dim {
        for j in 0..i {
            let proj = basis.row(i).dot(&basis.row(j));
            let bj = basis.row(j).to_owned();
            basis.row_mut(i).scaled_add(-proj, &bj);
        }
        let norm = basis.row(i).dot(&basis.row(i)).sqrt();
        basis.row_mut(i).mapv_inplace(|v| v / norm);
    }
    let mut padded = Array2::<f64>::zeros((points.nrows(), dim));
    padded.slice_mut(ndarray::s![.., ..3]).assign(points);
    padded.dot(&basis)
}

/// Splits at group granularity, stratified by each group's majority label.
///
/// The total number of training groups is `round(train_fraction · G)`;
/// it is shared between classes by largest remainder so that every class
/// keeps at least one group on each side.
pub fn split_by_group(
    set: &LabeledFeatureSet,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledFeatureSet, LabeledFeatureSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Param(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let group_labels = set.group_labels();
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (g, &label) in &group_labels {
        by_class.entry(label).or_default().push(g);
    }
    if let Some((class, groups)) = by_class.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::Data(format!(
            "class {class} has {} group(s); at least 2 are needed to split",
            groups.len()
        )));
    }

    let total_groups = group_labels.len();
    let n_classes = by_class.len();
    let target = ((train_fraction * total_groups as f64).round() as usize)
        .clamp(n_classes, total_groups - n_classes);

    // Largest-remainder allocation bounded to [1, n_c - 1] per class.
    let mut quota: Vec<(usize, usize, f64)> = by_class
        .values()
        .map(|g| {
            let exact = train_fraction * g.len() as f64;
            let q = (exact.floor() as usize).clamp(1, g.len() - 1);
            (q, g.len(), exact - q as f64)
        })
        .collect();
    let mut assigned: usize = quota.iter().map(|q| q.0).sum();
    while assigned != target {
        let grow = assigned < target;
        let pick = (0..quota.len())
            .filter(|&i| {
                if grow {
                    quota[i].0 < quota[i].1 - 1
                } else {
                    quota[i].0 > 1
                }
            })
            .max_by(|&a, &b| {
                let (ra, rb) = if grow {
                    (quota[a].2, quota[b].2)
                } else {
                    (-quota[a].2, -quota[b].2)
                };
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        let Some(i) = pick else { break };
        if grow {
            quota[i].0 += 1;
            quota[i].2 -= 1.0;
            assigned += 1;
        } else {
            quota[i].0 -= 1;
            quota[i].2 += 1.0;
            assigned -= 1;
        }
    }

    let mut rng = rng::seeded(seed);
    let mut train_groups = BTreeSet::new();
    for (groups, (q, _, _)) in by_class.values().zip(&quota) {
        let mut shuffled = groups.clone();
        shuffled.shuffle(&mut rng);
        train_groups.extend(shuffled.into_iter().take(*q));
    }

    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
        (0..set.len()).partition(|&i| train_groups.contains(set.group_ids[i].as_str()));
    Ok((set.subset(&train_rows), set.subset(&test_rows)))
}
