//! Sub-class discovery and prototypes.
//!
//! Each class is split into `n` sub-classes by agglomerative clustering on
//! its geodesic distance matrix; a sub-class prototype is the mean of its
//! members' features.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::dataio::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, euclidean, geodesic_all_pairs, GeodesicMatrix};
use crate::rng;

/// Relative tolerance under which two linkage distances count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl Linkage {
    pub const ALL: [Linkage; 3] = [Linkage::Single, Linkage::Complete, Linkage::Average];

    /// Lance-Williams update of the distance from the merged cluster `a ∪ b`
    /// to a third cluster.
    fn update(self, d_a: f64, d_b: f64, size_a: usize, size_b: usize) -> f64 {
        match self {
            Linkage::Single => d_a.min(d_b),
            Linkage::Complete => d_a.max(d_b),
            Linkage::Average => {
                let (na, nb) = (size_a as f64, size_b as f64);
                (na * d_a + nb * d_b) / (na + nb)
            }
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linkage::Single => "single",
            Linkage::Complete => "complete",
            Linkage::Average => "average",
        })
    }
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(Error::Param(format!("unknown linkage `{other}`"))),
        }
    }
}

/// `true` when `candidate` beats `best` by more than the tie tolerance.
pub fn strictly_closer(candidate: f64, best: f64) -> bool {
    candidate < best - TIE_TOLERANCE * best.abs()
}

/// Assignment of one class's samples to sub-classes `0..n_subclasses`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubclassPartition {
    pub assignments: Vec<usize>,
    pub n_subclasses: usize,
    pub class_id: usize,
}

impl SubclassPartition {
    pub fn new(assignments: Vec<usize>, n_subclasses: usize, class_id: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_subclasses];
        for &a in &assignments {
            if a >= n_subclasses {
                return Err(Error::Index(format!(
                    "sub-class {a} outside 0..{n_subclasses}"
                )));
            }
            counts[a] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("sub-class {empty} is empty")));
        }
        Ok(Self {
            assignments,
            n_subclasses,
            class_id,
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_subclasses];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }

    /// Relabels sub-classes by the smallest member index.
    fn canonical(labels: &[usize], class_id: usize) -> Self {
        let mut remap = std::collections::HashMap::new();
        let assignments = labels
            .iter()
            .map(|&l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Self {
            assignments,
            n_subclasses: remap.len(),
            class_id,
        }
    }
}

/// One merge step: clusters are named by their smallest member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Merged across disconnected components after finite pairs ran out.
    pub forced: bool,
}

/// Agglomerates the rows of `m` into `n` clusters.
pub fn agglomerate(m: &GeodesicMatrix, n: usize, linkage: Linkage) -> Result<SubclassPartition> {
    agglomerate_traced(m.dist(), n, linkage).map(|(p, _)| p)
}

/// Primitive agglomeration on a dense dissimilarity matrix with
/// Lance-Williams updates, also returning the merge sequence.
///
/// Ties (within [`TIE_TOLERANCE`]) go to the lexicographically smallest
/// `(a, b)` pair of cluster ids. When only infinite distances remain the two
/// largest clusters are merged, lower id first among equal sizes.
pub fn agglomerate_traced(
    dist: ArrayView2<f64>,
    n: usize,
    linkage: Linkage,
) -> Result<(SubclassPartition, Vec<Merge>)> {
    let size_n = dist.nrows();
    if n == 0 || n > size_n {
        return Err(Error::Param(format!(
            "target sub-class count {n} outside 1..={size_n}"
        )));
    }
    let mut d = dist.to_owned();
    let mut active: Vec<usize> = (0..size_n).collect();
    let mut size = vec![1usize; size_n];
    let mut label: Vec<usize> = (0..size_n).collect();
    let mut merges = Vec::with_capacity(size_n - n);

    while active.len() > n {
        let mut best: Option<(usize, usize, f64)> = None;
        for (ia, &a) in active.iter().enumerate() {
            let row = d.row(a);
            for &b in &active[ia + 1..] {
                let v = row[b];
                if !v.is_finite() {
                    continue;
                }
                match best {
                    Some((_, _, bv)) if !strictly_closer(v, bv) => {}
                    _ => best = Some((a, b, v)),
                }
            }
        }
        let (a, b, distance, forced) = match best {
            Some((a, b, v)) => (a, b, v, false),
            None => {
                let mut order = active.clone();
                order.sort_by(|&x, &y| size[y].cmp(&size[x]).then(x.cmp(&y)));
                let (x, y) = (order[0], order[1]);
                (x.min(y), x.max(y), f64::INFINITY, true)
            }
        };

        for &x in &active {
            if x == a || x == b {
                continue;
            }
            let v = linkage.update(d[[a, x]], d[[b, x]], size[a], size[b]);
            d[[a, x]] = v;
            d[[x, a]] = v;
        }
        size[a] += size[b];
        active.retain(|&x| x != b);
        for l in label.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        merges.push(Merge {
            a,
            b,
            distance,
            forced,
        });
    }

    Ok((SubclassPartition::canonical(&label, 0), merges))
}

/// Prototype (mean feature) of every sub-class of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// Local prototypes first, then the class mean when `has_global`.
    pub prototypes: Array2<f64>,
    pub class_id: usize,
    /// Members of each local prototype.
    pub member_counts: Vec<usize>,
    pub has_global: bool,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    pub fn local_count(&self) -> usize {
        self.member_counts.len()
    }

    /// Appends the weighted mean of the local prototypes (the class mean).
    pub fn with_global(mut self) -> Self {
        if self.has_global {
            return self;
        }
        let total: usize = self.member_counts.iter().sum();
        let mut mean = Array1::<f64>::zeros(self.prototypes.ncols());
        for (row, &count) in self.prototypes.rows().into_iter().zip(&self.member_counts) {
            mean.scaled_add(count as f64 / total as f64, &row);
        }
        self.prototypes.push_row(mean.view()).expect("matching width");
        self.has_global = true;
        self
    }
}

pub fn compute_prototypes(
    features: ArrayView2<f64>,
    partition: &SubclassPartition,
) -> Result<PrototypeSet> {
    if features.nrows() != partition.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for a partition of {}",
            features.nrows(),
            partition.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((partition.n_subclasses, features.ncols()));
    let mut counts = vec![0usize; partition.n_subclasses];
    for (row, &a) in features.rows().into_iter().zip(&partition.assignments) {
        if a >= partition.n_subclasses {
            return Err(Error::Index(format!("sub-class {a} of {}", partition.n_subclasses)));
        }
        sums.row_mut(a).scaled_add(1.0, &row);
        counts[a] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "sub-class {empty} of class {} has no members",
            partition.class_id
        )));
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        row.mapv_inplace(|v| v / c as f64);
    }
    Ok(PrototypeSet {
        prototypes: sums,
        class_id: partition.class_id,
        member_counts: counts,
        has_global: false,
    })
}

/// Lloyd's k-means with k-means++ seeding, used only by the cosine baseline.
pub fn kmeans(features: ArrayView2<f64>, n: usize, seed: u64) -> Result<SubclassPartition> {
    let rows = features.nrows();
    if n == 0 || n > rows {
        return Err(Error::Param(format!("k-means cluster count {n} outside 1..={rows}")));
    }
    let mut rng = rng::seeded(seed);
    let mut centers = Array2::<f64>::zeros((n, features.ncols()));
    centers.row_mut(0).assign(&features.row(rng.random_range(0..rows)));
    let mut nearest = vec![f64::INFINITY; rows];
    for c in 1..n {
        for (i, best) in nearest.iter_mut().enumerate() {
            let d = euclidean(features.row(i), centers.row(c - 1));
            *best = best.min(d * d);
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = rows - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..rows)
        };
        centers.row_mut(c).assign(&features.row(pick));
    }

    let mut assign = vec![0usize; rows];
    for _ in 0..100 {
        let mut changed = false;
        for (i, slot) in assign.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..n {
                let d = euclidean(features.row(i), centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            if *slot != best.0 {
                *slot = best.0;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; n];
        for i in 0..rows {
            sums.row_mut(assign[i]).scaled_add(1.0, &features.row(i));
            counts[assign[i]] += 1;
        }
        for c in 0..n {
            if counts[c] == 0 {
                // reseed an empty cluster with the point farthest from its center
                let far = (0..rows)
                    .max_by(|&x, &y| {
                        let dx = euclidean(features.row(x), centers.row(assign[x]));
                        let dy = euclidean(features.row(y), centers.row(assign[y]));
                        dx.total_cmp(&dy).then(y.cmp(&x))
                    })
                    .unwrap_or(0);
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
                changed = true;
                centers.row_mut(c).assign(&features.row(far));
            } else {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    Ok(SubclassPartition::canonical(&assign, 0))
}

/// How the nearest-neighbor graph is scoped for sub-class discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphScope {
    /// One graph per class.
    #[default]
    PerClass,
    /// One graph over all samples; each class uses its block of the matrix.
    Global,
}

impl fmt::Display for GraphScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphScope::PerClass => "per-class",
            GraphScope::Global => "global",
        })
    }
}

impl FromStr for GraphScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-class" => Ok(GraphScope::PerClass),
            "global" => Ok(GraphScope::Global),
            other => Err(Error::Param(format!("unknown graph scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubclassMethod {
    #[default]
    Geodesic,
    KMeans,
}

/// Which prototypes each class exposes to the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrototypeMode {
    /// One prototype per class (the class mean).
    Global,
    /// `n` sub-class prototypes per class.
    #[default]
    Local,
    /// Sub-class prototypes plus the class mean appended as an extra row.
    GlobalLocal,
}

impl PrototypeMode {
    pub fn name(self) -> &'static str {
        match self {
            PrototypeMode::Global => "global",
            PrototypeMode::Local => "local",
            PrototypeMode::GlobalLocal => "global+local",
        }
    }
}

impl fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PrototypeMode::Global),
            "local" => Ok(PrototypeMode::Local),
            "global+local" | "global-local" => Ok(PrototypeMode::GlobalLocal),
            other => Err(Error::Param(format!("unknown prototype mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldConfig {
    pub k: usize,
    /// Sub-classes per class.
    pub n: usize,
    pub linkage: Linkage,
    pub scope: GraphScope,
    pub method: SubclassMethod,
    pub prototype_mode: PrototypeMode,
    pub seed: u64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n: 10,
            linkage: Linkage::Average,
            scope: GraphScope::PerClass,
            method: SubclassMethod::Geodesic,
            prototype_mode: PrototypeMode::Local,
            seed: 0,
        }
    }
}

impl ManifoldConfig {
    /// Sub-class count actually used per class under the prototype mode.
    pub fn effective_n(&self) -> usize {
        match self.prototype_mode {
            PrototypeMode::Global => 1,
            _ => self.n,
        }
    }
}

/// Per-class partitions and prototypes for a whole feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldState {
    pub partitions: Vec<SubclassPartition>,
    pub prototypes: Vec<PrototypeSet>,
    /// Sub-class of every row of the set the state was computed on.
    pub subclass_of_row: Vec<usize>,
}

impl ManifoldState {
    pub fn total_prototypes(&self) -> usize {
        self.prototypes.iter().map(PrototypeSet::len).sum()
    }

    pub fn write_partition_csv(&self, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(path)?);
            writeln!(out, "row_index,class,subclass")?;
            for (i, (&c, &s)) in labels.iter().zip(&self.subclass_of_row).enumerate() {
                writeln!(out, "{i},{c},{s}")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn write_prototypes_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dim = self.prototypes.first().map_or(0, |p| p.prototypes.ncols());
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(path)?);
            let cols: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
            writeln!(out, "class,subclass,{}", cols.join(","))?;
            for set in &self.prototypes {
                for (s, row) in set.prototypes.rows().into_iter().enumerate() {
                    let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    writeln!(out, "{},{s},{}", set.class_id, vals.join(","))?;
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// kNN graph, geodesics, agglomeration and prototypes for every class, all
/// on the current embeddings.
pub fn refresh_manifold(
    set: &LabeledFeatureSet,
    embeddings: ArrayView2<f64>,
    cfg: &ManifoldConfig,
) -> Result<ManifoldState> {
    if embeddings.nrows() != set.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} samples",
            embeddings.nrows(),
            set.len()
        )));
    }
    let n_classes = set.n_classes();
    let n = cfg.effective_n();
    let class_rows: Vec<Vec<usize>> = (0..n_classes).map(|c| set.class_indices(c)).collect();
    for (c, rows) in class_rows.iter().enumerate() {
        if rows.len() < n {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than {n} sub-classes",
                rows.len()
            )));
        }
        if cfg.method == SubclassMethod::Geodesic
            && cfg.scope == GraphScope::PerClass
            && n > 1
            && n < rows.len()
            && cfg.k >= rows.len()
        {
            return Err(Error::Config(format!(
                "k = {} must be below the {} samples of class {c}",
                cfg.k,
                rows.len()
            )));
        }
    }

    let global = match (cfg.method, cfg.scope) {
        (SubclassMethod::Geodesic, GraphScope::Global) => {
            Some(geodesic_all_pairs(&build_knn_graph(embeddings, cfg.k)?))
        }
        _ => None,
    };

    let per_class: Vec<(SubclassPartition, PrototypeSet)> = class_rows
        .par_iter()
        .enumerate()
        .map(|(c, rows)| {
            let emb = embeddings.select(Axis(0), rows);
            let mut partition = if n == rows.len() {
                SubclassPartition::canonical(&(0..rows.len()).collect::<Vec<_>>(), c)
            } else if n == 1 {
                SubclassPartition::canonical(&vec![0; rows.len()], c)
            } else {
                match cfg.method {
                    SubclassMethod::KMeans => {
                        kmeans(emb.view(), n, rng::derive(cfg.seed, c as u64))?
                    }
                    SubclassMethod::Geodesic => {
                        let m = match &global {
                            Some(g) => g.submatrix(rows),
                            None => geodesic_all_pairs(&build_knn_graph(emb.view(), cfg.k)?),
                        };
                        agglomerate(&m, n, cfg.linkage)?
                    }
                }
            };
            partition.class_id = c;
            let mut protos = compute_prototypes(emb.view(), &partition)?;
            if cfg.prototype_mode == PrototypeMode::GlobalLocal {
                protos = protos.with_global();
            }
            Ok((partition, protos))
        })
        .collect::<Result<_>>()?;

    let mut subclass_of_row = vec![0; set.len()];
    for (rows, (partition, _)) in class_rows.iter().zip(&per_class) {
        for (&r, &s) in rows.iter().zip(&partition.assignments) {
            subclass_of_row[r] = s;
        }
    }
    let (partitions, prototypes) = per_class.into_iter().unzip();
    Ok(ManifoldState {
        partitions,
        prototypes,
        subclass_of_row,
    })
}
