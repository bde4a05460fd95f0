//! Loss terms with analytic gradients with respect to the embeddings (or,
//! for cross-entropy, the predicted probabilities).
//!
//! Prototypes are constants everywhere: they are recomputed from the
//! embeddings at refresh time and never receive gradient.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::cluster::PrototypeSet;
use crate::error::{Error, Result};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// One mini-batch of embeddings with the class and sub-class of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Array2<f64>,
    pub class_labels: Vec<usize>,
    /// Index into the row's class [`PrototypeSet`].
    pub subclass: Vec<usize>,
}

impl Batch {
    pub fn new(embeddings: Array2<f64>, class_labels: Vec<usize>, subclass: Vec<usize>) -> Result<Self> {
        let n = embeddings.nrows();
        if class_labels.len() != n || subclass.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} rows with {} labels and {} sub-classes",
                class_labels.len(),
                subclass.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding in batch".into()));
        }
        Ok(Self {
            embeddings,
            class_labels,
            subclass,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }
}

/// How inter-class terms are aggregated. Only the mean over ordered
/// `(A, B)` class pairs present in the batch is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassPairMode {
    #[default]
    OrderedMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Margin between classes for the inter-subclass hinge.
    pub margin: f64,
    /// Clamp each inter term at zero (`max(0, margin - D)`).
    pub inter_clamp: bool,
    /// Temperature of the cosine baseline.
    pub temperature: f64,
    pub class_pair_mode: ClassPairMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            inter_clamp: true,
            temperature: 0.5,
            class_pair_mode: ClassPairMode::OrderedMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the batch embeddings (or
/// probabilities for [`cross_entropy`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossValue {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros((rows, cols)),
        }
    }
}

fn positive_prototype<'a>(
    prototypes: &'a [PrototypeSet],
    class: usize,
    subclass: usize,
) -> Result<ArrayView1<'a, f64>> {
    let set = prototypes
        .get(class)
        .ok_or_else(|| Error::Index(format!("no prototypes for class {class}")))?;
    if subclass >= set.local_count() {
        return Err(Error::Index(format!(
            "sub-class {subclass} of class {class} (has {})",
            set.local_count()
        )));
    }
    Ok(set.prototypes.row(subclass))
}

/// Mean squared distance of each embedding to its own sub-class prototype.
pub fn intra_loss(batch: &Batch, prototypes: &[PrototypeSet]) -> Result<LossValue> {
    let (rows, cols) = batch.embeddings.dim();
    let mut out = LossValue::zeros(rows, cols);
    if rows == 0 {
        return Ok(out);
    }
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let p = positive_prototype(prototypes, batch.class_labels[i], batch.subclass[i])?;
        let diff = &batch.embeddings.row(i) - &p;
        out.value += diff.dot(&diff) * scale;
        out.grad.row_mut(i).assign(&(diff * (2.0 * scale)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// The supremum was attained over `Y` (outer point in `Y`).
    YToZ,
    /// The supremum was attained over `Z` (outer point in `Z`).
    ZToY,
}

/// The pair of points realising a Hausdorff distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Witness {
    pub y: usize,
    pub z: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hausdorff {
    pub value: f64,
    pub witness: Witness,
}

fn directed(from: ArrayView2<f64>, to: ArrayView2<f64>) -> (f64, usize, usize) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for (i, a) in from.rows().into_iter().enumerate() {
        let mut inner = (f64::INFINITY, 0);
        for (j, b) in to.rows().into_iter().enumerate() {
            let d = (&a - &b).mapv(|v| v * v).sum();
            if d < inner.0 {
                inner = (d, j);
            }
        }
        if inner.0 > best.0 {
            best = (inner.0, i, inner.1);
        }
    }
    (best.0.sqrt(), best.1, best.2)
}

/// Symmetric Hausdorff distance between two point sets (rows).
///
/// Ties resolve to the first witness in row order, preferring the `Y → Z`
/// direction when both directed distances are equal.
pub fn hausdorff(y: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Hausdorff> {
    if y.nrows() == 0 || z.nrows() == 0 {
        return Err(Error::Param("Hausdorff distance of an empty set".into()));
    }
    if y.ncols() != z.ncols() {
        return Err(Error::Shape(format!("point dims {} and {}", y.ncols(), z.ncols())));
    }
    let (yz, yi, zi) = directed(y, z);
    let (zy, zo, yo) = directed(z, y);
    Ok(if zy > yz {
        Hausdorff {
            value: zy,
            witness: Witness {
                y: yo,
                z: zo,
                direction: Direction::ZToY,
            },
        }
    } else {
        Hausdorff {
            value: yz,
            witness: Witness {
                y: yi,
                z: zi,
                direction: Direction::YToZ,
            },
        }
    })
}

/// Margin hinge on the Hausdorff distance between the batch's class-`A`
/// embeddings and class-`B` prototypes, averaged over ordered class pairs.
///
/// The gradient is the subgradient through the witness embedding of each
/// active term.
pub fn inter_loss(batch: &Batch, prototypes: &[PrototypeSet], cfg: &LossConfig) -> Result<LossValue> {
    if prototypes.len() < 2 {
        return Err(Error::Config(format!(
            "inter-subclass loss needs at least 2 classes, got {}",
            prototypes.len()
        )));
    }
    let (rows, cols) = batch.embeddings.dim();
    let mut out = LossValue::zeros(rows, cols);

    let mut present: Vec<usize> = batch.class_labels.clone();
    present.sort_unstable();
    present.dedup();

    let mut terms = 0usize;
    let mut contributions = Vec::new();
    for &a in &present {
        if a >= prototypes.len() {
            return Err(Error::Index(format!("class {a} has no prototypes")));
        }
        let members: Vec<usize> = (0..rows).filter(|&i| batch.class_labels[i] == a).collect();
        let y = batch.embeddings.select(Axis(0), &members);
        for (b, protos) in prototypes.iter().enumerate() {
            if b == a {
                continue;
            }
            let h = hausdorff(y.view(), protos.prototypes.view())?;
            let term = cfg.margin - h.value;
            terms += 1;
            let active = !cfg.inter_clamp || term > 0.0;
            if active {
                out.value += term;
                contributions.push((members[h.witness.y], h, b));
            }
        }
    }
    if terms == 0 {
        return Ok(out);
    }
    let scale = 1.0 / terms as f64;
    out.value *= scale;
    for (row, h, b) in contributions {
        if h.value > 0.0 {
            let diff = &batch.embeddings.row(row) - &prototypes[b].prototypes.row(h.witness.z);
            // d(margin - D)/dy = -(y - z*)/|y - z*|
            out.grad
                .row_mut(row)
                .scaled_add(-scale / h.value, &diff);
        }
    }
    Ok(out)
}

/// Sum of [`intra_loss`] and [`inter_loss`].
pub fn manifold_loss(batch: &Batch, prototypes: &[PrototypeSet], cfg: &LossConfig) -> Result<LossValue> {
    let intra = intra_loss(batch, prototypes)?;
    let inter = inter_loss(batch, prototypes, cfg)?;
    Ok(LossValue {
        value: intra.value + inter.value,
        grad: intra.grad + inter.grad,
    })
}

/// Cross-entropy of predicted class probabilities.
///
/// Two classes use the binary form on `p = probabilities[:, 1]`:
/// `-(1/I) Σ [y log p + (1 - y) log(1 - p)]`, so the gradient lives in
/// column 1 only. More classes use `-(1/I) Σ log p[y]`.
pub fn cross_entropy(probabilities: ArrayView2<f64>, labels: &[usize]) -> Result<LossValue> {
    let (rows, classes) = probabilities.dim();
    if labels.len() != rows {
        return Err(Error::Shape(format!("{rows} probability rows for {} labels", labels.len())));
    }
    if classes < 2 {
        return Err(Error::Shape(format!("cross-entropy needs at least 2 classes, got {classes}")));
    }
    let mut out = LossValue::zeros(rows, classes);
    if rows == 0 {
        return Ok(out);
    }
    let scale = 1.0 / rows as f64;
    for (i, row) in probabilities.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        if total.is_nan() || (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Numeric(format!("probability row {i} is not a distribution")));
        }
        let label = labels[i];
        if label >= classes {
            return Err(Error::Index(format!("label {label} with {classes} classes")));
        }
        if classes == 2 {
            let p = row[1].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = label as f64;
            out.value -= scale * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            out.grad[[i, 1]] = -scale * (y / p - (1.0 - y) / (1.0 - p));
        } else {
            let p = row[label].max(PROB_EPS);
            out.value -= scale * p.ln();
            out.grad[[i, label]] = -scale / p;
        }
    }
    Ok(out)
}

/// All terms of the stage-one objective and the gradients at both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub intra: f64,
    pub inter: f64,
    pub ce: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_probabilities: Array2<f64>,
}

/// Manifold loss on the embedding head plus cross-entropy on the softmax head.
pub fn total_loss(
    batch: &Batch,
    prototypes: &[PrototypeSet],
    probabilities: ArrayView2<f64>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let intra = intra_loss(batch, prototypes)?;
    let inter = inter_loss(batch, prototypes, cfg)?;
    let ce = cross_entropy(probabilities, labels)?;
    Ok(TotalLoss {
        value: intra.value + inter.value + ce.value,
        intra: intra.value,
        inter: inter.value,
        ce: ce.value,
        grad_embeddings: intra.grad + inter.grad,
        grad_probabilities: ce.grad,
    })
}

/// NT-Xent style prototype loss with cosine similarity: each embedding is
/// classified against every prototype of every class with its own
/// sub-class prototype as the positive.
pub fn cosine_prototype_loss(
    batch: &Batch,
    prototypes: &[PrototypeSet],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let (rows, cols) = batch.embeddings.dim();
    let mut out = LossValue::zeros(rows, cols);
    if rows == 0 {
        return Ok(out);
    }
    let tau = cfg.temperature;
    let mut offsets = Vec::with_capacity(prototypes.len());
    let mut all: Vec<ArrayView1<f64>> = Vec::new();
    for set in prototypes {
        offsets.push(all.len());
        all.extend(set.prototypes.rows());
    }
    let norms: Vec<f64> = all.iter().map(|p| p.dot(p).sqrt()).collect();
    if let Some(zero) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Numeric(format!("prototype {zero} has zero norm")));
    }

    let scale = 1.0 / rows as f64;
    let mut cos = vec![0.0; all.len()];
    for i in 0..rows {
        let class = batch.class_labels[i];
        positive_prototype(prototypes, class, batch.subclass[i])?;
        let pos = offsets[class] + batch.subclass[i];
        let f = batch.embeddings.row(i);
        let nf = f.dot(&f).sqrt();
        if nf == 0.0 {
            return Err(Error::Numeric(format!("embedding {i} has zero norm")));
        }
        for (c, (p, &np)) in cos.iter_mut().zip(all.iter().zip(&norms)) {
            *c = f.dot(p) / (nf * np);
        }
        let max = cos.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(c / tau));
        let sum: f64 = cos.iter().map(|&c| (c / tau - max).exp()).sum();
        let lse = max + sum.ln();
        out.value += scale * (lse - cos[pos] / tau);

        let mut g = out.grad.row_mut(i);
        for (k, (p, &np)) in all.iter().zip(&norms).enumerate() {
            let q = (cos[k] / tau - lse).exp();
            let coeff = (q - if k == pos { 1.0 } else { 0.0 }) * scale / tau;
            if coeff == 0.0 {
                continue;
            }
            // d cos / d f = p / (|f||p|) - cos f / |f|^2
            g.scaled_add(coeff / (nf * np), p);
            g.scaled_add(-coeff * cos[k] / (nf * nf), &f);
        }
    }
    Ok(out)
}
