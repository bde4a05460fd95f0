//! Two-headed MLP encoder and the stage-one training loop.
//!
//! A ReLU trunk feeds a linear embedding head used by the manifold (or
//! cosine) loss, and a softmax head trained with cross-entropy. The softmax
//! head sits on the embedding by default; it can instead read the trunk
//! output directly (see [`HeadLayout`]). Either way the gradients of both
//! losses are summed where the two paths meet.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{refresh_manifold, ManifoldConfig, ManifoldState, SubclassMethod};
use crate::dataio::LabeledFeatureSet;
use crate::error::{Error, Result};
use crate::losses::{self, Batch, LossConfig};
use crate::nn::{check_finite, relu, softmax_backward, softmax_rows, Dense, DenseGrad, LayerRecord, Layers};
use crate::rng;

pub use crate::nn::sgd_step;

/// Where the softmax head reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HeadLayout {
    /// The softmax head is applied to the embedding, so both losses act on
    /// the same feature vector.
    #[default]
    Stacked,
    /// Both heads read the trunk output independently.
    Branched,
}

impl fmt::Display for HeadLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadLayout::Stacked => "stacked",
            HeadLayout::Branched => "branched",
        })
    }
}

impl FromStr for HeadLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(HeadLayout::Stacked),
            "branched" => Ok(HeadLayout::Branched),
            other => Err(Error::Param(format!("unknown head layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub input: usize,
    /// Widths of the ReLU trunk layers; at least one.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub layout: HeadLayout,
}

impl LayerDims {
    fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("encoder needs at least one trunk layer".into()));
        }
        if self.input == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {self:?}")));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "softmax head needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn softmax_input(&self) -> usize {
        match self.layout {
            HeadLayout::Stacked => self.embed_dim,
            HeadLayout::Branched => *self.hidden.last().unwrap_or(&self.input),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub trunk: Vec<Dense>,
    pub embed_head: Dense,
    pub softmax_head: Dense,
    pub dims: LayerDims,
}

impl Layers for EncoderModel {
    fn layers(&self) -> Vec<&Dense> {
        let mut out: Vec<&Dense> = self.trunk.iter().collect();
        out.push(&self.embed_head);
        out.push(&self.softmax_head);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.trunk.iter_mut().collect();
        out.push(&mut self.embed_head);
        out.push(&mut self.softmax_head);
        out
    }
}

pub fn init_encoder(dims: &LayerDims, seed: u64) -> Result<EncoderModel> {
    dims.validate()?;
    let mut rng = rng::seeded(seed);
    let mut trunk = Vec::with_capacity(dims.hidden.len());
    let mut width = dims.input;
    for &h in &dims.hidden {
        trunk.push(Dense::he_uniform(width, h, &mut rng));
        width = h;
    }
    Ok(EncoderModel {
        trunk,
        embed_head: Dense::he_uniform(width, dims.embed_dim, &mut rng),
        softmax_head: Dense::he_uniform(dims.softmax_input(), dims.n_classes, &mut rng),
        dims: dims.clone(),
    })
}

/// Activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each trunk layer, then the trunk output last.
    activations: Vec<Array2<f64>>,
    embeddings: Array2<f64>,
    probabilities: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub cache: ForwardCache,
}

fn trunk_forward(model: &EncoderModel, inputs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    if inputs.ncols() != model.dims.input {
        return Err(Error::Shape(format!(
            "input has {} columns, encoder expects {}",
            inputs.ncols(),
            model.dims.input
        )));
    }
    let mut activations = Vec::with_capacity(model.trunk.len() + 1);
    activations.push(inputs.to_owned());
    for (i, layer) in model.trunk.iter().enumerate() {
        let mut z = layer.forward(activations[i].view());
        check_finite(&z, &format!("trunk layer {i}"))?;
        relu(&mut z);
        activations.push(z);
    }
    Ok(activations)
}

pub fn forward(model: &EncoderModel, inputs: ArrayView2<f64>) -> Result<ForwardOutput> {
    let activations = trunk_forward(model, inputs)?;
    let top = activations.last().expect("input is always present");
    let embeddings = model.embed_head.forward(top.view());
    check_finite(&embeddings, "embedding head")?;
    let logits = match model.dims.layout {
        HeadLayout::Stacked => model.softmax_head.forward(embeddings.view()),
        HeadLayout::Branched => model.softmax_head.forward(top.view()),
    };
    check_finite(&logits, "softmax head")?;
    let probabilities = softmax_rows(&logits);
    Ok(ForwardOutput {
        embeddings: embeddings.clone(),
        probabilities: probabilities.clone(),
        cache: ForwardCache {
            activations,
            embeddings,
            probabilities,
        },
    })
}

/// Gradients of every layer in [`Layers::layers`] order: trunk, embedding
/// head, softmax head.
pub fn backward(
    model: &EncoderModel,
    cache: &ForwardCache,
    grad_embeddings: ArrayView2<f64>,
    grad_probabilities: ArrayView2<f64>,
) -> Result<Vec<DenseGrad>> {
    let rows = cache.probabilities.nrows();
    if grad_embeddings.dim() != (rows, model.dims.embed_dim) {
        return Err(Error::Shape(format!(
            "embedding gradient {:?}, expected {:?}",
            grad_embeddings.dim(),
            (rows, model.dims.embed_dim)
        )));
    }
    if grad_probabilities.dim() != cache.probabilities.dim() {
        return Err(Error::Shape(format!(
            "probability gradient {:?}, expected {:?}",
            grad_probabilities.dim(),
            cache.probabilities.dim()
        )));
    }
    let top = cache.activations.last().expect("input is always present");
    let grad_logits = softmax_backward(&cache.probabilities, grad_probabilities);
    let (g_embed, g_soft, mut grad) = match model.dims.layout {
        HeadLayout::Stacked => {
            let (g_soft, from_soft) = model.softmax_head.backward(cache.embeddings.view(), grad_logits.view());
            let (g_embed, grad) = model.embed_head.backward(top.view(), (&grad_embeddings + &from_soft).view());
            (g_embed, g_soft, grad)
        }
        HeadLayout::Branched => {
            let (g_embed, from_embed) = model.embed_head.backward(top.view(), grad_embeddings);
            let (g_soft, from_soft) = model.softmax_head.backward(top.view(), grad_logits.view());
            (g_embed, g_soft, from_embed + from_soft)
        }
    };
    let mut trunk_grads = Vec::with_capacity(model.trunk.len());
    for (i, layer) in model.trunk.iter().enumerate().rev() {
        // activations[i + 1] = relu(z_i)
        grad.zip_mut_with(&cache.activations[i + 1], |g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let (g, grad_in) = layer.backward(cache.activations[i].view(), grad.view());
        trunk_grads.push(g);
        grad = grad_in;
    }
    trunk_grads.reverse();
    trunk_grads.push(g_embed);
    trunk_grads.push(g_soft);
    Ok(trunk_grads)
}

/// Embedding-head outputs for every row of `set`.
pub fn extract_embeddings(model: &EncoderModel, set: &LabeledFeatureSet) -> Result<Array2<f64>> {
    embed(model, set.features())
}

pub fn embed(model: &EncoderModel, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let activations = trunk_forward(model, inputs)?;
    let embeddings = model
        .embed_head
        .forward(activations.last().expect("input is always present").view());
    check_finite(&embeddings, "embedding head")?;
    Ok(embeddings)
}

/// Which contrastive term is paired with cross-entropy during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Intra + inter sub-class losses on geodesic sub-classes.
    #[default]
    Geodesic,
    /// Cosine prototype (NT-Xent style) loss on k-means sub-classes.
    Cosine,
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Geodesic => "geodesic",
            LossVariant::Cosine => "cosine",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geodesic" => Ok(LossVariant::Geodesic),
            "cosine" => Ok(LossVariant::Cosine),
            other => Err(Error::Param(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub layout: HeadLayout,
    pub lr: f64,
    /// Time-based decay: `lr_t = lr / (1 + lr_decay · step)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Re-cluster every this many epochs, starting at epoch 0.
    pub refresh_every: usize,
    pub manifold: ManifoldConfig,
    pub loss: LossConfig,
    pub variant: LossVariant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 32,
            layout: HeadLayout::Stacked,
            lr: 1e-4,
            lr_decay: 1e-6,
            batch_size: 64,
            epochs: 50,
            refresh_every: 5,
            manifold: ManifoldConfig::default(),
            loss: LossConfig::default(),
            variant: LossVariant::Geodesic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that train the small synthetic benchmarks in seconds.
    pub fn desk() -> Self {
        Self {
            hidden: vec![128, 128],
            embed_dim: 16,
            lr: 0.1,
            lr_decay: 1e-4,
            batch_size: 16,
            epochs: 600,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.lr_decay.is_nan() || self.lr_decay < 0.0 {
            return Err(Error::Config("learning rate and decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.refresh_every == 0 {
            return Err(Error::Config("batch_size and refresh_every must be positive".into()));
        }
        if self.manifold.k == 0 || self.manifold.n == 0 {
            return Err(Error::Config("k and n must be positive".into()));
        }
        self.loss.validate()
    }

    /// The clustering configuration actually used: the cosine baseline
    /// discovers sub-classes with k-means.
    pub fn effective_manifold(&self) -> ManifoldConfig {
        let mut m = self.manifold.clone();
        if self.variant == LossVariant::Cosine {
            m.method = SubclassMethod::KMeans;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_ce: f64,
    pub l_total: f64,
    /// Softmax-head accuracy on the full training set after the epoch.
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_intra,l_inter,l_ce,l_total,train_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                r.epoch, r.l_intra, r.l_inter, r.l_ce, r.l_total, r.train_acc
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Batch order in which every class is spread evenly: each row gets the key
/// `(rank within its shuffled class + u) / class size` with `u ~ U(0, 1)`.
fn stratified_order<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<usize> {
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut keyed = Vec::with_capacity(labels.len());
    for c in 0..n_classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(rng);
        let size = rows.len() as f64;
        for (rank, row) in rows.into_iter().enumerate() {
            let key = (rank as f64 + rng.random::<f64>()) / size;
            keyed.push((key, row));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, row)| row).collect()
}

fn accuracy(probabilities: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probabilities
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    correct as f64 / labels.len() as f64
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Trains the encoder on `train_set`.
///
/// The manifold partition is recomputed from full-set embeddings at every
/// epoch that is a multiple of `refresh_every` (including epoch 0) and held
/// fixed in between.
pub fn train_encoder(train_set: &LabeledFeatureSet, cfg: &TrainConfig) -> Result<(EncoderModel, TrainHistory)> {
    train_encoder_observed(train_set, cfg, |_, _| {})
}

/// [`train_encoder`] with a callback invoked after every manifold refresh.
pub fn train_encoder_observed<F: FnMut(usize, &ManifoldState)>(
    train_set: &LabeledFeatureSet,
    cfg: &TrainConfig,
    mut on_refresh: F,
) -> Result<(EncoderModel, TrainHistory)> {
    cfg.validate()?;
    let n_classes = train_set.n_classes();
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, found {n_classes}"
        )));
    }
    train_set.check_classes(n_classes)?;
    let manifold_cfg = cfg.effective_manifold();
    let n = manifold_cfg.effective_n();
    for c in 0..n_classes {
        let count = train_set.class_indices(c).len();
        if count < n {
            return Err(Error::Config(format!(
                "class {c} has {count} samples, fewer than {n} sub-classes"
            )));
        }
    }

    let dims = LayerDims {
        input: train_set.dim(),
        hidden: cfg.hidden.clone(),
        embed_dim: cfg.embed_dim,
        n_classes,
        layout: cfg.layout,
    };
    let mut model = init_encoder(&dims, rng::derive(cfg.seed, 0))?;
    let mut history = TrainHistory::default();
    let mut order_rng = rng::seeded(rng::derive(cfg.seed, 1));
    let labels = train_set.labels();
    let features = train_set.features();
    let mut state: Option<ManifoldState> = None;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_every == 0 || state.is_none() {
            let emb = extract_embeddings(&model, train_set)?;
            let mut mcfg = manifold_cfg.clone();
            mcfg.seed = rng::derive(cfg.seed, 2 + epoch as u64);
            let fresh = refresh_manifold(train_set, emb.view(), &mcfg)?;
            on_refresh(epoch, &fresh);
            state = Some(fresh);
        }
        let manifold = state.as_ref().expect("refreshed above");

        let order = stratified_order(labels, &mut order_rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let x = features.select(Axis(0), chunk);
            let out = forward(&model, x.view())?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::new(
                out.embeddings,
                batch_labels.clone(),
                chunk.iter().map(|&i| manifold.subclass_of_row[i]).collect(),
            )?;
            let (grad_emb, grad_probs, terms) = match cfg.variant {
                LossVariant::Geodesic => {
                    let t = losses::total_loss(
                        &batch,
                        &manifold.prototypes,
                        out.probabilities.view(),
                        &batch_labels,
                        &cfg.loss,
                    )?;
                    (t.grad_embeddings, t.grad_probabilities, [t.intra, t.inter, t.ce, t.value])
                }
                LossVariant::Cosine => {
                    let contrast = losses::cosine_prototype_loss(&batch, &manifold.prototypes, &cfg.loss)?;
                    let ce = losses::cross_entropy(out.probabilities.view(), &batch_labels)?;
                    // intra/inter are logged for comparison only
                    let intra = losses::intra_loss(&batch, &manifold.prototypes)?.value;
                    let inter = losses::inter_loss(&batch, &manifold.prototypes, &cfg.loss)?.value;
                    (contrast.grad, ce.grad, [intra, inter, ce.value, contrast.value + ce.value])
                }
            };
            let grads = backward(&model, &out.cache, grad_emb.view(), grad_probs.view())?;
            sgd_step(&mut model, &grads, cfg.lr, cfg.lr_decay, step)?;
            step += 1;
            let w = chunk.len() as f64;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += w * t;
            }
        }

        let total = train_set.len() as f64;
        let probs = forward(&model, features)?.probabilities;
        history.records.push(EpochRecord {
            epoch,
            l_intra: sums[0] / total,
            l_inter: sums[1] / total,
            l_ce: sums[2] / total,
            l_total: sums[3] / total,
            train_acc: accuracy(&probs, labels),
        });
    }
    Ok((model, history))
}

const ENCODER_FORMAT: &str = "geocon-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    format: String,
    version: u32,
    dims: LayerDims,
    trunk: Vec<LayerRecord>,
    embed_head: LayerRecord,
    softmax_head: LayerRecord,
}

impl EncoderModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = EncoderCheckpoint {
            format: ENCODER_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims.clone(),
            trunk: self.trunk.iter().map(LayerRecord::from).collect(),
            embed_head: (&self.embed_head).into(),
            softmax_head: (&self.softmax_head).into(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &ckpt).map_err(|e| Error::Data(e.to_string()))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: EncoderCheckpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ckpt.format != ENCODER_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: not a version {CHECKPOINT_VERSION} encoder checkpoint",
                path.display()
            )));
        }
        let model = Self {
            trunk: ckpt.trunk.iter().map(Dense::try_from).collect::<Result<_>>()?,
            embed_head: Dense::try_from(&ckpt.embed_head)?,
            softmax_head: Dense::try_from(&ckpt.softmax_head)?,
            dims: ckpt.dims,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        let mut width = self.dims.input;
        for (layer, &h) in self.trunk.iter().zip(&self.dims.hidden) {
            if layer.inputs() != width || layer.outputs() != h {
                return Err(Error::Data("trunk layer shapes do not compose".into()));
            }
            width = h;
        }
        if self.trunk.len() != self.dims.hidden.len()
            || self.embed_head.inputs() != width
            || self.embed_head.outputs() != self.dims.embed_dim
            || self.softmax_head.inputs() != self.dims.softmax_input()
            || self.softmax_head.outputs() != self.dims.n_classes
        {
            return Err(Error::Data("head shapes do not match dims".into()));
        }
        Ok(())
    }
}
