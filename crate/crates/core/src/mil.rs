//! Stage two: bags of embedded patches, a bag classifier and per-slide
//! majority voting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::strictly_closer;
use crate::dataio::LabeledFeatureSet;
use crate::encoder::{self, argmax, EncoderModel, LossVariant, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{sgd_step, LayerRecord, Mlp};
use crate::rng;

/// How the sampled patch embeddings of a bag become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BagPooling {
    /// Concatenate in sampled order: `patches_per_bag · D'` values.
    #[default]
    Concat,
    /// Average the sampled embeddings: `D'` values.
    Mean,
}

impl fmt::Display for BagPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BagPooling::Concat => "concat",
            BagPooling::Mean => "mean",
        })
    }
}

impl FromStr for BagPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(BagPooling::Concat),
            "mean" => Ok(BagPooling::Mean),
            other => Err(Error::Param(format!("unknown bag pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilConfig {
    pub bags_per_slide: usize,
    pub patches_per_bag: usize,
    /// Width of both hidden layers of the bag classifier.
    pub classifier_hidden: usize,
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pooling: BagPooling,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            bags_per_slide: 50,
            patches_per_bag: 100,
            classifier_hidden: 512,
            lr: 1e-3,
            decay: 1e-6,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            pooling: BagPooling::Concat,
        }
    }
}

impl MilConfig {
    /// Narrower classifier and a larger step for the small synthetic runs.
    pub fn desk() -> Self {
        Self {
            classifier_hidden: 64,
            lr: 0.01,
            decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags_per_slide == 0
            || self.patches_per_bag == 0
            || self.classifier_hidden == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "bags_per_slide, patches_per_bag, classifier_hidden and batch_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.decay.is_nan() || self.decay < 0.0 {
            return Err(Error::Config("MIL learning rate and decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn bag_dim(&self, embed_dim: usize) -> usize {
        match self.pooling {
            BagPooling::Concat => self.patches_per_bag * embed_dim,
            BagPooling::Mean => embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub bag_vector: Array1<f64>,
    pub slide_id: String,
    pub label: usize,
}

/// Samples `bags_per_slide` bags from one slide's patch embeddings.
///
/// Patches are drawn without replacement when the slide has at least
/// `patches_per_bag` of them, otherwise with replacement. The draw depends
/// only on `seed` and `slide_id`.
pub fn make_bags(
    embeddings: ArrayView2<f64>,
    slide_id: &str,
    label: usize,
    cfg: &MilConfig,
    seed: u64,
) -> Result<Vec<MilBag>> {
    cfg.validate()?;
    let (n, d) = embeddings.dim();
    if n == 0 {
        return Err(Error::Data(format!("slide `{slide_id}` has no patches")));
    }
    let mut rng = rng::keyed(seed, slide_id);
    let p = cfg.patches_per_bag;
    let mut bags = Vec::with_capacity(cfg.bags_per_slide);
    for _ in 0..cfg.bags_per_slide {
        let picks: Vec<usize> = if n >= p {
            index::sample(&mut rng, n, p).into_vec()
        } else {
            (0..p).map(|_| rng.random_range(0..n)).collect()
        };
        let bag_vector = match cfg.pooling {
            BagPooling::Concat => {
                let mut v = Array1::zeros(p * d);
                for (slot, &row) in picks.iter().enumerate() {
                    v.slice_mut(ndarray::s![slot * d..(slot + 1) * d])
                        .assign(&embeddings.row(row));
                }
                v
            }
            BagPooling::Mean => embeddings.select(Axis(0), &picks).mean_axis(Axis(0)).expect("p > 0"),
        };
        bags.push(MilBag {
            bag_vector,
            slide_id: slide_id.to_owned(),
            label,
        });
    }
    Ok(bags)
}

/// Bags for every slide of `set`, using `embeddings` (one row per set row).
/// Slides are emitted in sorted id order and labeled by majority row label.
pub fn bags_for_set(
    set: &LabeledFeatureSet,
    embeddings: ArrayView2<f64>,
    cfg: &MilConfig,
    seed: u64,
) -> Result<Vec<MilBag>> {
    if embeddings.nrows() != set.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} samples",
            embeddings.nrows(),
            set.len()
        )));
    }
    let mut rows: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in set.group_ids().iter().enumerate() {
        rows.entry(g.as_str()).or_default().push(i);
    }
    let labels = set.group_labels();
    let per_slide: Vec<Result<Vec<MilBag>>> = rows
        .par_iter()
        .map(|(slide, idx)| {
            let emb = embeddings.select(Axis(0), idx);
            make_bags(emb.view(), slide, labels[slide], cfg, seed)
        })
        .collect();
    let mut out = Vec::new();
    for bags in per_slide {
        out.extend(bags?);
    }
    Ok(out)
}

fn stack(bags: &[&MilBag]) -> Array2<f64> {
    let dim = bags[0].bag_vector.len();
    let mut x = Array2::zeros((bags.len(), dim));
    for (mut row, bag) in x.rows_mut().into_iter().zip(bags) {
        row.assign(&bag.bag_vector);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilClassifier {
    pub net: Mlp,
    pub n_classes: usize,
}

impl MilClassifier {
    pub fn bag_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Class probabilities for each bag, one row per bag.
    pub fn predict_proba(&self, bags: &[MilBag]) -> Result<Array2<f64>> {
        if bags.is_empty() {
            return Ok(Array2::zeros((0, self.n_classes)));
        }
        let refs: Vec<&MilBag> = bags.iter().collect();
        self.check_dims(&refs)?;
        Ok(self.net.forward(stack(&refs).view())?.0)
    }

    fn check_dims(&self, bags: &[&MilBag]) -> Result<()> {
        match bags.iter().find(|b| b.bag_vector.len() != self.bag_dim()) {
            Some(b) => Err(Error::Shape(format!(
                "bag of slide `{}` has {} values, classifier expects {}",
                b.slide_id,
                b.bag_vector.len(),
                self.bag_dim()
            ))),
            None => Ok(()),
        }
    }
}

/// Trains `[bag_dim → h → h → C]` with cross-entropy and SGD.
pub fn train_mil(bags: &[MilBag], cfg: &MilConfig) -> Result<MilClassifier> {
    cfg.validate()?;
    let Some(first) = bags.first() else {
        return Err(Error::Config("no bags to train on".into()));
    };
    let n_classes = bags.iter().map(|b| b.label).max().unwrap_or(0) + 1;
    let distinct = bags.iter().map(|b| b.label).collect::<std::collections::BTreeSet<_>>();
    if distinct.len() < 2 {
        return Err(Error::Config(format!(
            "bag labels span a single class ({:?})",
            distinct.iter().next()
        )));
    }
    let dim = first.bag_vector.len();
    let h = cfg.classifier_hidden;
    let mut clf = MilClassifier {
        net: Mlp::new(&[dim, h, h, n_classes.max(2)], rng::derive(cfg.seed, 0))?,
        n_classes: n_classes.max(2),
    };
    let refs: Vec<&MilBag> = bags.iter().collect();
    clf.check_dims(&refs)?;

    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut rng = rng::seeded(rng::derive(cfg.seed, 1));
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MilBag> = chunk.iter().map(|&i| &bags[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
            let (probs, cache) = clf.net.forward(stack(&batch).view())?;
            let loss = cross_entropy(probs.view(), &labels)?;
            let grads = clf.net.backward(&cache, loss.grad.view())?;
            sgd_step(&mut clf.net, &grads, cfg.lr, cfg.decay, step)?;
            step += 1;
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub bag_predictions: Vec<usize>,
    pub final_label: usize,
    pub vote_fraction: f64,
}

/// Majority vote over bag-level argmax predictions.
///
/// Ties between equally frequent labels go to the one with the higher mean
/// predicted probability across the slide's bags, then to the lower index.
/// Means equal within the clustering tie tolerance count as equal.
pub fn vote(probabilities: ArrayView2<f64>) -> Result<(Vec<usize>, usize, f64)> {
    let (rows, classes) = probabilities.dim();
    if rows == 0 {
        return Err(Error::Data("cannot vote over zero bags".into()));
    }
    let preds: Vec<usize> = probabilities
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();
    let mut counts = vec![0usize; classes];
    for &p in &preds {
        counts[p] += 1;
    }
    let mean = probabilities.mean_axis(Axis(0)).expect("rows > 0");
    let mut best = 0;
    for c in 1..classes {
        if counts[c] > counts[best] || (counts[c] == counts[best] && strictly_closer(-mean[c], -mean[best])) {
            best = c;
        }
    }
    let fraction = counts[best] as f64 / rows as f64;
    Ok((preds, best, fraction))
}

pub fn predict_slide(classifier: &MilClassifier, bags: &[MilBag]) -> Result<SlidePrediction> {
    let Some(first) = bags.first() else {
        return Err(Error::Data("predict_slide needs at least one bag".into()));
    };
    if let Some(other) = bags.iter().find(|b| b.slide_id != first.slide_id) {
        return Err(Error::Data(format!(
            "bags from slides `{}` and `{}` passed together",
            first.slide_id, other.slide_id
        )));
    }
    let probs = classifier.predict_proba(bags)?;
    let (bag_predictions, final_label, vote_fraction) = vote(probs.view())?;
    Ok(SlidePrediction {
        slide_id: first.slide_id.clone(),
        bag_predictions,
        final_label,
        vote_fraction,
    })
}

/// One prediction per slide, in sorted slide order.
pub fn predict_slides(classifier: &MilClassifier, bags: &[MilBag]) -> Result<Vec<SlidePrediction>> {
    let mut by_slide: BTreeMap<&str, Vec<MilBag>> = BTreeMap::new();
    for b in bags {
        by_slide.entry(b.slide_id.as_str()).or_default().push(b.clone());
    }
    by_slide.values().map(|bs| predict_slide(classifier, bs)).collect()
}

/// Slide-level truth taken from the bags themselves.
pub fn slide_truth(bags: &[MilBag]) -> BTreeMap<String, usize> {
    bags.iter().map(|b| (b.slide_id.clone(), b.label)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn mean(runs: &[Metrics]) -> Metrics {
        if runs.is_empty() {
            return Metrics::default();
        }
        let n = runs.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: sum(|m| m.accuracy),
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-averaged precision, recall and F1.
///
/// Classes are those present in the truth or the predictions; a class with
/// no predicted (or no true) members contributes 0 precision (or recall).
pub fn evaluate(predictions: &[SlidePrediction], truth: &BTreeMap<String, usize>) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        let &t = truth
            .get(&p.slide_id)
            .ok_or_else(|| Error::Data(format!("no ground truth for slide `{}`", p.slide_id)))?;
        pairs.push((t, p.final_label));
    }
    let classes: std::collections::BTreeSet<usize> = pairs.iter().flat_map(|&(t, p)| [t, p]).collect();
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count();
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count();
        let actual = pairs.iter().filter(|&&(t, _)| t == c).count();
        let pr = ratio(tp, predicted);
        let rc = ratio(tp, actual);
        precision += pr;
        recall += rc;
        f1 += if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 };
    }
    let k = classes.len() as f64;
    Ok(Metrics {
        accuracy: ratio(correct, pairs.len()),
        precision: precision / k,
        recall: recall / k,
        f1: f1 / k,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub variant: LossVariant,
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
    /// Slide predictions of the first repeat.
    pub predictions: Vec<SlidePrediction>,
    pub truth: BTreeMap<String, usize>,
    pub history: TrainHistory,
    /// Prototypes across all classes at the final manifold refresh.
    pub prototype_count: usize,
    pub encoder: EncoderModel,
}

impl ExperimentReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("run,accuracy,precision,recall,f1\n");
        let row = |name: &str, m: &Metrics| {
            format!("{name},{:?},{:?},{:?},{:?}\n", m.accuracy, m.precision, m.recall, m.f1)
        };
        for (i, m) in self.runs.iter().enumerate() {
            out.push_str(&row(&i.to_string(), m));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }

    pub fn predictions_csv(&self) -> String {
        predictions_csv(&self.predictions, &self.truth)
    }
}

pub fn predictions_csv(predictions: &[SlidePrediction], truth: &BTreeMap<String, usize>) -> String {
    let mut out = String::from("slide_id,true_label,predicted_label,vote_fraction\n");
    for p in predictions {
        let t = truth.get(&p.slide_id).map_or(String::new(), |t| t.to_string());
        out.push_str(&format!("{},{},{},{:?}\n", p.slide_id, t, p.final_label, p.vote_fraction));
    }
    out
}

/// Trains the encoder once, then trains and evaluates the bag classifier
/// `repeats` times with independent seeds.
pub fn run_experiment(
    train: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    encoder_cfg: &TrainConfig,
    mil_cfg: &MilConfig,
    variant: LossVariant,
    repeats: usize,
) -> Result<ExperimentReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    mil_cfg.validate()?;
    let mut enc_cfg = encoder_cfg.clone();
    enc_cfg.variant = variant;
    let mut prototype_count = 0;
    let (model, history) =
        encoder::train_encoder_observed(train, &enc_cfg, |_, s| prototype_count = s.total_prototypes())?;
    let train_emb = encoder::extract_embeddings(&model, train)?;
    let test_emb = encoder::extract_embeddings(&model, test)?;

    let mut runs = Vec::with_capacity(repeats);
    let mut first_predictions = None;
    let mut truth = BTreeMap::new();
    for r in 0..repeats {
        let seed = rng::derive(mil_cfg.seed, r as u64);
        let cfg = MilConfig {
            seed,
            ..mil_cfg.clone()
        };
        let train_bags = bags_for_set(train, train_emb.view(), &cfg, seed)?;
        let test_bags = bags_for_set(test, test_emb.view(), &cfg, rng::derive(seed, 1))?;
        let clf = train_mil(&train_bags, &cfg)?;
        let preds = predict_slides(&clf, &test_bags)?;
        truth = slide_truth(&test_bags);
        runs.push(evaluate(&preds, &truth)?);
        if first_predictions.is_none() {
            first_predictions = Some(preds);
        }
    }
    Ok(ExperimentReport {
        variant,
        mean: Metrics::mean(&runs),
        runs,
        predictions: first_predictions.expect("repeats >= 1"),
        truth,
        history,
        prototype_count,
        encoder: model,
    })
}

const MIL_FORMAT: &str = "geocon-mil";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MilCheckpoint {
    format: String,
    version: u32,
    n_classes: usize,
    layers: Vec<LayerRecord>,
}

impl MilClassifier {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = MilCheckpoint {
            format: MIL_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            n_classes: self.n_classes,
            layers: self.net.layers.iter().map(LayerRecord::from).collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &ckpt).map_err(|e| Error::Data(e.to_string()))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MilCheckpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ckpt.format != MIL_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: not a version {CHECKPOINT_VERSION} MIL checkpoint",
                path.display()
            )));
        }
        let layers = ckpt
            .layers
            .iter()
            .map(crate::nn::Dense::try_from)
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty()
            || layers.windows(2).any(|w| w[0].outputs() != w[1].inputs())
            || layers.last().map(|l| l.outputs()) != Some(ckpt.n_classes)
        {
            return Err(Error::Data(format!("{}: layer shapes do not compose", path.display())));
        }
        Ok(Self {
            net: Mlp { layers },
            n_classes: ckpt.n_classes,
        })
    }
}

/// Writes bags as CSV: `slide_id,label,v0,...`.
pub fn write_bags_csv(bags: &[MilBag], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let dim = bags.first().map_or(0, |b| b.bag_vector.len());
    let mut header = String::from("slide_id,label");
    for j in 0..dim {
        header.push_str(&format!(",v{j}"));
    }
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for b in bags {
        let mut line = format!("{},{}", b.slide_id, b.label);
        for v in &b.bag_vector {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads bags written by [`write_bags_csv`].
pub fn read_bags_csv(path: impl AsRef<Path>) -> Result<Vec<MilBag>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut bags = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() < 3 {
            return Err(parse_err(line, "expected slide_id,label and at least one value".into()));
        }
        let label = record[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("label: {e}")))?;
        let values = record
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        bags.push(MilBag {
            bag_vector: Array1::from(values),
            slide_id: record[0].to_owned(),
            label,
        });
    }
    Ok(bags)
}
