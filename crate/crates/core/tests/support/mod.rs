//! Independent reference implementations and gradient checks shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use geocon::cluster::strictly_closer;
use geocon::encoder::{self, HeadLayout, LayerDims};
use geocon::losses::{self, Batch, LossConfig};
use geocon::nn::{Layers, Mlp};
use geocon::{Linkage, NeighborGraph, PrototypeSet};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Points on a small integer lattice, so that many distances tie exactly.
pub fn lattice_points(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0..4) as f64)
}

// ---------------------------------------------------------------- graphs

/// All-pairs shortest paths by Floyd-Warshall on the graph's edge list.
pub fn floyd_warshall(graph: &NeighborGraph) -> Array2<f64> {
    let n = graph.node_count();
    let mut d = Array2::from_elem((n, n), f64::INFINITY);
    for i in 0..n {
        d[[i, i]] = 0.0;
    }
    for (u, v, w) in graph.edges() {
        if w < d[[u, v]] {
            d[[u, v]] = w;
            d[[v, u]] = w;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[[i, k]];
            if dik.is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = dik + d[[k, j]];
                if via < d[[i, j]] {
                    d[[i, j]] = via;
                }
            }
        }
    }
    d
}

/// Connected components by union-find, labeled by first appearance.
pub fn union_find_components(graph: &NeighborGraph) -> Vec<usize> {
    let n = graph.node_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (u, v, _) in graph.edges() {
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        if ru != rv {
            parent[ru.max(rv)] = ru.min(rv);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    canonical(&roots)
}

/// Relabels so that labels appear in increasing order of first occurrence.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Same partition up to a bijection of labels.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && canonical(a) == canonical(b)
}

// ------------------------------------------------------------- clustering

/// Agglomeration that recomputes every cluster-pair linkage from the
/// original matrix at each step. Ties and disconnected merges follow the
/// documented rule: lexicographically smallest `(a, b)` by cluster id
/// (smallest member); when only infinite pairs remain, the two largest
/// clusters merge, lower id first among equal sizes.
pub fn naive_agglomerate(dist: ArrayView2<f64>, n: usize, linkage: Linkage) -> Vec<usize> {
    let size = dist.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..size).map(|i| vec![i]).collect();
    let link = |a: &[usize], b: &[usize]| -> f64 {
        let values = a.iter().flat_map(|&i| b.iter().map(move |&j| dist[[i, j]]));
        match linkage {
            Linkage::Single => values.fold(f64::INFINITY, f64::min),
            Linkage::Complete => values.fold(f64::NEG_INFINITY, f64::max),
            Linkage::Average => values.sum::<f64>() / (a.len() * b.len()) as f64,
        }
    };
    while clusters.len() > n {
        clusters.sort_by_key(|c| c[0]);
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let v = link(&clusters[i], &clusters[j]);
                if !v.is_finite() {
                    continue;
                }
                match best {
                    Some((_, _, bv)) if !strictly_closer(v, bv) => {}
                    _ => best = Some((i, j, v)),
                }
            }
        }
        let (i, j) = match best {
            Some((i, j, _)) => (i, j),
            None => {
                let mut order: Vec<usize> = (0..clusters.len()).collect();
                order.sort_by(|&x, &y| {
                    clusters[y].len().cmp(&clusters[x].len()).then(clusters[x][0].cmp(&clusters[y][0]))
                });
                (order[0].min(order[1]), order[0].max(order[1]))
            }
        };
        let absorbed = clusters.remove(j);
        clusters[i].extend(absorbed);
        clusters[i].sort_unstable();
    }
    let mut labels = vec![0; size];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = c;
        }
    }
    canonical(&labels)
}

// -------------------------------------------------------------- Hausdorff

pub fn brute_hausdorff(y: ArrayView2<f64>, z: ArrayView2<f64>) -> f64 {
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    let mut yz = 0.0f64;
    for a in y.rows() {
        let mut m = f64::INFINITY;
        for b in z.rows() {
            m = m.min(dist(a, b));
        }
        yz = yz.max(m);
    }
    let mut zy = 0.0f64;
    for b in z.rows() {
        let mut m = f64::INFINITY;
        for a in y.rows() {
            m = m.min(dist(a, b));
        }
        zy = zy.max(m);
    }
    yz.max(zy)
}

// ------------------------------------------------------ finite differences

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute error when both are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Random prototype sets: `n_local` rows per class, optionally with the
/// class mean appended.
pub fn random_prototypes(
    rng: &mut ChaCha8Rng,
    classes: usize,
    n_local: usize,
    dim: usize,
    global: bool,
) -> Vec<PrototypeSet> {
    (0..classes)
        .map(|c| {
            let set = PrototypeSet {
                prototypes: random_matrix(rng, n_local, dim, 2.0),
                class_id: c,
                member_counts: (0..n_local).map(|_| rng.random_range(1..5)).collect(),
                has_global: false,
            };
            if global {
                set.with_global()
            } else {
                set
            }
        })
        .collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize, classes: usize, n_local: usize) -> Batch {
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let sub: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n_local)).collect();
    Batch::new(random_matrix(rng, rows, dim, 2.0), labels, sub).unwrap()
}

fn with_embeddings(batch: &Batch, e: &Array2<f64>) -> Batch {
    Batch::new(e.clone(), batch.class_labels.clone(), batch.subclass.clone()).unwrap()
}

pub fn check_intra(seed: u64) -> f64 {
    let mut r = rng(seed);
    let protos = random_prototypes(&mut r, 2, 3, 4, seed.is_multiple_of(2));
    let batch = random_batch(&mut r, 6, 4, 2, 3);
    let analytic = losses::intra_loss(&batch, &protos).unwrap().grad;
    let numeric = numeric_gradient(&batch.embeddings, |e| {
        losses::intra_loss(&with_embeddings(&batch, e), &protos).unwrap().value
    });
    relative_error(&flat(&analytic), &flat(&numeric))
}

/// Inter loss at a point where the hinge is active and the Hausdorff
/// witness is strictly separated from the runner-up, so the loss is smooth
/// in a neighborhood larger than the difference step.
pub fn check_inter(seed: u64) -> f64 {
    let mut r = rng(seed);
    loop {
        let protos = random_prototypes(&mut r, 2, 3, 3, false);
        let batch = random_batch(&mut r, 6, 3, 2, 3);
        let worst = max_hausdorff(&batch, &protos);
        let cfg = LossConfig {
            margin: worst + 1.0,
            ..LossConfig::default()
        };
        if !witness_is_stable(&batch, &protos) {
            continue;
        }
        let analytic = losses::inter_loss(&batch, &protos, &cfg).unwrap().grad;
        let numeric = numeric_gradient(&batch.embeddings, |e| {
            losses::inter_loss(&with_embeddings(&batch, e), &protos, &cfg).unwrap().value
        });
        return relative_error(&flat(&analytic), &flat(&numeric));
    }
}

fn class_rows(batch: &Batch, class: usize) -> Array2<f64> {
    let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.class_labels[i] == class).collect();
    batch.embeddings.select(ndarray::Axis(0), &rows)
}

fn max_hausdorff(batch: &Batch, protos: &[PrototypeSet]) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..protos.len() {
        for (b, p) in protos.iter().enumerate() {
            if a != b {
                worst = worst.max(brute_hausdorff(class_rows(batch, a).view(), p.prototypes.view()));
            }
        }
    }
    worst
}

/// Every directed sup-inf candidate of every class pair is at least 1e-3
/// below the winner, and every inf is unique by the same gap.
fn witness_is_stable(batch: &Batch, protos: &[PrototypeSet]) -> bool {
    let gap = 1e-3;
    for a in 0..protos.len() {
        let y = class_rows(batch, a);
        for (b, p) in protos.iter().enumerate() {
            if a == b {
                continue;
            }
            let mut candidates = Vec::new();
            for (from, to) in [(y.view(), p.prototypes.view()), (p.prototypes.view(), y.view())] {
                for u in from.rows() {
                    let mut d: Vec<f64> = to
                        .rows()
                        .into_iter()
                        .map(|v| (&u - &v).mapv(|x| x * x).sum().sqrt())
                        .collect();
                    d.sort_by(f64::total_cmp);
                    if d.len() > 1 && d[1] - d[0] < gap {
                        return false;
                    }
                    candidates.push(d[0]);
                }
            }
            candidates.sort_by(|x, y| y.total_cmp(x));
            if candidates.len() > 1 && candidates[0] - candidates[1] < gap {
                return false;
            }
        }
    }
    true
}

/// Probability rows safely inside (0, 1).
fn random_probabilities(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, classes), |_| rng.random_range(0.2..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Cross-entropy gradient pulled back through a softmax, so the finite
/// differences move freely in logit space instead of off the simplex.
pub fn check_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let classes = 2 + (seed % 2) as usize;
    let rows = 5;
    let probs = random_probabilities(&mut r, rows, classes);
    let labels: Vec<usize> = (0..rows).map(|i| (i + seed as usize) % classes).collect();
    let logits = probs.mapv(f64::ln);
    let ce_of_logits = |z: &Array2<f64>| {
        let p = geocon::nn::softmax_rows(z);
        losses::cross_entropy(p.view(), &labels).unwrap().value
    };
    let ce = losses::cross_entropy(probs.view(), &labels).unwrap();
    let analytic = geocon::nn::softmax_backward(&probs, ce.grad.view());
    let numeric = numeric_gradient(&logits, ce_of_logits);
    relative_error(&flat(&analytic), &flat(&numeric))
}

pub fn check_total(seed: u64) -> f64 {
    let mut r = rng(seed);
    loop {
        let protos = random_prototypes(&mut r, 2, 3, 3, seed.is_multiple_of(3));
        let batch = random_batch(&mut r, 6, 3, 2, 3);
        if !witness_is_stable(&batch, &protos) {
            continue;
        }
        let cfg = LossConfig {
            margin: max_hausdorff(&batch, &protos) + 0.5,
            ..LossConfig::default()
        };
        let labels = batch.class_labels.clone();
        let logits = random_matrix(&mut r, batch.len(), 2, 1.5);
        let probs = geocon::nn::softmax_rows(&logits);
        let t = losses::total_loss(&batch, &protos, probs.view(), &labels, &cfg).unwrap();
        let grad_logits = geocon::nn::softmax_backward(&probs, t.grad_probabilities.view());
        let value = |e: &Array2<f64>, z: &Array2<f64>| {
            let p = geocon::nn::softmax_rows(z);
            losses::total_loss(&with_embeddings(&batch, e), &protos, p.view(), &labels, &cfg)
                .unwrap()
                .value
        };
        let num_e = numeric_gradient(&batch.embeddings, |e| value(e, &logits));
        let num_z = numeric_gradient(&logits, |z| value(&batch.embeddings, z));
        let mut analytic = flat(&t.grad_embeddings);
        analytic.extend(flat(&grad_logits));
        let mut numeric = flat(&num_e);
        numeric.extend(flat(&num_z));
        return relative_error(&analytic, &numeric);
    }
}

pub fn check_cosine(seed: u64) -> f64 {
    let mut r = rng(seed);
    let protos = random_prototypes(&mut r, 2, 3, 4, seed % 2 == 1);
    let batch = random_batch(&mut r, 6, 4, 2, 3);
    let cfg = LossConfig {
        temperature: [0.1, 0.5, 1.0][seed as usize % 3],
        ..LossConfig::default()
    };
    let analytic = losses::cosine_prototype_loss(&batch, &protos, &cfg).unwrap().grad;
    let numeric = numeric_gradient(&batch.embeddings, |e| {
        losses::cosine_prototype_loss(&with_embeddings(&batch, e), &protos, &cfg)
            .unwrap()
            .value
    });
    relative_error(&flat(&analytic), &flat(&numeric))
}

/// Parameter gradients of `model` by central differences of `loss`.
fn numeric_param_gradient<M: Layers>(model: &mut M, mut loss: impl FnMut(&M) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n_layers = model.layers().len();
    for l in 0..n_layers {
        for which in 0..2 {
            let len = {
                let layer = &model.layers()[l];
                if which == 0 {
                    layer.weights.len()
                } else {
                    layer.bias.len()
                }
            };
            for idx in 0..len {
                let shift = |m: &mut M, delta: f64| {
                    let mut layers = m.layers_mut();
                    let layer = &mut layers[l];
                    if which == 0 {
                        let cols = layer.weights.ncols();
                        layer.weights[[idx / cols, idx % cols]] += delta;
                    } else {
                        layer.bias[idx] += delta;
                    }
                };
                shift(model, FD_STEP);
                let up = loss(model);
                shift(model, -2.0 * FD_STEP);
                let down = loss(model);
                shift(model, FD_STEP);
                out.push((up - down) / (2.0 * FD_STEP));
            }
        }
    }
    out
}

fn flatten_grads(grads: &[geocon::nn::DenseGrad]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.iter().copied().chain(g.bias.iter().copied()))
        .collect()
}

/// Full encoder backprop for the stage-one objective (manifold loss on the
/// embedding path plus cross-entropy on the softmax path) with prototypes
/// held fixed, on both head layouts.
pub fn check_encoder(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = if seed.is_multiple_of(2) { HeadLayout::Stacked } else { HeadLayout::Branched };
    let dims = LayerDims {
        input: 3,
        hidden: vec![6, 5],
        embed_dim: 3,
        n_classes: 2,
        layout,
    };
    let mut model = encoder::init_encoder(&dims, seed).unwrap();
    // non-zero biases so ReLU kinks are not aligned with the origin
    for layer in model.layers_mut() {
        layer.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let x = random_matrix(&mut r, 6, 3, 1.5);
    let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let sub: Vec<usize> = (0..6).map(|_| r.random_range(0..2)).collect();
    let protos = random_prototypes(&mut r, 2, 2, 3, false);
    let loss_at = |m: &geocon::EncoderModel, cfg: &LossConfig| -> f64 {
        let out = encoder::forward(m, x.view()).unwrap();
        let batch = Batch::new(out.embeddings, labels.clone(), sub.clone()).unwrap();
        losses::total_loss(&batch, &protos, out.probabilities.view(), &labels, cfg)
            .unwrap()
            .value
    };
    let out = encoder::forward(&model, x.view()).unwrap();
    let batch = Batch::new(out.embeddings.clone(), labels.clone(), sub.clone()).unwrap();
    let cfg = LossConfig {
        margin: max_hausdorff(&batch, &protos) + 1.0,
        ..LossConfig::default()
    };
    let t = losses::total_loss(&batch, &protos, out.probabilities.view(), &labels, &cfg).unwrap();
    let grads = encoder::backward(&model, &out.cache, t.grad_embeddings.view(), t.grad_probabilities.view()).unwrap();
    let analytic = flatten_grads(&grads);
    let numeric = numeric_param_gradient(&mut model, |m| loss_at(m, &cfg));
    relative_error(&analytic, &numeric)
}

/// Bag classifier backprop of cross-entropy.
pub fn check_mil(seed: u64) -> f64 {
    let mut r = rng(seed);
    let classes = 2 + seed.is_multiple_of(3) as usize;
    let mut net = Mlp::new(&[8, 6, 6, classes], seed).unwrap();
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    let x = random_matrix(&mut r, 5, 8, 1.0);
    let labels: Vec<usize> = (0..5).map(|i| (i + seed as usize) % classes).collect();
    let (probs, cache) = net.forward(x.view()).unwrap();
    let ce = losses::cross_entropy(probs.view(), &labels).unwrap();
    let analytic = flatten_grads(&net.backward(&cache, ce.grad.view()).unwrap());
    let numeric = numeric_param_gradient(&mut net, |m| {
        let (p, _) = m.forward(x.view()).unwrap();
        losses::cross_entropy(p.view(), &labels).unwrap().value
    });
    relative_error(&analytic, &numeric)
}

/// Runs one random instance and returns its relative error.
pub type GradientCheck = fn(u64) -> f64;

/// Named gradient families, each checked over many seeds.
pub const GRADIENT_CHECKS: [(&str, GradientCheck); 7] = [
    ("intra", check_intra),
    ("inter", check_inter),
    ("cross_entropy", check_cross_entropy),
    ("total", check_total),
    ("cosine", check_cosine),
    ("encoder", check_encoder),
    ("mil", check_mil),
];

pub fn mean_rows(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(ndarray::Axis(0)).unwrap()
}
