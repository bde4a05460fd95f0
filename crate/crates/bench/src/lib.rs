//! Shared fixtures for the benchmarks, all built from the spiral generator
//! so that inputs are deterministic.

use geocon::losses::Batch;
use geocon::{
    gen_interleaved_manifolds, init_encoder, refresh_manifold, EncoderModel, LabeledFeatureSet, LayerDims,
    ManifoldConfig, PrototypeSet,
};
use ndarray::Array2;

pub fn spirals(n_per_class: usize) -> LabeledFeatureSet {
    gen_interleaved_manifolds(n_per_class, 0.05, 2.0, 0).expect("valid generator settings")
}

/// Rows of class 0 of a spiral set.
pub fn one_class(n: usize) -> Array2<f64> {
    let set = spirals(n);
    set.subset(&set.class_indices(0)).features().to_owned()
}

/// An untrained encoder and a batch of inputs of matching width.
pub fn encoder(batch: usize) -> (EncoderModel, Array2<f64>) {
    let set = spirals(batch.div_ceil(2));
    let dims = LayerDims {
        input: set.dim(),
        hidden: vec![64, 64],
        embed_dim: 32,
        n_classes: 2,
        layout: Default::default(),
    };
    let model = init_encoder(&dims, 0).expect("valid dims");
    (model, set.features().to_owned())
}

/// A batch over the whole spiral set with its sub-class prototypes.
pub fn loss_inputs(n_per_class: usize, n_subclasses: usize) -> (Batch, Vec<PrototypeSet>) {
    let set = spirals(n_per_class);
    let cfg = ManifoldConfig {
        n: n_subclasses,
        ..ManifoldConfig::default()
    };
    let state = refresh_manifold(&set, set.features(), &cfg).expect("clusterable set");
    let batch = Batch::new(set.features().to_owned(), set.labels().to_vec(), state.subclass_of_row)
        .expect("consistent batch");
    (batch, state.prototypes)
}
