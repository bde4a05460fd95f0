//! Geodesic-distance manifold contrastive learning.
//!
//! The crate is organised as a pipeline:
//!
//! * [`dataio`] loads, saves, synthesises and splits labeled feature tables.
//! * [`graph`] builds per-class k-nearest-neighbor graphs and all-pairs
//!   geodesic (shortest path) distances.
//! * [`cluster`] agglomerates each class into sub-classes on the geodesic
//!   matrix and computes sub-class prototypes.
//! * [`losses`] evaluates the intra/inter sub-class losses, the Hausdorff
//!   distance, cross-entropy and a cosine (NT-Xent style) baseline, each with
//!   analytic gradients.
//! * [`encoder`] is a two-headed MLP encoder trained with manual backprop and
//!   SGD, refreshing the manifold partition on a fixed epoch schedule.
//! * [`mil`] turns embedded patches into bags, trains a bag classifier and
//!   aggregates bag predictions per slide by majority vote.

pub mod cluster;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod losses;
pub mod mil;
pub mod nn;

mod rng;

pub use cluster::{
    agglomerate, compute_prototypes, kmeans, refresh_manifold, GraphScope, Linkage,
    ManifoldConfig, ManifoldState, PrototypeMode, PrototypeSet, SubclassMethod,
    SubclassPartition,
};
pub use dataio::{
    gen_interleaved_manifolds, load_feature_table, save_feature_table, split_by_group,
    LabeledFeatureSet, SynthConfig,
};
pub use encoder::{
    extract_embeddings, init_encoder, train_encoder, EncoderModel, HeadLayout, LayerDims, LossVariant,
    TrainConfig, TrainHistory,
};
pub use error::{Error, Result};
pub use graph::{build_knn_graph, connected_components, geodesic_all_pairs, GeodesicMatrix, NeighborGraph};
pub use losses::{Batch, LossConfig, LossValue};
pub use mil::{
    evaluate, make_bags, predict_slide, run_experiment, train_mil, BagPooling, ExperimentReport, Metrics,
    MilBag, MilClassifier, MilConfig, SlidePrediction,
};
