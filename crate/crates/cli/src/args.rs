//! Command-line surface. Defaults are the full-scale settings: k = 5,
//! n = 10, batch 64, 50 epochs, lr 1e-4 with decay 1e-6 for the encoder and
//! 50 bags of 100 patches, 512 hidden units, lr 1e-3, batch 4 for the bag
//! classifier. `configs/desk.conf` holds the small synthetic settings.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use geocon::cluster::GraphScope;
use geocon::losses::LossConfig;
use geocon::{
    BagPooling, HeadLayout, Linkage, LossVariant, ManifoldConfig, MilConfig, PrototypeMode,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "geocon",
    version,
    about = "Geodesic manifold contrastive learning and MIL slide classification",
    after_help = "Any subcommand also accepts --config FILE with `key = value` lines; \
                  options given on the command line override the file."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the two-class interleaved spiral feature table.
    Synth(SynthArgs),
    /// Write the per-class kNN graphs of a feature table as an edge list.
    GraphDump(GraphDumpArgs),
    /// Cluster every class into sub-classes and write partitions/prototypes.
    ClusterDump(ClusterDumpArgs),
    /// Train the encoder (stage one) and save a checkpoint and history.
    TrainEncoder(TrainEncoderArgs),
    /// Replace features by encoder embeddings.
    Embed(EmbedArgs),
    /// Sample per-slide bags from an (embedded) feature table.
    Bags(BagsArgs),
    /// Train the bag classifier (stage two).
    TrainMil(TrainMilArgs),
    /// Predict slides by majority vote and score them.
    Eval(EvalArgs),
    /// Run both stages end to end, repeating the bag classifier.
    Pipeline(PipelineArgs),
    /// Compare global, local and global+local prototype assignment.
    AblatePrototypes(AblateArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Points per class.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Standard deviation of the Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Turns of each spiral arm.
    #[arg(long, default_value_t = 2.0)]
    pub turns: f64,
    /// Slides (groups) per class.
    #[arg(long, default_value_t = 10)]
    pub slides_per_class: usize,
    /// Rotate the 3-D points into this many dimensions.
    #[arg(long)]
    pub lift_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output feature table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GraphDumpArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Neighbors per node.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Edge list `class,u,v,w` with row indices of the input table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ClusterDumpArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub manifold: ManifoldArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Partition CSV `row_index,class,subclass`.
    #[arg(long)]
    pub out: PathBuf,
    /// Prototype CSV `class,subclass,f0,...`.
    #[arg(long)]
    pub prototypes_out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ManifoldArgs {
    /// Neighbors per node in the kNN graph.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Sub-classes per class.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// single | complete | average
    #[arg(long, default_value = "average")]
    pub linkage: Linkage,
    /// per-class | global
    #[arg(long, default_value = "per-class")]
    pub graph_scope: GraphScope,
    /// global | local | global+local
    #[arg(long, default_value = "local")]
    pub prototypes: PrototypeMode,
}

impl ManifoldArgs {
    pub fn to_config(&self, seed: u64) -> ManifoldConfig {
        ManifoldConfig {
            k: self.k,
            n: self.n,
            linkage: self.linkage,
            scope: self.graph_scope,
            prototype_mode: self.prototypes,
            seed,
            ..ManifoldConfig::default()
        }
    }
}

/// Layer widths given as one comma-separated value, so a later occurrence
/// replaces an earlier one instead of extending it.
#[derive(Debug, Clone, PartialEq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("bad width `{w}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Widths)
    }
}

#[derive(Debug, Args, Clone)]
pub struct EncoderArgs {
    /// Comma-separated trunk widths.
    #[arg(long, default_value = "64,64")]
    pub hidden: Widths,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    /// stacked (softmax on the embedding) | branched (softmax on the trunk)
    #[arg(long, default_value = "stacked")]
    pub head: HeadLayout,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Time-based decay: lr / (1 + decay * step).
    #[arg(long, default_value_t = 1e-6)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Re-cluster every this many epochs (from epoch 0).
    #[arg(long, default_value_t = 5)]
    pub refresh_every: usize,
    #[command(flatten)]
    pub manifold: ManifoldArgs,
    /// Inter-subclass margin.
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Clamp inter-subclass terms at zero.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub inter_clamp: bool,
    /// Temperature of the cosine baseline.
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    /// geodesic | cosine
    #[arg(long, alias = "variant", default_value = "geodesic")]
    pub loss: LossVariant,
}

impl EncoderArgs {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.0.clone(),
            embed_dim: self.embed_dim,
            layout: self.head,
            lr: self.lr,
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            refresh_every: self.refresh_every,
            manifold: self.manifold.to_config(seed),
            loss: LossConfig {
                margin: self.margin,
                inter_clamp: self.inter_clamp,
                temperature: self.temperature,
                ..LossConfig::default()
            },
            variant: self.loss,
            seed,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct BagArgs {
    #[arg(long, default_value_t = 50)]
    pub bags_per_slide: usize,
    #[arg(long, default_value_t = 100)]
    pub patches_per_bag: usize,
    /// concat | mean
    #[arg(long, default_value = "concat")]
    pub pooling: BagPooling,
}

#[derive(Debug, Args, Clone)]
pub struct MilArgs {
    #[command(flatten)]
    pub bags: BagArgs,
    /// Width of both hidden layers of the bag classifier.
    #[arg(long, default_value_t = 512)]
    pub mil_hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub mil_lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub mil_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub mil_epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub mil_batch_size: usize,
}

impl MilArgs {
    pub fn to_config(&self, seed: u64) -> MilConfig {
        MilConfig {
            bags_per_slide: self.bags.bags_per_slide,
            patches_per_bag: self.bags.patches_per_bag,
            classifier_hidden: self.mil_hidden,
            lr: self.mil_lr,
            decay: self.mil_decay,
            epochs: self.mil_epochs,
            batch_size: self.mil_batch_size,
            seed,
            pooling: self.bags.pooling,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder checkpoint (JSON).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch loss and accuracy log.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EmbedArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BagsArgs {
    /// Feature table, usually the output of `embed`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub bags: BagArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bag CSV `slide_id,label,v0,...`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainMilArgs {
    #[arg(long)]
    pub bags: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub mil_hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub mil_lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub mil_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub mil_epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub mil_batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub bags: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-slide CSV `slide_id,true_label,predicted_label,vote_fraction`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Metrics CSV (one row plus the mean row).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Feature table to split by slide; ignored when --train and --test are given.
    #[arg(long, required_unless_present_all = ["train", "test"])]
    pub input: Option<PathBuf>,
    /// Fraction of slides used for training when splitting --input.
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub mil: MilArgs,
    /// Bag-classifier repetitions averaged in the report.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV, one row per repeat plus a mean row.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Slide predictions of the first repeat.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Encoder training history.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub mil: MilArgs,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `strategy,prototype_count,accuracy,precision,recall,f1`.
    #[arg(long)]
    pub out: PathBuf,
}

/// `key=value` lines for the effective configuration, in a stable order.
pub fn describe(train: Option<&TrainConfig>, mil: Option<&MilConfig>) -> String {
    let mut out = String::new();
    if let Some(t) = train {
        let hidden: Vec<String> = t.hidden.iter().map(usize::to_string).collect();
        let m = &t.manifold;
        let _ = writeln!(out, "hidden={}", hidden.join(","));
        let _ = writeln!(out, "embed-dim={}", t.embed_dim);
        let _ = writeln!(out, "head={}", t.layout);
        let _ = writeln!(out, "lr={}", t.lr);
        let _ = writeln!(out, "lr-decay={}", t.lr_decay);
        let _ = writeln!(out, "batch-size={}", t.batch_size);
        let _ = writeln!(out, "epochs={}", t.epochs);
        let _ = writeln!(out, "refresh-every={}", t.refresh_every);
        let _ = writeln!(out, "k={}", m.k);
        let _ = writeln!(out, "n={}", m.n);
        let _ = writeln!(out, "linkage={}", m.linkage);
        let _ = writeln!(out, "graph-scope={}", m.scope);
        let _ = writeln!(out, "prototypes={}", m.prototype_mode);
        let _ = writeln!(out, "margin={}", t.loss.margin);
        let _ = writeln!(out, "inter-clamp={}", t.loss.inter_clamp);
        let _ = writeln!(out, "temperature={}", t.loss.temperature);
        let _ = writeln!(out, "loss={}", t.variant);
        let _ = writeln!(out, "seed={}", t.seed);
    }
    if let Some(m) = mil {
        let _ = writeln!(out, "bags-per-slide={}", m.bags_per_slide);
        let _ = writeln!(out, "patches-per-bag={}", m.patches_per_bag);
        let _ = writeln!(out, "pooling={}", m.pooling);
        let _ = writeln!(out, "mil-hidden={}", m.classifier_hidden);
        let _ = writeln!(out, "mil-lr={}", m.lr);
        let _ = writeln!(out, "mil-decay={}", m.decay);
        let _ = writeln!(out, "mil-epochs={}", m.epochs);
        let _ = writeln!(out, "mil-batch-size={}", m.batch_size);
    }
    out
}
