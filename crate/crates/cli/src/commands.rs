use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use geocon::dataio::gen_interleaved_manifolds_with;
use geocon::encoder::{train_encoder_observed, EpochRecord};
use geocon::mil::{bags_for_set, predictions_csv, predict_slides, read_bags_csv, slide_truth, write_bags_csv};
use geocon::{
    build_knn_graph, extract_embeddings, load_feature_table, refresh_manifold, run_experiment,
    save_feature_table, split_by_group, train_mil, EncoderModel, LabeledFeatureSet, LossVariant,
    Metrics, MilClassifier, MilConfig, PrototypeMode, SynthConfig,
};

use crate::args::{
    describe, AblateArgs, BagsArgs, ClusterDumpArgs, DataArgs, EmbedArgs, EvalArgs, GraphDumpArgs,
    PipelineArgs, SynthArgs, TrainEncoderArgs, TrainMilArgs,
};

fn load(path: &Path) -> Result<LabeledFeatureSet> {
    load_feature_table(path).with_context(|| format!("loading feature table {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_per_class: a.n,
        noise: a.noise,
        turns: a.turns,
        seed: a.seed,
        slides_per_class: a.slides_per_class,
        lift_dim: a.lift_dim,
    };
    let set = gen_interleaved_manifolds_with(&cfg).context("generating spirals")?;
    save_feature_table(&set, &a.out).context("writing synthetic table")?;
    eprintln!(
        "wrote {} rows, {} features, {} slides to {}",
        set.len(),
        set.dim(),
        set.groups().len(),
        a.out.display()
    );
    Ok(())
}

pub fn graph_dump(a: &GraphDumpArgs) -> Result<()> {
    let set = load(&a.input)?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "class,u,v,w")?;
    for c in 0..set.n_classes() {
        let rows = set.class_indices(c);
        let graph = build_knn_graph(set.subset(&rows).features(), a.k)
            .with_context(|| format!("building kNN graph of class {c}"))?;
        for (u, v, w) in graph.edges() {
            writeln!(out, "{c},{},{},{w:?}", rows[u], rows[v])?;
        }
    }
    out.flush().with_context(|| format!("writing {}", a.out.display()))
}

pub fn cluster_dump(a: &ClusterDumpArgs) -> Result<()> {
    let set = load(&a.input)?;
    let cfg = a.manifold.to_config(a.seed);
    let state = refresh_manifold(&set, set.features(), &cfg).context("clustering sub-classes")?;
    state.write_partition_csv(set.labels(), &a.out).context("writing partition")?;
    if let Some(path) = &a.prototypes_out {
        state.write_prototypes_csv(path).context("writing prototypes")?;
    }
    eprintln!("{} prototypes over {} classes", state.total_prototypes(), set.n_classes());
    Ok(())
}

fn log_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>4}  intra {:.5}  inter {:.5}  ce {:.5}  total {:.5}  acc {:.3}",
        r.epoch, r.l_intra, r.l_inter, r.l_ce, r.l_total, r.train_acc
    );
}

pub fn train_encoder(a: &TrainEncoderArgs) -> Result<()> {
    let set = load(&a.input)?;
    let cfg = a.encoder.to_config(a.seed);
    print!("{}", describe(Some(&cfg), None));
    let (model, history) =
        train_encoder_observed(&set, &cfg, |_, _| {}).context("training encoder")?;
    if let Some(last) = history.records.last() {
        log_epoch(last);
    }
    model.save(&a.checkpoint).context("saving encoder checkpoint")?;
    if let Some(path) = &a.history {
        history.write_csv(path).context("writing training history")?;
    }
    Ok(())
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let set = load(&a.input)?;
    let model = EncoderModel::load(&a.checkpoint).context("loading encoder checkpoint")?;
    let emb = extract_embeddings(&model, &set).context("embedding features")?;
    let out = set.with_features(emb)?;
    save_feature_table(&out, &a.out).context("writing embeddings")?;
    Ok(())
}

pub fn bags(a: &BagsArgs) -> Result<()> {
    let set = load(&a.input)?;
    let cfg = MilConfig {
        bags_per_slide: a.bags.bags_per_slide,
        patches_per_bag: a.bags.patches_per_bag,
        pooling: a.bags.pooling,
        seed: a.seed,
        ..MilConfig::default()
    };
    let bags = bags_for_set(&set, set.features(), &cfg, a.seed).context("sampling bags")?;
    write_bags_csv(&bags, &a.out).context("writing bags")?;
    eprintln!("{} bags of width {}", bags.len(), cfg.bag_dim(set.dim()));
    Ok(())
}

pub fn train_mil_cmd(a: &TrainMilArgs) -> Result<()> {
    let bags = read_bags_csv(&a.bags).context("reading bags")?;
    let cfg = MilConfig {
        classifier_hidden: a.mil_hidden,
        lr: a.mil_lr,
        decay: a.mil_decay,
        epochs: a.mil_epochs,
        batch_size: a.mil_batch_size,
        seed: a.seed,
        ..MilConfig::default()
    };
    print!("{}", describe(None, Some(&cfg)));
    let clf = train_mil(&bags, &cfg).context("training bag classifier")?;
    clf.save(&a.checkpoint).context("saving bag classifier")?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let bags = read_bags_csv(&a.bags).context("reading bags")?;
    let clf = MilClassifier::load(&a.checkpoint).context("loading bag classifier")?;
    let preds = predict_slides(&clf, &bags).context("predicting slides")?;
    let truth = slide_truth(&bags);
    write_text(&a.predictions, &predictions_csv(&preds, &truth))?;
    let m = geocon::evaluate(&preds, &truth).context("scoring predictions")?;
    print_metrics("eval", &m);
    if let Some(path) = &a.metrics {
        let row = format!("{:?},{:?},{:?},{:?}", m.accuracy, m.precision, m.recall, m.f1);
        write_text(path, &format!("run,accuracy,precision,recall,f1\n0,{row}\nmean,{row}\n"))?;
    }
    Ok(())
}

fn print_metrics(name: &str, m: &Metrics) {
    println!(
        "{name}: accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        m.accuracy, m.precision, m.recall, m.f1
    );
}

fn train_test(d: &DataArgs, seed: u64) -> Result<(LabeledFeatureSet, LabeledFeatureSet)> {
    match (&d.train, &d.test, &d.input) {
        (Some(train), Some(test), _) => Ok((load(train)?, load(test)?)),
        (_, _, Some(input)) => {
            let set = load(input)?;
            split_by_group(&set, d.train_fraction, seed).context("splitting slides")
        }
        _ => anyhow::bail!(geocon::Error::Param("give --input or both --train and --test".into())),
    }
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let (train, test) = train_test(&a.data, a.seed)?;
    let enc = a.encoder.to_config(a.seed);
    let mil = a.mil.to_config(a.seed);
    print!("{}", describe(Some(&enc), Some(&mil)));
    println!("repeats={}", a.repeats);
    let report = run_experiment(&train, &test, &enc, &mil, enc.variant, a.repeats)
        .context("running pipeline")?;
    print_metrics(&report.variant.to_string(), &report.mean);
    write_text(&a.metrics, &report.metrics_csv())?;
    if let Some(path) = &a.predictions {
        write_text(path, &report.predictions_csv())?;
    }
    if let Some(path) = &a.history {
        report.history.write_csv(path).context("writing training history")?;
    }
    Ok(())
}

pub fn ablate_prototypes(a: &AblateArgs) -> Result<()> {
    let (train, test) = train_test(&a.data, a.seed)?;
    let mil = a.mil.to_config(a.seed);
    let mut csv = String::from("strategy,prototype_count,accuracy,precision,recall,f1\n");
    for mode in [PrototypeMode::Global, PrototypeMode::Local, PrototypeMode::GlobalLocal] {
        let mut enc = a.encoder.to_config(a.seed);
        enc.manifold.prototype_mode = mode;
        let report = run_experiment(&train, &test, &enc, &mil, LossVariant::Geodesic, a.repeats)
            .with_context(|| format!("running {mode} prototypes"))?;
        let m = &report.mean;
        print_metrics(&format!("{mode} ({} prototypes)", report.prototype_count), m);
        csv.push_str(&format!(
            "{mode},{},{:?},{:?},{:?},{:?}\n",
            report.prototype_count, m.accuracy, m.precision, m.recall, m.f1
        ));
    }
    write_text(&a.out, &csv)
}
