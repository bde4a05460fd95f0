use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn geocon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geocon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = geocon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn synth(dir: &TempDir, name: &str, seed: &str) -> String {
    let out = path(dir, name);
    ok(&["synth", "--n", "60", "--slides-per-class", "6", "--seed", seed, "--out", &out]);
    out
}

const SMALL_ENCODER: &[&str] = &[
    "--hidden", "16", "--embed-dim", "4", "--epochs", "4", "--lr", "0.05", "--batch-size", "16",
    "--n", "3",
];

#[test]
fn synth_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let a = fs::read(synth(&dir, "a.csv", "7")).unwrap();
    let b = fs::read(synth(&dir, "b.csv", "7")).unwrap();
    let c = fs::read(synth(&dir, "c.csv", "8")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn missing_required_option_is_a_usage_error() {
    let out = geocon(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["pipeline", "--help"]);
    for needle in [
        "[default: 5]",
        "[default: 10]",
        "[default: 64]",
        "[default: 0.0001]",
        "[default: 0.000001]",
        "[default: 512]",
        "[default: 0.001]",
        "[default: 4]",
        "[default: 100]",
        "[default: average]",
        "[default: geodesic]",
    ] {
        assert!(help.contains(needle), "help lacks {needle}:\n{help}");
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = TempDir::new().unwrap();
    let missing = geocon(&["graph-dump", "--input", "/nonexistent/x.csv", "--out", &path(&dir, "g.csv")]);
    assert_eq!(missing.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.contains("loading feature table"), "{stderr}");

    let table = synth(&dir, "s.csv", "1");
    let bad_param = geocon(&["cluster-dump", "--input", &table, "--n", "0", "--out", &path(&dir, "p.csv")]);
    assert_eq!(bad_param.status.code(), Some(2));

    let garbage = path(&dir, "garbage.csv");
    fs::write(&garbage, "group_id,label,f0\ns1,0,not-a-number\n").unwrap();
    let parse = geocon(&["graph-dump", "--input", &garbage, "--out", &path(&dir, "g.csv")]);
    assert_eq!(parse.status.code(), Some(3));
}

#[test]
fn graph_dump_uses_table_row_indices() {
    let dir = TempDir::new().unwrap();
    let table = synth(&dir, "s.csv", "2");
    let edges = path(&dir, "g.csv");
    ok(&["graph-dump", "--input", &table, "--k", "3", "--out", &edges]);
    let text = fs::read_to_string(&edges).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,u,v,w"));
    let mut classes = [0usize; 2];
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (c, u, v): (usize, usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(u < 120 && v < 120 && u != v);
        assert!(f[3].parse::<f64>().unwrap() > 0.0);
        classes[c] += 1;
    }
    // each class has at least k·N/2 undirected edges
    assert!(classes.iter().all(|&n| n >= 3 * 60 / 2), "{classes:?}");
}

#[test]
fn cluster_dump_writes_partition_and_prototypes() {
    let dir = TempDir::new().unwrap();
    let table = synth(&dir, "s.csv", "3");
    let (part, protos) = (path(&dir, "p.csv"), path(&dir, "pr.csv"));
    ok(&[
        "cluster-dump", "--input", &table, "--n", "4", "--prototypes", "global+local", "--out", &part,
        "--prototypes-out", &protos,
    ]);
    assert_eq!(fs::read_to_string(&part).unwrap().lines().count(), 121);
    let proto_text = fs::read_to_string(&protos).unwrap();
    assert_eq!(proto_text.lines().next(), Some("class,subclass,f0,f1,f2"));
    assert_eq!(proto_text.lines().count(), 1 + 2 * 5);
}

#[test]
fn staged_commands_chain_together() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "train.csv", "4");
    let test = synth(&dir, "test.csv", "5");
    let (ckpt, hist) = (path(&dir, "enc.json"), path(&dir, "hist.csv"));
    let mut args = vec!["train-encoder", "--input", &train, "--checkpoint", &ckpt, "--history", &hist];
    args.extend_from_slice(SMALL_ENCODER);
    let echo = ok(&args);
    assert!(echo.contains("hidden=16\n") && echo.contains("loss=geodesic\n"), "{echo}");
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 1 + 4);

    let (etrain, etest) = (path(&dir, "etrain.csv"), path(&dir, "etest.csv"));
    ok(&["embed", "--input", &train, "--checkpoint", &ckpt, "--out", &etrain]);
    ok(&["embed", "--input", &test, "--checkpoint", &ckpt, "--out", &etest]);

    let (btrain, btest) = (path(&dir, "btrain.csv"), path(&dir, "btest.csv"));
    let bag_opts = ["--bags-per-slide", "5", "--patches-per-bag", "8"];
    let mut a = vec!["bags", "--input", &etrain, "--out", &btrain];
    a.extend_from_slice(&bag_opts);
    ok(&a);
    let mut a = vec!["bags", "--input", &etest, "--out", &btest, "--seed", "1"];
    a.extend_from_slice(&bag_opts);
    ok(&a);
    let bag_text = fs::read_to_string(&btrain).unwrap();
    assert_eq!(bag_text.lines().count(), 1 + 12 * 5);
    assert_eq!(bag_text.lines().next().unwrap().split(',').count(), 2 + 8 * 4);

    let mil = path(&dir, "mil.json");
    ok(&["train-mil", "--bags", &btrain, "--mil-hidden", "8", "--mil-epochs", "3", "--checkpoint", &mil]);
    let (preds, metrics) = (path(&dir, "preds.csv"), path(&dir, "metrics.csv"));
    ok(&["eval", "--bags", &btest, "--checkpoint", &mil, "--predictions", &preds, "--metrics", &metrics]);
    let pred_text = fs::read_to_string(&preds).unwrap();
    assert_eq!(pred_text.lines().next(), Some("slide_id,true_label,predicted_label,vote_fraction"));
    assert_eq!(pred_text.lines().count(), 1 + 12);
    assert!(fs::read_to_string(&metrics).unwrap().contains("\nmean,"));
}

#[test]
fn config_file_is_overridden_by_command_line() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "train.csv", "6");
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "hidden = 16\nembed_dim = 4\nepochs = 2\nlr = 0.05\nn = 3\n").unwrap();
    let ckpt = path(&dir, "enc.json");
    let echo = ok(&[
        "train-encoder", "--config", conf.to_str().unwrap(), "--input", &train, "--checkpoint", &ckpt,
        "--lr", "0.02",
    ]);
    assert!(echo.contains("lr=0.02\n"), "{echo}");
    assert!(echo.contains("epochs=2\n") && echo.contains("embed-dim=4\n"), "{echo}");

    fs::write(&conf, "no_equals_here\n").unwrap();
    let bad = geocon(&["train-encoder", "--config", conf.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn pipeline_accepts_split_or_explicit_sets() {
    let dir = TempDir::new().unwrap();
    let table = synth(&dir, "s.csv", "9");
    let common = [
        "--bags-per-slide", "4", "--patches-per-bag", "6", "--mil-hidden", "8", "--mil-epochs", "2",
        "--repeats", "2",
    ];
    let m1 = path(&dir, "m1.csv");
    let mut a = vec!["pipeline", "--input", &table, "--train-fraction", "0.5", "--metrics", &m1];
    a.extend_from_slice(SMALL_ENCODER);
    a.extend_from_slice(&common);
    ok(&a);
    let text = fs::read_to_string(&m1).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 + 1);

    let other = synth(&dir, "t.csv", "10");
    let m2 = path(&dir, "m2.csv");
    let mut a = vec!["pipeline", "--train", &table, "--test", &other, "--metrics", &m2, "--loss", "cosine"];
    a.extend_from_slice(SMALL_ENCODER);
    a.extend_from_slice(&common);
    ok(&a);
    assert!(Path::new(&m2).exists());
}
