use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nasgraph::data::{encode_idx_images, encode_idx_labels, Dataset, Normalization, RawImages};
use nasgraph::graph::{encode_checkpoint, serialize, ImageShape, NASGraph, NodeKind};
use nasgraph::morph::{apply_site, enumerate_sites, InitMode, MorphKind};
use nasgraph::sched::AgingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = "\
n_steps = 2
n_nm = 2
n_neigh = 3
epoch_neigh = 1
epoch_final = 1
fc_width = 32
synthetic_classes = 3
synthetic_train = 120
synthetic_test = 30
synthetic_dim = 8
";

fn nasgraph(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nasgraph"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("NASGRAPH_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn search(dir: &Path, config: &str, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(name);
    let mut args = vec!["search", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = nasgraph(&args, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

/// Metrics rows without the timing column.
fn metrics_sans_time(out: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    let col = rows[0].iter().position(|c| c == "wall_seconds").unwrap();
    for r in &mut rows {
        r.remove(col);
    }
    rows
}

#[test]
fn search_writes_artifact_set() {
    let dir = TempDir::new().unwrap();
    let out = search(dir.path(), TINY, "run", &[]);
    for f in ["manifest.json", "metrics.csv", "best.graph", "best.dot", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let checkpoints = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "graph"))
        .count();
    assert_eq!(checkpoints, 3, "seed plus one per step");

    let rows = metrics_sans_time(&out);
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv")).unwrap().lines().next().unwrap(),
        "step,child,phase,epochs,val_accuracy,val_loss,wall_seconds,node_count,parameter_count,morphs,status"
    );
    assert_eq!(rows.len(), 1 + 1 + 2 * 3 + 1);

    let m = manifest(&out);
    assert_eq!(m["graph_format_version"], 1);
    assert_eq!(m["dataset"]["kind"], "synthetic");
    assert_eq!(m["dataset"]["sha256"].as_str().unwrap().len(), 64);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let best: Vec<f64> = summary["best_so_far"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let a = search(dir.path(), TINY, "a", &[]);
    let echoed = manifest(&a)["config"].as_str().unwrap().to_string();
    let b = search(dir.path(), &echoed, "b", &["--jobs", "2"]);
    assert_eq!(manifest(&b)["config"].as_str().unwrap(), echoed);
    assert_eq!(metrics_sans_time(&a), metrics_sans_time(&b));
    assert_eq!(
        fs::read(a.join("best.graph")).unwrap(),
        fs::read(b.join("best.graph")).unwrap()
    );
}

#[test]
fn env_overrides_config_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("o");
    let o = nasgraph(
        &["search", "--config", s(&cfg), "--out", s(&out)],
        &[("NASGRAPH_N_STEPS", "1"), ("NASGRAPH_INIT_MODE", "zero_one")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = manifest(&out)["config"].as_str().unwrap().to_string();
    assert!(echoed.contains("n_steps = 1"), "{echoed}");
    assert!(echoed.contains("init_mode = \"zero_one\""), "{echoed}");
    assert_eq!(metrics_sans_time(&out).len(), 1 + 1 + 3 + 1);
}

#[test]
fn replay_reproduces_selected_children() {
    let dir = TempDir::new().unwrap();
    let out = search(dir.path(), TINY, "run", &[]);
    let ck = out.join("checkpoints");
    let mut replayed = 0;
    for step in 1..=2 {
        let log = ck.join(format!("step_{step:03}.morphlog.toml"));
        if !log.exists() {
            continue;
        }
        let parent = ck.join(format!("step_{:03}.graph", step - 1));
        let child = ck.join(format!("step_{step:03}.graph"));
        let o = nasgraph(
            &["replay", "--graph", s(&parent), "--log", s(&log), "--expect", s(&child)],
            &[],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        replayed += 1;
    }
    assert!(replayed > 0, "this config selects a child at step 1");

    // Replaying onto the wrong parent does not match.
    let o = nasgraph(
        &[
            "replay",
            "--graph",
            s(&ck.join("step_000.graph")),
            "--log",
            s(&ck.join("step_001.morphlog.toml")),
            "--expect",
            s(&ck.join("step_000.graph")),
        ],
        &[],
    );
    assert_eq!(code(&o), 4);
}

fn graph_with_skip(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = NASGraph::seed(ImageShape::new(1, 12, 12), 4, 16, &mut rng).unwrap();
    let deepen = enumerate_sites(&g, MorphKind::Deepen);
    apply_site(&mut g, &deepen[0], InitMode::Default, &AgingConfig::default(), &mut rng).unwrap();
    let skip = enumerate_sites(&g, MorphKind::Skip);
    assert!(!skip.is_empty());
    apply_site(&mut g, &skip[0], InitMode::Default, &AgingConfig::default(), &mut rng).unwrap();
    assert!(g
        .node_ids()
        .any(|i| matches!(g.kind(i), Some(NodeKind::Combine { .. })) && g.parents(i).len() >= 2));
    fs::write(path, serialize(&g)).unwrap();
}

#[test]
fn export_dot_shows_add_fan_in() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("skip.graph");
    graph_with_skip(&g);
    let o = nasgraph(&["export-dot", "--graph", s(&g)], &[]);
    assert_eq!(code(&o), 0);
    let dot = String::from_utf8(o.stdout).unwrap();
    let fan_in = |target: &str| dot.lines().filter(|l| l.trim_end().ends_with(&format!("-> {target};"))).count();
    let adds: Vec<&str> = dot
        .lines()
        .filter_map(|l| l.trim().split_whitespace().next())
        .filter(|n| n.starts_with("add") && !n.contains("->"))
        .collect();
    assert!(adds.iter().any(|a| fan_in(a) >= 2), "{dot}");

    let file = dir.path().join("g.dot");
    assert_eq!(code(&nasgraph(&["export-dot", "--graph", s(&g), "--out", s(&file)], &[])), 0);
    assert_eq!(fs::read_to_string(file).unwrap(), dot);
}

#[test]
fn inspect_prints_table_shapes_and_count() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("skip.graph");
    graph_with_skip(&g);
    let o = nasgraph(&["inspect", "--graph", s(&g)], &[]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let graph = nasgraph::graph::deserialize(&fs::read(&g).unwrap()).unwrap();
    assert!(text.contains(&format!("parameters {}", graph.parameter_count())));
    let shapes = graph.infer_shapes().unwrap();
    for id in graph.node_ids() {
        let row = text.lines().find(|l| l.starts_with(&format!("{} ", graph.name(id)))).unwrap();
        assert!(row.contains(&shapes[&id].to_string()), "{row}");
    }
    assert!(text.lines().any(|l| l.starts_with("add")));
}

fn random_idx(dir: &Path, prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> RawImages {
    let raw = RawImages {
        shape: ImageShape::new(1, 28, 28),
        pixels: (0..n * 784).map(|_| rng.gen()).collect(),
        labels: (0..n).map(|i| (i % 10) as u8).collect(),
    };
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(&raw)).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(&raw)).unwrap();
    raw
}

#[test]
fn mnist_manifest_normalization_reproduces_tensors() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = random_idx(&data, "train", 60, &mut rng);
    let test = random_idx(&data, "t10k", 20, &mut rng);
    let config = format!(
        "dataset = \"mnist\"\ndata_dir = \"{}\"\nn_steps = 0\nepoch_neigh = 1\nepoch_final = 0\nfc_width = 8\nval_fraction = 0.25\n",
        data.display()
    );
    let out = search(dir.path(), &config, "run", &[]);
    let m = manifest(&out);
    let norm: Normalization = serde_json::from_value(m["dataset"]["normalization"].clone()).unwrap();
    let reference = Dataset::from_raw(&train, &test, 10).unwrap();
    assert_eq!(norm, reference.normalization);
    let a = norm.apply(&train);
    assert!(a
        .images
        .data()
        .iter()
        .zip(reference.train.images.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(m["dataset"]["files"].as_array().unwrap().len(), 4);
    assert_eq!(m["dataset"]["train_size"], 60);

    // Evaluating against the same files with flags instead of a config.
    let o = nasgraph(
        &[
            "eval",
            "--graph",
            s(&out.join("best.graph")),
            "--dataset",
            "mnist",
            "--data-dir",
            s(&data),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("samples 20"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let missing = p.join("missing.graph");
    assert_eq!(code(&nasgraph(&["inspect", "--graph", s(&missing)], &[])), 3);
    assert_eq!(code(&nasgraph(&["export-dot", "--graph", s(&missing)], &[])), 3);

    let bad = p.join("bad.toml");
    for text in ["n_stepz = 1", "[search]\nn_steps = 1", "n_steps = ", "momentum = 1.5"] {
        fs::write(&bad, text).unwrap();
        let o = nasgraph(&["search", "--config", s(&bad), "--out", s(&p.join("x"))], &[]);
        assert_eq!(code(&o), 2, "{text}");
        assert!(!o.stderr.is_empty());
    }
    let o = nasgraph(&["search", "--config", s(&p.join("nope.toml")), "--out", s(&p.join("x"))], &[]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&nasgraph(&["frobnicate"], &[])), 2);

    let cfg = p.join("mnist.toml");
    fs::write(&cfg, format!("dataset = \"mnist\"\ndata_dir = \"{}\"", p.join("nodata").display())).unwrap();
    assert_eq!(
        code(&nasgraph(&["search", "--config", s(&cfg), "--out", s(&p.join("x"))], &[])),
        3
    );

    // Version mismatch in a checkpoint header.
    let g = p.join("skip.graph");
    graph_with_skip(&g);
    let mut bytes = fs::read(&g).unwrap();
    bytes[9] = b'7';
    let v7 = p.join("v7.graph");
    fs::write(&v7, bytes).unwrap();
    let o = nasgraph(&["inspect", "--graph", s(&v7)], &[]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));

    // Graph and dataset disagree on input shape.
    let o = nasgraph(&["eval", "--graph", s(&g)], &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn replay_accepts_a_checkpoint_as_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let parent = NASGraph::seed(ImageShape::new(1, 10, 10), 3, 16, &mut rng).unwrap();
    let outcome =
        nasgraph::morph::random_morph_sequence(&parent, 3, InitMode::ZeroOne, &AgingConfig::default(), &mut rng)
            .unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("parent.graph");
    let c = dir.path().join("child.graph");
    let r = dir.path().join("replayed.graph");
    fs::write(&p, serialize(&parent)).unwrap();
    fs::write(&c, encode_checkpoint(&outcome.child, Some(&outcome.log))).unwrap();
    let o = nasgraph(
        &["replay", "--graph", s(&p), "--log", s(&c), "--out", s(&r), "--expect", s(&c)],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Untrained, so the replay is equal down to the weights.
    assert_eq!(fs::read(&r).unwrap(), fs::read(&c).unwrap());
}
