//! The `search` command and its artifacts.
//!
//! ```text
//! <out>/manifest.json            written before training, never rewritten
//! <out>/metrics.csv              one row per trained candidate, rewritten as rows arrive
//! <out>/checkpoints/step_NNN.graph         incumbent after step NNN (000 is the seed)
//! <out>/checkpoints/step_NNN.morphlog.toml log from step NNN-1 when a child won
//! <out>/best.graph, best.dot     the finally trained winner
//! <out>/summary.json             accuracies, history, end time
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use nasgraph::graph::{encode_checkpoint, NASGraph, FORMAT_VERSION};
use nasgraph::search::{
    hill_climb_with, write_metrics_csv, Candidate, CandidateRecord, SearchConfig, SearchObserver, StepRecord,
    METRICS_COLUMNS,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, DatasetIdentity};
use crate::Failure;

pub const MANIFEST_VERSION: u32 = 1;
/// Bumped whenever `METRICS_COLUMNS` changes.
pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub best_graph: PathBuf,
    pub best_dot: PathBuf,
    pub summary: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub graph_format_version: u32,
    pub metrics_version: u32,
    pub metrics_columns: Vec<String>,
    pub program_version: String,
    /// The resolved config as flat TOML; it parses back to the same config.
    pub config: String,
    pub jobs: usize,
    pub dataset: DatasetIdentity,
    pub started_at: String,
    pub outputs: Outputs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub started_at: String,
    pub finished_at: String,
    pub total_seconds: f64,
    pub seed_accuracy: f64,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub best_so_far: Vec<f64>,
    pub history: Vec<StepRecord>,
    pub node_count: usize,
    pub parameter_count: usize,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn runtime<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(runtime(path))
}

/// Topology, hyperparameters and aging agree; weights may differ.
pub fn same_architecture(a: &NASGraph, b: &NASGraph) -> bool {
    a.topology() == b.topology()
        && a.aging() == b.aging()
        && a.num_classes() == b.num_classes()
        && a.next_ordinal() == b.next_ordinal()
}

struct Artifacts<'a> {
    metrics: &'a Path,
    checkpoints: &'a Path,
    records: Vec<CandidateRecord>,
    error: Option<Failure>,
}

impl Artifacts<'_> {
    fn try_candidate(&mut self, r: &CandidateRecord) -> Result<(), Failure> {
        self.records.push(r.clone());
        let f = fs::File::create(self.metrics).map_err(runtime(self.metrics))?;
        write_metrics_csv(&self.records, std::io::BufWriter::new(f)).map_err(runtime(self.metrics))
    }

    fn checkpoint(&self, step: usize, c: &Candidate) -> Result<(), Failure> {
        let path = self.checkpoints.join(format!("step_{step:03}.graph"));
        let log = (!c.morph_log.is_empty()).then_some(&c.morph_log);
        write(&path, &encode_checkpoint(&c.graph, log))
    }

    fn try_step(&mut self, step: &StepRecord, incumbent: &Candidate) -> Result<(), Failure> {
        self.checkpoint(step.step, incumbent)?;
        if step.selected.is_some() {
            let path = self.checkpoints.join(format!("step_{:03}.morphlog.toml", step.step));
            write(&path, incumbent.morph_log.to_toml().as_bytes())?;
        }
        Ok(())
    }
}

impl SearchObserver for Artifacts<'_> {
    fn on_seed(&mut self, seed: &Candidate) {
        if self.error.is_none() {
            self.error = self.checkpoint(0, seed).err();
        }
    }

    fn on_candidate(&mut self, r: &CandidateRecord) {
        if self.error.is_none() {
            self.error = self.try_candidate(r).err();
        }
        let acc = r.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let child = r.child.map_or("-".to_string(), |c| c.to_string());
        eprintln!(
            "step {:>2} child {:>2} {:?}: val_acc {acc} ({:.1}s) {}",
            r.step, child, r.phase, r.wall_seconds, r.status
        );
    }

    fn on_step(&mut self, step: &StepRecord, incumbent: &Candidate) {
        if self.error.is_none() {
            self.error = self.try_step(step, incumbent).err();
        }
    }
}

pub fn search(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<(), Failure> {
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let (data, identity) = dataset::load(&cfg.data)?;
    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(runtime(&checkpoints))?;
    let outputs = Outputs {
        metrics: out.join("metrics.csv"),
        checkpoints: checkpoints.clone(),
        best_graph: out.join("best.graph"),
        best_dot: out.join("best.dot"),
        summary: out.join("summary.json"),
    };
    let started_at = now();
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        graph_format_version: FORMAT_VERSION,
        metrics_version: METRICS_VERSION,
        metrics_columns: METRICS_COLUMNS.iter().map(|c| c.to_string()).collect(),
        program_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.to_toml(),
        jobs,
        dataset: identity,
        started_at: started_at.clone(),
        outputs: outputs.clone(),
    };
    let manifest_path = out.join("manifest.json");
    write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;

    let search_cfg: &SearchConfig = &cfg.search;
    let mut artifacts = Artifacts {
        metrics: &outputs.metrics,
        checkpoints: &checkpoints,
        records: Vec::new(),
        error: None,
    };
    let result = hill_climb_with(search_cfg, &data, jobs, &mut artifacts).map_err(|e| match e {
        nasgraph::search::SearchError::Config(m) => Failure::Config(m),
        nasgraph::search::SearchError::Data(d) => Failure::Data(d.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    if let Some(e) = artifacts.error {
        return Err(e);
    }

    let best = &result.best;
    let log = (!best.morph_log.is_empty()).then_some(&best.morph_log);
    write(&outputs.best_graph, &encode_checkpoint(&best.graph, log))?;
    write(&outputs.best_dot, best.graph.to_dot().as_bytes())?;
    let summary = Summary {
        started_at,
        finished_at: now(),
        total_seconds: result.total_seconds,
        seed_accuracy: result.seed_accuracy,
        best_val_accuracy: best.val_accuracy,
        test_accuracy: result.test_accuracy,
        best_so_far: result.best_so_far(),
        history: result.history.clone(),
        node_count: best.graph.node_count(),
        parameter_count: best.graph.parameter_count(),
    };
    write(
        &outputs.summary,
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    println!("seed val accuracy {:.4}", result.seed_accuracy);
    println!("best val accuracy {:.4}", best.val_accuracy);
    if let Some(t) = result.test_accuracy {
        println!("test accuracy {t:.4}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
