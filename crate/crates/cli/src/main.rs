mod config;
mod dataset;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nasgraph::graph::{decode_checkpoint, NASGraph};
use nasgraph::morph::{replay, MorphLog};
use nasgraph::search::evaluate_split;

use config::{DataConfig, DatasetKind, RunConfig};

#[derive(Parser)]
#[command(name = "nasgraph", version, about = "Hill-climbing architecture search with network morphisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write its artifacts to --out.
    Search {
        /// Flat TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of neighbors trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print test-split accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        /// Dataset settings, e.g. the config of the run that produced the graph.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write a checkpoint as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        graph: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the node table, shapes and parameter count of a checkpoint.
    Inspect {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Re-apply a morph log to its parent checkpoint.
    Replay {
        #[arg(long)]
        graph: PathBuf,
        /// A morph log in TOML, or a checkpoint that embeds one.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless the result has the same architecture as this checkpoint.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
}

/// Failure classes, mapped one-to-one onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<nasgraph::data::DataError> for Failure {
    fn from(e: nasgraph::data::DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// A corrupt or version-mismatched checkpoint is a data error.
fn load_checkpoint(path: &Path) -> Result<(NASGraph, Option<MorphLog>), Failure> {
    decode_checkpoint(&read_input(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn eval(graph: &Path, config: Option<&Path>, kind: Option<DatasetKind>, dir: Option<PathBuf>) -> Result<(), Failure> {
    let (g, _) = load_checkpoint(graph)?;
    let mut data_cfg = match config {
        Some(p) => RunConfig::load(Some(p))?.data,
        None => DataConfig::default(),
    };
    if let Some(k) = kind {
        data_cfg.dataset = k;
    }
    if dir.is_some() {
        data_cfg.data_dir = dir;
    }
    let (data, _) = dataset::load(&data_cfg)?;
    if g.input_shape() != data.input_shape || g.num_classes() != data.classes {
        return Err(Failure::Data(format!(
            "graph expects {} inputs and {} classes; dataset has {} and {}",
            g.input_shape(),
            g.num_classes(),
            data.input_shape,
            data.classes
        )));
    }
    let (acc, loss) = evaluate_split(&g, &data.test).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("samples {}", data.test.len());
    println!("accuracy {acc:.6}");
    println!("loss {loss:.6}");
    Ok(())
}

fn inspect(graph: &Path) -> Result<(), Failure> {
    let (g, log) = load_checkpoint(graph)?;
    let shapes = g.infer_shapes().map_err(|e| Failure::Data(e.to_string()))?;
    let names = |ids: &[nasgraph::graph::NodeId]| ids.iter().map(|&i| g.name(i)).collect::<Vec<_>>().join(",");
    println!("{:<12} {:<44} {:<16} {:>10} {:>7}  parents -> children", "node", "kind", "output", "params", "alpha");
    for &id in g.topo_order() {
        let kind = g.kind(id).expect("ordered ids exist");
        let params = g.params(id).map_or(0, |p| p.learnable_count());
        let shape = shapes.get(&id).map_or("?".to_string(), |s| s.to_string());
        println!(
            "{:<12} {:<44} {:<16} {:>10} {:>7.4}  [{}] -> [{}]",
            g.name(id),
            format!("{kind:?}"),
            shape,
            params,
            g.aging().alpha(id),
            names(g.parents(id)),
            names(g.children(id)),
        );
    }
    println!("input {}", g.input_shape());
    println!("nodes {}", g.node_count());
    println!("edges {}", g.edges().len());
    println!("parameters {}", g.parameter_count());
    if let Some(log) = log {
        let kinds: Vec<&str> = log.kinds().iter().map(|k| k.name()).collect();
        println!("morph log: {} ({})", kinds.join(" "), log.init);
    }
    Ok(())
}

fn replay_cmd(graph: &Path, log_path: &Path, out: Option<&Path>, expect: Option<&Path>) -> Result<(), Failure> {
    let (parent, _) = load_checkpoint(graph)?;
    let bytes = read_input(log_path)?;
    let log = if bytes.starts_with(b"NASGRAPH") {
        load_checkpoint(log_path)?
            .1
            .ok_or_else(|| Failure::Data(format!("{} embeds no morph log", log_path.display())))?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Failure::Data("morph log is not UTF-8".into()))?;
        MorphLog::from_toml(&text).map_err(|e| Failure::Data(format!("{}: {e}", log_path.display())))?
    };
    let child = replay(&parent, &log).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "replayed {} morphisms: {} nodes, {} parameters",
        log.len(),
        child.node_count(),
        child.parameter_count()
    );
    if let Some(p) = out {
        write_output(p, &nasgraph::graph::encode_checkpoint(&child, Some(&log)))?;
    }
    if let Some(p) = expect {
        let (want, _) = load_checkpoint(p)?;
        if !run::same_architecture(&child, &want) {
            return Err(Failure::Runtime(format!(
                "replayed architecture differs from {}",
                p.display()
            )));
        }
        println!("architecture matches {}", p.display());
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Search { config, out, jobs } => {
            let cfg = RunConfig::load(config.as_deref())?;
            run::search(&cfg, &out, jobs)
        }
        Command::Eval {
            graph,
            config,
            dataset,
            data_dir,
        } => eval(&graph, config.as_deref(), dataset, data_dir),
        Command::ExportDot { graph, out } => {
            let (g, _) = load_checkpoint(&graph)?;
            let dot = g.to_dot();
            match out {
                Some(p) => write_output(&p, dot.as_bytes()),
                None => {
                    print!("{dot}");
                    Ok(())
                }
            }
        }
        Command::Inspect { graph } => inspect(&graph),
        Command::Replay { graph, log, out, expect } => {
            replay_cmd(&graph, &log, out.as_deref(), expect.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
