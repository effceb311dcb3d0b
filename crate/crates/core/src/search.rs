//! Hill climbing over morphed architectures: train a random seed, then
//! repeatedly spawn morphed neighbors of the incumbent, train them briefly,
//! and keep the best; finally train the winner longer.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Split};
use crate::graph::{GraphError, NASGraph, Network};
use crate::morph::{random_morph_sequence, InitMode, MorphError, MorphLog};
use crate::ndt::{argmax_rows, cross_entropy_loss, NdtError, SgdMomentum};
use crate::sched::{sgdr_lr, AgingConfig, SchedError, SgdrSchedule};

/// What neighbors are ranked by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Accuracy,
    /// Lowest validation loss wins.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_steps: usize,
    pub n_nm: usize,
    pub n_neigh: usize,
    pub epoch_neigh: usize,
    pub epoch_final: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub init_mode: InitMode,
    pub gradient_stopping: bool,
    pub batch_size: usize,
    pub momentum: f64,
    pub val_fraction: f64,
    pub rng_seed: u64,
    pub fc_width: usize,
    pub strict_fc_cap: bool,
    pub selection: Selection,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            n_nm: 5,
            n_neigh: 8,
            epoch_neigh: 16,
            epoch_final: 64,
            lambda_start: 0.1,
            lambda_end: 0.0,
            init_mode: InitMode::Default,
            gradient_stopping: true,
            batch_size: 64,
            momentum: 0.9,
            val_fraction: 0.1,
            rng_seed: 0,
            fc_width: 1024,
            strict_fc_cap: false,
            selection: Selection::Accuracy,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::Config(m));
        for (name, v) in [
            ("n_nm", self.n_nm),
            ("n_neigh", self.n_neigh),
            ("batch_size", self.batch_size),
            ("fc_width", self.fc_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lambda_start >= self.lambda_end && self.lambda_end >= 0.0 && self.lambda_start.is_finite()) {
            return bad(format!(
                "need lambda_start >= lambda_end >= 0, got {} / {}",
                self.lambda_start, self.lambda_end
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.rng_seed > i64::MAX as u64 {
            return bad(format!("rng_seed {} exceeds {}", self.rng_seed, i64::MAX));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Morph(#[from] MorphError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Tensor(#[from] NdtError),
    #[error("training diverged: loss {0}")]
    Diverged(f64),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub graph: NASGraph,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub train_seconds: f64,
    pub morph_log: MorphLog,
}

impl Candidate {
    pub fn new(graph: NASGraph, init: InitMode) -> Self {
        Self {
            graph,
            val_accuracy: 0.0,
            val_loss: f64::INFINITY,
            train_seconds: 0.0,
            morph_log: MorphLog::new(init, AgingConfig::default()),
        }
    }

    fn score(&self, sel: Selection) -> f64 {
        match sel {
            Selection::Accuracy => self.val_accuracy,
            Selection::Loss => -self.val_loss,
        }
    }
}

/// Accuracy and mean cross-entropy of an eval-mode forward pass.
pub fn evaluate_split(g: &NASGraph, split: &Split) -> Result<(f64, f64), SearchError> {
    if split.is_empty() {
        return Err(SearchError::Data(DataError::Invalid("empty evaluation split".into())));
    }
    let mut net = Network::build(g)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let x = split.images.slice_batch(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
        let logits = net.predict(&x)?;
        let (l, _) = cross_entropy_loss(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok((correct as f64 / split.len() as f64, loss / split.len() as f64))
}

pub fn evaluate(g: &NASGraph, split: &Split) -> Result<f64, SearchError> {
    evaluate_split(g, split).map(|(acc, _)| acc)
}

/// Trains with SGD + momentum under one SGDR cycle spanning the session,
/// then re-scores on `val`. Returns the mean training loss of the last
/// epoch (NaN when `epochs == 0`).
pub fn train_candidate(
    c: &mut Candidate,
    train: &Split,
    val: &Split,
    epochs: usize,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, SearchError> {
    let start = Instant::now();
    let mut last_loss = f64::NAN;
    if epochs > 0 {
        if train.is_empty() {
            return Err(SearchError::Data(DataError::Invalid("empty training split".into())));
        }
        let per_epoch = train.len().div_ceil(cfg.batch_size);
        let schedule = SgdrSchedule::new(cfg.lambda_start, cfg.lambda_end, epochs * per_epoch)?;
        let mut net = Network::build(&c.graph)?;
        if !cfg.gradient_stopping {
            net.clear_aging();
        }
        let mut opt = SgdMomentum::new(cfg.momentum);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut t = 0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let x = train.images.slice_batch(chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let logits = net.forward(&x, true)?;
                let (loss, d_logits) = cross_entropy_loss(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(SearchError::Diverged(loss));
                }
                sum += loss * chunk.len() as f64;
                net.backward(&d_logits)?;
                opt.step(&mut net.parameters_mut(), sgdr_lr(t, &schedule)?)?;
                t += 1;
            }
            last_loss = sum / train.len() as f64;
        }
        net.write_back(&mut c.graph)?;
    }
    let (acc, loss) = evaluate_split(&c.graph, val)?;
    c.val_accuracy = acc;
    c.val_loss = loss;
    c.train_seconds = start.elapsed().as_secs_f64();
    Ok(last_loss)
}

/// Generator for `(step, index)`; step 0 is the seed, `n_steps + 1` the
/// final training session.
pub fn stream_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | index as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seed,
    Child,
    Final,
}

/// One metrics row per trained candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub step: usize,
    pub child: Option<usize>,
    pub phase: Phase,
    pub epochs: usize,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
    pub node_count: usize,
    pub parameter_count: usize,
    /// Morph kinds applied, `;`-separated.
    pub morphs: String,
    /// `ok`, `selected`, or the failure reason.
    pub status: String,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "step",
    "child",
    "phase",
    "epochs",
    "val_accuracy",
    "val_loss",
    "wall_seconds",
    "node_count",
    "parameter_count",
    "morphs",
    "status",
];

pub fn write_metrics_csv<W: Write>(records: &[CandidateRecord], out: W) -> Result<(), SearchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let io = |e: csv::Error| SearchError::Io(e.to_string());
    w.write_record(METRICS_COLUMNS).map_err(io)?;
    for r in records {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| SearchError::Io(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Validation score per child index; `None` for discarded children.
    pub child_accuracies: Vec<Option<f64>>,
    /// Index of the child that replaced the incumbent, if any.
    pub selected: Option<usize>,
    /// Incumbent validation accuracy after the step.
    pub best_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Candidate,
    pub seed_accuracy: f64,
    pub history: Vec<StepRecord>,
    pub records: Vec<CandidateRecord>,
    pub test_accuracy: Option<f64>,
    pub total_seconds: f64,
}

impl SearchResult {
    /// Incumbent accuracy after the seed and after every step.
    pub fn best_so_far(&self) -> Vec<f64> {
        std::iter::once(self.seed_accuracy)
            .chain(self.history.iter().map(|h| h.best_accuracy))
            .collect()
    }
}

/// Callbacks for streaming artifacts while a search runs.
pub trait SearchObserver {
    /// The trained seed, before any neighbors exist.
    fn on_seed(&mut self, _seed: &Candidate) {}
    fn on_candidate(&mut self, _record: &CandidateRecord) {}
    fn on_step(&mut self, _step: &StepRecord, _incumbent: &Candidate) {}
}

pub struct NoObserver;

impl SearchObserver for NoObserver {}

pub fn hill_climb(cfg: &SearchConfig, data: &Dataset) -> Result<SearchResult, SearchError> {
    hill_climb_with(cfg, data, 1, &mut NoObserver)
}

fn record(
    step: usize,
    child: Option<usize>,
    phase: Phase,
    epochs: usize,
    c: &Candidate,
    status: String,
    ok: bool,
) -> CandidateRecord {
    CandidateRecord {
        step,
        child,
        phase,
        epochs,
        val_accuracy: ok.then_some(c.val_accuracy),
        val_loss: ok.then_some(c.val_loss),
        wall_seconds: c.train_seconds,
        node_count: c.graph.node_count(),
        parameter_count: c.graph.parameter_count(),
        morphs: c.morph_log.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join(";"),
        status,
    }
}

/// Runs the search. Neighbors of a step train on up to `jobs` threads; each
/// child's generator depends only on `(rng_seed, step, index)`, so the
/// result does not depend on `jobs`.
pub fn hill_climb_with(
    cfg: &SearchConfig,
    data: &Dataset,
    jobs: usize,
    observer: &mut dyn SearchObserver,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let start = Instant::now();
    let (train, val) = data.validation_split(cfg.val_fraction, cfg.rng_seed)?;
    let mut records = Vec::new();
    let emit = |r: CandidateRecord, records: &mut Vec<CandidateRecord>, obs: &mut dyn SearchObserver| {
        obs.on_candidate(&r);
        records.push(r);
    };

    let mut rng = stream_rng(cfg.rng_seed, 0, 0);
    let mut seed = NASGraph::seed(data.input_shape, data.classes, cfg.fc_width, &mut rng)?;
    seed.set_strict_fc_cap(cfg.strict_fc_cap);
    seed.validate()?;
    let mut incumbent = Candidate::new(seed, cfg.init_mode);
    train_candidate(&mut incumbent, &train, &val, cfg.epoch_neigh, cfg, &mut rng)?;
    let seed_accuracy = incumbent.val_accuracy;
    emit(
        record(0, None, Phase::Seed, cfg.epoch_neigh, &incumbent, "selected".into(), true),
        &mut records,
        observer,
    );
    observer.on_seed(&incumbent);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SearchError::Config(format!("thread pool: {e}")))?;
    let mut history = Vec::new();
    for step in 1..=cfg.n_steps {
        let parent = &incumbent;
        let spawn = |i: usize| -> (Candidate, Result<(), SearchError>) {
            let mut rng = stream_rng(cfg.rng_seed, step, i);
            let t0 = Instant::now();
            let outcome = match random_morph_sequence(
                &parent.graph,
                cfg.n_nm,
                cfg.init_mode,
                &AgingConfig::default(),
                &mut rng,
            ) {
                Ok(o) => o,
                Err(e) => return (parent.clone(), Err(e.into())),
            };
            let mut child = Candidate::new(outcome.child, cfg.init_mode);
            child.morph_log = outcome.log;
            let res = train_candidate(&mut child, &train, &val, cfg.epoch_neigh, cfg, &mut rng).map(|_| ());
            child.train_seconds = t0.elapsed().as_secs_f64();
            (child, res)
        };
        let children: Vec<(Candidate, Result<(), SearchError>)> = if jobs > 1 {
            pool.install(|| (0..cfg.n_neigh).into_par_iter().map(spawn).collect())
        } else {
            (0..cfg.n_neigh).map(spawn).collect()
        };

        let mut best_score = incumbent.score(cfg.selection);
        let mut selected = None;
        let mut accs = Vec::with_capacity(children.len());
        for (i, (c, res)) in children.iter().enumerate() {
            match res {
                Ok(()) => {
                    accs.push(Some(c.val_accuracy));
                    if c.score(cfg.selection) > best_score {
                        best_score = c.score(cfg.selection);
                        selected = Some(i);
                    }
                }
                Err(_) => accs.push(None),
            }
        }
        for (i, (c, res)) in children.iter().enumerate() {
            let status = match res {
                Ok(()) if selected == Some(i) => "selected".to_string(),
                Ok(()) if c.morph_log.exhausted => "ok;exhausted".to_string(),
                Ok(()) => "ok".to_string(),
                Err(e) => format!("discarded: {e}"),
            };
            emit(
                record(step, Some(i), Phase::Child, cfg.epoch_neigh, c, status, res.is_ok()),
                &mut records,
                observer,
            );
        }
        if let Some(i) = selected {
            incumbent = children.into_iter().nth(i).expect("selected child exists").0;
        }
        let rec = StepRecord {
            step,
            child_accuracies: accs,
            selected,
            best_accuracy: incumbent.val_accuracy,
        };
        observer.on_step(&rec, &incumbent);
        history.push(rec);
    }

    let mut rng = stream_rng(cfg.rng_seed, cfg.n_steps + 1, 0);
    train_candidate(&mut incumbent, &train, &val, cfg.epoch_final, cfg, &mut rng)?;
    emit(
        record(
            cfg.n_steps + 1,
            None,
            Phase::Final,
            cfg.epoch_final,
            &incumbent,
            "selected".into(),
            true,
        ),
        &mut records,
        observer,
    );
    let test_accuracy = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&incumbent.graph, &data.test)?)
    };
    Ok(SearchResult {
        best: incumbent,
        seed_accuracy,
        history,
        records,
        test_accuracy,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}
