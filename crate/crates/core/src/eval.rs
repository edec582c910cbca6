//! Link-prediction accuracy on held-out edges, and accuracy-over-steps tracking.
//!
//! A pair is predicted to be an edge when `σ(score) >= threshold`, so a score
//! of exactly zero counts as an edge at the default threshold of 0.5.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{score, sigmoid, EmbedError, EmbeddingTable, Metric, Real, Value};
use crate::graph::{Graph, GraphError, VertexRef};
use crate::seed;
use crate::server::client::ClusterClient;
use crate::server::ServerError;
use crate::worker::LocalIndexMap;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("train ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("noise space saturated: no non-edge found for the type pair of {0} after {1} attempts")]
    SaturatedNoise(VertexRef, usize),
    #[error("no embedding row for vertex {0}")]
    MissingRow(VertexRef),
    #[error("split line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Pair = (VertexRef, VertexRef);

/// Held-out positives and sampled non-edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalPairs {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

impl EvalPairs {
    pub fn vertices(&self) -> impl Iterator<Item = VertexRef> + '_ {
        self.positives
            .iter()
            .chain(&self.negatives)
            .flat_map(|&(u, v)| [u, v])
    }
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    /// The input graph without the held-out edges.
    pub train: Graph,
    pub pairs: EvalPairs,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitOptions {
    /// Fraction of edges kept for training.
    pub ratio: f64,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub max_attempts: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_TRAIN_RATIO,
            seed: 0,
            negatives_per_positive: 1,
            max_attempts: 10_000,
        }
    }
}

pub fn split_edges(g: &Graph, ratio: f64, seed: u64) -> Result<EvalSplit, EvalError> {
    split_edges_with(
        g,
        &SplitOptions {
            ratio,
            seed,
            ..SplitOptions::default()
        },
    )
}

/// Hold out `round((1 - ratio) * |E|)` uniformly chosen edges and sample the
/// same number of non-edges (times `negatives_per_positive`).
///
/// Each negative keeps the vertex types of its positive, is not an edge of the
/// full graph in either direction, is not a self pair and is not repeated.
pub fn split_edges_with(g: &Graph, opts: &SplitOptions) -> Result<EvalSplit, EvalError> {
    if !(opts.ratio > 0.0 && opts.ratio < 1.0) {
        return Err(EvalError::BadRatio(opts.ratio));
    }
    let mut rng = seed::child_rng(opts.seed, &[0x73706c6974]);
    let mut edges: Vec<Pair> = g.edges().collect();
    edges.shuffle(&mut rng);
    let held = ((1.0 - opts.ratio) * edges.len() as f64).round() as usize;
    let positives: Vec<Pair> = edges[..held].to_vec();
    let train_edges = edges[held..].iter().copied();
    let train = Graph::from_edges(g.types().to_vec(), &g.vertex_counts(), train_edges, g.is_undirected())?;

    let canon = |(u, v): Pair| if g.is_undirected() && v < u { (v, u) } else { (u, v) };
    let mut seen: HashSet<Pair> = HashSet::new();
    let mut negatives = Vec::with_capacity(held * opts.negatives_per_positive);
    for &(u, v) in &positives {
        for _ in 0..opts.negatives_per_positive {
            let mut found = None;
            for _ in 0..opts.max_attempts {
                let a = VertexRef::new(u.vtype, rng.random_range(0..g.vertex_count(u.vtype)));
                let b = VertexRef::new(v.vtype, rng.random_range(0..g.vertex_count(v.vtype)));
                if a == b || g.adjacent(a, b) || g.adjacent(b, a) || seen.contains(&canon((a, b))) {
                    continue;
                }
                found = Some((a, b));
                break;
            }
            let pair = found.ok_or(EvalError::SaturatedNoise(u, opts.max_attempts))?;
            seen.insert(canon(pair));
            negatives.push(pair);
        }
    }
    Ok(EvalSplit {
        train,
        pairs: EvalPairs { positives, negatives },
        ratio: opts.ratio,
        seed: opts.seed,
    })
}

/// Accuracies are percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub positive: f64,
    pub negative: f64,
    pub total: f64,
    pub threshold: f64,
    pub step: Option<u64>,
}

impl AccuracyReport {
    pub fn new(positive: f64, negative: f64, threshold: f64, step: Option<u64>) -> Self {
        Self {
            positive,
            negative,
            total: (positive + negative) / 2.0,
            threshold,
            step,
        }
    }
}

pub fn predicts_edge<T: Real>(u: &[T], v: &[T], metric: Metric, threshold: f64) -> Result<bool, EmbedError> {
    let p = sigmoid(score(u, v, metric)?);
    Ok(p.to_f64().unwrap_or(f64::NAN) >= threshold)
}

/// Row lookup shared by full tables and fetched subsets.
pub trait RowSource<T> {
    fn row_of(&self, v: VertexRef) -> Option<&[T]>;
}

impl<T: Real> RowSource<T> for [EmbeddingTable<T>] {
    fn row_of(&self, v: VertexRef) -> Option<&[T]> {
        let t = self.get(v.vtype as usize)?;
        ((v.id as usize) < t.rows()).then(|| t.row(v.id as usize))
    }
}

impl<T: Real> RowSource<T> for Vec<EmbeddingTable<T>> {
    fn row_of(&self, v: VertexRef) -> Option<&[T]> {
        self.as_slice().row_of(v)
    }
}

/// Tables holding only the rows named by a [`LocalIndexMap`].
pub struct MappedTables<T> {
    pub map: LocalIndexMap,
    pub tables: Vec<EmbeddingTable<T>>,
}

impl<T: Real> RowSource<T> for MappedTables<T> {
    fn row_of(&self, v: VertexRef) -> Option<&[T]> {
        let local = self.map.local(v)?;
        self.tables.as_slice().row_of(local)
    }
}

pub fn link_accuracy<T: Real, S: RowSource<T> + ?Sized>(
    tables: &S,
    pairs: &EvalPairs,
    metric: Metric,
    threshold: f64,
) -> Result<AccuracyReport, EvalError> {
    let classify = |&(u, v): &Pair| -> Result<bool, EvalError> {
        let a = tables.row_of(u).ok_or(EvalError::MissingRow(u))?;
        let b = tables.row_of(v).ok_or(EvalError::MissingRow(v))?;
        Ok(predicts_edge(a, b, metric, threshold)?)
    };
    let mut hits = 0usize;
    for p in &pairs.positives {
        hits += usize::from(classify(p)?);
    }
    let mut rejections = 0usize;
    for p in &pairs.negatives {
        rejections += usize::from(!classify(p)?);
    }
    let pct = |k: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    Ok(AccuracyReport::new(
        pct(hits, pairs.positives.len()),
        pct(rejections, pairs.negatives.len()),
        threshold,
        None,
    ))
}

/// Read-only client evaluating the live server tables.
pub struct Evaluator {
    client: ClusterClient,
    pairs: EvalPairs,
    map: LocalIndexMap,
    pub metric: Metric,
    pub threshold: f64,
}

impl Evaluator {
    pub fn new(client: ClusterClient, pairs: EvalPairs, metric: Metric, threshold: f64) -> Self {
        let mut map = LocalIndexMap::default();
        for v in pairs.vertices() {
            map.insert(v);
        }
        Self {
            client,
            pairs,
            map,
            metric,
            threshold,
        }
    }

    /// Fetch every row the split needs, with GET requests only.
    pub fn fetch(&mut self) -> Result<MappedTables<Value>, EvalError> {
        let dim = self.client.dim();
        let mut tables = Vec::with_capacity(self.map.type_count());
        for t in 0..self.map.type_count() as u8 {
            let ids = self.map.globals(t);
            let values = if ids.is_empty() {
                Vec::new()
            } else {
                self.client.fetch_type(t, ids)?
            };
            tables.push(EmbeddingTable::from_values(ids.len(), dim, values)?);
        }
        Ok(MappedTables {
            map: self.map.clone(),
            tables,
        })
    }

    pub fn evaluate(&mut self) -> Result<AccuracyReport, EvalError> {
        let tables = self.fetch()?;
        link_accuracy(&tables, &self.pairs, self.metric, self.threshold)
    }
}

/// One convergence sample. `report` is `None` when the fetch failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub step: u64,
    pub report: Option<AccuracyReport>,
    pub wall_ms: u64,
}

/// Sample accuracy every `cadence` global steps until `done()` and the step
/// count stops moving, then take one final sample. The step recorded is the
/// count read after the fetch, so it never precedes the state it describes.
pub fn convergence_log(
    evaluator: &mut Evaluator,
    cadence: u64,
    steps: &dyn Fn() -> u64,
    done: &dyn Fn() -> bool,
    poll: Duration,
) -> Vec<ConvergenceRow> {
    let cadence = cadence.max(1);
    let started = Instant::now();
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut next = cadence;
    let sample = |rows: &mut Vec<ConvergenceRow>, ev: &mut Evaluator| {
        let report = ev.evaluate();
        let step = steps();
        if rows.last().is_some_and(|r| r.step >= step) {
            return;
        }
        if let Err(e) = &report {
            log::warn!("evaluation at step {step} failed: {e}");
        }
        rows.push(ConvergenceRow {
            step,
            report: report.ok().map(|r| AccuracyReport { step: Some(step), ..r }),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    };
    loop {
        let finished = done();
        let now = steps();
        if finished {
            break;
        }
        if now >= next {
            sample(&mut rows, evaluator);
            next = (now / cadence + 1) * cadence;
        } else {
            std::thread::sleep(poll);
        }
    }
    let final_step = steps();
    if rows.last().map_or(true, |r| r.step < final_step || r.report.is_none()) {
        if rows.last().is_some_and(|r| r.step == final_step) {
            rows.pop();
        }
        sample(&mut rows, evaluator);
    }
    rows
}

/// CSV with a `# config:` comment line, a header, then one line per sample.
/// Failed samples leave the accuracy columns empty.
pub fn write_convergence_csv(mut out: impl Write, config: &str, rows: &[ConvergenceRow]) -> io::Result<()> {
    writeln!(out, "# config: {config}")?;
    writeln!(out, "step,pos_acc,neg_acc,total_acc,wall_ms")?;
    for r in rows {
        match &r.report {
            Some(a) => writeln!(out, "{},{:.4},{:.4},{:.4},{}", r.step, a.positive, a.negative, a.total, r.wall_ms)?,
            None => writeln!(out, "{},,,,{}", r.step, r.wall_ms)?,
        }
    }
    out.flush()
}

pub fn read_convergence_csv(input: impl BufRead) -> Result<Vec<ConvergenceRow>, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("step,") || line.trim().is_empty() {
            continue;
        }
        let bad = |message: &str| EvalError::Parse {
            line: i + 1,
            message: message.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let step = f[0].parse().map_err(|_| bad("bad step"))?;
        let report = if f[1].is_empty() {
            None
        } else {
            let mut r = AccuracyReport::new(num(f[1])?, num(f[2])?, DEFAULT_THRESHOLD, Some(step));
            r.total = num(f[3])?;
            Some(r)
        };
        rows.push(ConvergenceRow {
            step,
            report,
            wall_ms: f[4].parse().map_err(|_| bad("bad wall_ms"))?,
        });
    }
    Ok(rows)
}

/// First sampled step whose total accuracy reaches `target` percent.
pub fn steps_to_accuracy(rows: &[ConvergenceRow], target: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.report.is_some_and(|a| a.total >= target))
        .map(|r| r.step)
}

fn token(labels: &[String], typed: bool, v: VertexRef) -> String {
    if typed {
        format!("{}:{}", labels[v.vtype as usize], v.id)
    } else {
        v.id.to_string()
    }
}

/// Write `<src> <dst> POS|NEG` lines using dense ids. Typed endpoints are `label:id`.
pub fn write_split(path: &Path, labels: &[String], pairs: &EvalPairs) -> io::Result<()> {
    let typed = labels.len() > 1;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# held-out pairs: {} POS, {} NEG", pairs.positives.len(), pairs.negatives.len())?;
    for (tag, list) in [("POS", &pairs.positives), ("NEG", &pairs.negatives)] {
        for &(u, v) in list {
            writeln!(out, "{} {} {tag}", token(labels, typed, u), token(labels, typed, v))?;
        }
    }
    out.flush()
}

pub fn read_split(path: &Path, labels: &[String]) -> Result<EvalPairs, EvalError> {
    parse_split(BufReader::new(File::open(path)?), labels)
}

pub fn parse_split(input: impl BufRead, labels: &[String]) -> Result<EvalPairs, EvalError> {
    let mut pairs = EvalPairs::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |message: String| EvalError::Parse { line: i + 1, message };
        let endpoint = |tok: &str| -> Result<VertexRef, EvalError> {
            let (vtype, id) = match tok.split_once(':') {
                Some((label, id)) => {
                    let t = labels
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| bad(format!("unknown vertex type `{label}`")))?;
                    (t as u8, id)
                }
                None => (0, tok),
            };
            let id = id.parse().map_err(|_| bad(format!("bad vertex id `{id}`")))?;
            Ok(VertexRef::new(vtype, id))
        };
        match trimmed.split_whitespace().collect::<Vec<_>>().as_slice() {
            [a, b, "POS"] => pairs.positives.push((endpoint(a)?, endpoint(b)?)),
            [a, b, "NEG"] => pairs.negatives.push((endpoint(a)?, endpoint(b)?)),
            _ => return Err(bad(format!("expected `src dst POS|NEG`, got `{trimmed}`"))),
        }
    }
    Ok(pairs)
}
