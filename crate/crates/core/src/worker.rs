//! The worker loop: slice the shard into subsets, fetch every row a subset
//! touches, train on a private copy, then overwrite the rows on the servers.
//!
//! Workers never lock, never read back mid-subset and never merge: the last
//! flush of a row wins.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{nce_gradients, sgd_step, EmbedError, EmbeddingTable, GradientSet, TrainConfig, Value};
use crate::graph::VertexRef;
use crate::server::client::{ClusterClient, RetryPolicy};
use crate::server::routes::RouteTable;
use crate::server::ServerError;
use crate::walk::format::{load_shard, FormatError};
use crate::walk::{shuffle_rows, TrainingRow};
use crate::seed;

pub const DEFAULT_BUDGET_BYTES: u64 = 2 << 30;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("vertex {0} has no local index")]
    Unmapped(VertexRef),
    #[error("batch {batch} produced a non-finite loss or gradient")]
    PoisonedBatch { batch: usize },
    #[error("a single row needs {needed} bytes of embeddings, over the {budget} byte budget")]
    BudgetTooSmall { needed: u64, budget: u64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Shard(#[from] FormatError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("worker aborted after {} subsets: {source}", report.subsets)]
    Server {
        #[source]
        source: ServerError,
        report: Box<WorkerReport>,
    },
}

/// Per-type bijection between global row ids and dense local indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocalIndexMap {
    forward: Vec<HashMap<u64, u64>>,
    reverse: Vec<Vec<u64>>,
}

impl LocalIndexMap {
    /// Local index of `v`, assigning the next free one on first sight.
    pub fn insert(&mut self, v: VertexRef) -> VertexRef {
        let t = v.vtype as usize;
        if self.forward.len() <= t {
            self.forward.resize_with(t + 1, HashMap::new);
            self.reverse.resize_with(t + 1, Vec::new);
        }
        let next = self.reverse[t].len() as u64;
        let local = *self.forward[t].entry(v.id).or_insert(next);
        if local == next {
            self.reverse[t].push(v.id);
        }
        VertexRef::new(v.vtype, local)
    }

    pub fn local(&self, v: VertexRef) -> Option<VertexRef> {
        let id = self.forward.get(v.vtype as usize)?.get(&v.id)?;
        Some(VertexRef::new(v.vtype, *id))
    }

    pub fn global(&self, local: VertexRef) -> Option<VertexRef> {
        let id = self.reverse.get(local.vtype as usize)?.get(local.id as usize)?;
        Some(VertexRef::new(local.vtype, *id))
    }

    /// Number of type slots (the highest type index seen plus one).
    pub fn type_count(&self) -> usize {
        self.reverse.len()
    }

    /// Global ids of `vtype` in local index order.
    pub fn globals(&self, vtype: u8) -> &[u64] {
        self.reverse.get(vtype as usize).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self, vtype: u8) -> usize {
        self.globals(vtype).len()
    }

    pub fn unique_count(&self) -> usize {
        self.reverse.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.unique_count() == 0
    }

    /// Bytes needed to hold every mapped row at dimension `dim`.
    pub fn footprint(&self, dim: usize) -> u64 {
        (self.unique_count() * dim * std::mem::size_of::<Value>()) as u64
    }
}

pub fn build_local_index(rows: &[TrainingRow]) -> LocalIndexMap {
    let mut map = LocalIndexMap::default();
    for row in rows {
        for v in row.vertices() {
            map.insert(v);
        }
    }
    map
}

fn map_rows(rows: &[TrainingRow], f: impl Fn(VertexRef) -> Option<VertexRef>) -> Result<Vec<TrainingRow>, WorkerError> {
    let m = |v: VertexRef| f(v).ok_or(WorkerError::Unmapped(v));
    rows.iter()
        .map(|r| {
            Ok(TrainingRow {
                input: m(r.input)?,
                context: m(r.context)?,
                negatives: r.negatives.iter().map(|&n| m(n)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

pub fn relabel(rows: &[TrainingRow], map: &LocalIndexMap) -> Result<Vec<TrainingRow>, WorkerError> {
    map_rows(rows, |v| map.local(v))
}

pub fn unrelabel(rows: &[TrainingRow], map: &LocalIndexMap) -> Result<Vec<TrainingRow>, WorkerError> {
    map_rows(rows, |v| map.global(v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetTraining {
    pub mean_loss: f64,
    pub steps: usize,
}

/// Run `cfg.n_steps` minibatches over localized `rows`, cycling through
/// `rows.chunks(batch_size)` in order. Each batch sums per-row gradients and
/// applies one SGD step per vertex type.
pub fn train_subset(
    tables: &mut [EmbeddingTable<Value>],
    rows: &[TrainingRow],
    cfg: &TrainConfig,
) -> Result<SubsetTraining, WorkerError> {
    if rows.is_empty() || cfg.n_steps == 0 || cfg.batch_size == 0 {
        return Ok(SubsetTraining { mean_loss: 0.0, steps: 0 });
    }
    let lr = cfg.learning_rate as Value;
    let mut grads: Vec<GradientSet<Value>> = tables.iter().map(|t| GradientSet::new(t.dim())).collect();
    let batches: Vec<&[TrainingRow]> = rows.chunks(cfg.batch_size).collect();
    let mut loss_sum = 0.0f64;
    let mut loss_rows = 0usize;
    for step in 0..cfg.n_steps {
        let batch = batches[step % batches.len()];
        for g in &mut grads {
            g.clear();
        }
        for row in batch {
            let x = tables[row.input.vtype as usize].row(row.input.id as usize);
            let y = tables[row.context.vtype as usize].row(row.context.id as usize);
            let negs: Vec<&[Value]> = row
                .negatives
                .iter()
                .map(|n| tables[n.vtype as usize].row(n.id as usize))
                .collect();
            let g = nce_gradients(x, y, &negs, cfg.metric)?;
            if !g.loss.is_finite() {
                return Err(WorkerError::PoisonedBatch { batch: step });
            }
            loss_sum += g.loss as f64;
            loss_rows += 1;
            grads[row.input.vtype as usize].accumulate(row.input.id as usize, &g.input)?;
            grads[row.context.vtype as usize].accumulate(row.context.id as usize, &g.context)?;
            for (n, gn) in row.negatives.iter().zip(&g.negatives) {
                grads[n.vtype as usize].accumulate(n.id as usize, gn)?;
            }
        }
        for (table, g) in tables.iter_mut().zip(&grads) {
            match sgd_step(table, g, lr) {
                Ok(_) => {}
                Err(EmbedError::PoisonedUpdate { .. }) => return Err(WorkerError::PoisonedBatch { batch: step }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(SubsetTraining {
        mean_loss: loss_sum / loss_rows as f64,
        steps: cfg.n_steps,
    })
}

#[derive(Debug, Clone)]
pub enum ShardSource {
    Rows(Vec<TrainingRow>),
    Path(PathBuf),
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub shard: ShardSource,
    pub train: TrainConfig,
    pub routes: RouteTable,
    pub dim: usize,
    pub budget_bytes: u64,
    pub worker_id: usize,
    pub seed: u64,
    pub epochs: u32,
    /// Reshuffle the shard before every epoch.
    pub shuffle: bool,
    /// Stop after this many batches in total.
    pub max_steps: Option<u64>,
    pub retry: RetryPolicy,
}

impl WorkerConfig {
    pub fn new(shard: ShardSource, train: TrainConfig, routes: RouteTable, dim: usize) -> Self {
        Self {
            shard,
            train,
            routes,
            dim,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            worker_id: 0,
            seed: 0,
            epochs: 1,
            shuffle: false,
            max_steps: None,
            retry: RetryPolicy::default(),
        }
    }
}

/// One line of the worker's progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetProgress {
    pub worker: usize,
    pub subset: usize,
    pub mean_loss: f64,
    pub fetched: usize,
    pub flushed: usize,
    pub steps: usize,
    pub rows: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker_id: usize,
    pub rows_seen: usize,
    pub subsets: usize,
    pub fetches: usize,
    pub flushes: usize,
    pub steps: u64,
    pub splits: usize,
    pub rejected_rows: usize,
    pub peak_local_bytes: u64,
    pub mean_losses: Vec<f64>,
    pub wall_ms: u64,
}

struct Run<'a> {
    cfg: &'a WorkerConfig,
    client: ClusterClient,
    report: WorkerReport,
    started: Instant,
    progress: &'a mut dyn FnMut(&SubsetProgress),
}

impl Run<'_> {
    fn steps_left(&self) -> Option<u64> {
        self.cfg.max_steps.map(|m| m.saturating_sub(self.report.steps))
    }

    fn subset(&mut self, rows: &[TrainingRow]) -> Result<(), WorkerError> {
        if rows.is_empty() || self.steps_left() == Some(0) {
            return Ok(());
        }
        let map = build_local_index(rows);
        let bytes = map.footprint(self.cfg.dim);
        if bytes > self.cfg.budget_bytes {
            if rows.len() == 1 {
                return Err(WorkerError::BudgetTooSmall {
                    needed: bytes,
                    budget: self.cfg.budget_bytes,
                });
            }
            warn!(
                "worker {}: subset of {} rows needs {bytes} bytes, over budget; splitting",
                self.cfg.worker_id,
                rows.len()
            );
            self.report.splits += 1;
            let (a, b) = rows.split_at(rows.len() / 2);
            self.subset(a)?;
            return self.subset(b);
        }
        self.report.peak_local_bytes = self.report.peak_local_bytes.max(bytes);

        let t0 = Instant::now();
        let dim = self.cfg.dim;
        let mut tables = Vec::with_capacity(map.type_count());
        for t in 0..map.type_count() {
            let ids = map.globals(t as u8);
            let values = if ids.is_empty() {
                Vec::new()
            } else {
                self.client.fetch_type(t as u8, ids).map_err(|e| self.abort(e))?
            };
            tables.push(EmbeddingTable::from_values(ids.len(), dim, values)?);
        }
        self.report.fetches += 1;

        let local = relabel(rows, &map)?;
        let batches = rows.len().div_ceil(self.cfg.train.batch_size.max(1));
        let n_steps = match self.steps_left() {
            Some(left) => batches.min(left as usize),
            None => batches,
        };
        let cfg = TrainConfig {
            n_steps,
            ..self.cfg.train
        };
        let trained = train_subset(&mut tables, &local, &cfg)?;

        let mut rejected = 0;
        for (t, table) in tables.iter().enumerate() {
            let ids = map.globals(t as u8);
            if !ids.is_empty() {
                rejected += self.client.store_type(t as u8, ids, table.values()).map_err(|e| self.abort(e))?.len();
            }
        }
        if rejected > 0 {
            warn!("worker {}: servers rejected {rejected} rows", self.cfg.worker_id);
        }
        self.report.flushes += 1;
        self.report.rejected_rows += rejected;
        self.report.rows_seen += rows.len();
        self.report.steps += trained.steps as u64;
        self.report.mean_losses.push(trained.mean_loss);
        let line = SubsetProgress {
            worker: self.cfg.worker_id,
            subset: self.report.subsets,
            mean_loss: trained.mean_loss,
            fetched: map.unique_count(),
            flushed: map.unique_count(),
            steps: trained.steps,
            rows: rows.len(),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        self.report.subsets += 1;
        (self.progress)(&line);
        Ok(())
    }

    fn abort(&self, source: ServerError) -> WorkerError {
        let mut report = self.report.clone();
        report.wall_ms = self.started.elapsed().as_millis() as u64;
        WorkerError::Server {
            source,
            report: Box::new(report),
        }
    }
}

/// Train through the whole shard `epochs` times, calling `progress` after each flushed subset.
pub fn run_worker(cfg: &WorkerConfig, progress: &mut dyn FnMut(&SubsetProgress)) -> Result<WorkerReport, WorkerError> {
    cfg.train.validate().map_err(WorkerError::Config)?;
    let mut rows = match &cfg.shard {
        ShardSource::Rows(r) => r.clone(),
        ShardSource::Path(p) => load_shard(p)?.rows,
    };
    let mut run = Run {
        cfg,
        client: ClusterClient::new(cfg.routes.clone(), cfg.dim, cfg.retry),
        report: WorkerReport {
            worker_id: cfg.worker_id,
            ..WorkerReport::default()
        },
        started: Instant::now(),
        progress,
    };
    let data_size = cfg.train.data_size();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            shuffle_rows(&mut rows, seed::derive(cfg.seed, &[cfg.worker_id as u64, epoch as u64]));
        }
        for subset in rows.chunks(data_size) {
            run.subset(subset)?;
        }
        if run.steps_left() == Some(0) {
            break;
        }
    }
    run.report.wall_ms = run.started.elapsed().as_millis() as u64;
    info!(
        "worker {}: {} subsets, {} steps, {} rows in {} ms",
        cfg.worker_id, run.report.subsets, run.report.steps, run.report.rows_seen, run.report.wall_ms
    );
    Ok(run.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{init_embeddings, nce_loss, Metric};
    use proptest::prelude::*;

    fn v(id: u64) -> VertexRef {
        VertexRef::untyped(id)
    }

    fn row(i: u64, c: u64, negs: &[u64]) -> TrainingRow {
        TrainingRow {
            input: v(i),
            context: v(c),
            negatives: negs.iter().map(|&n| v(n)).collect(),
        }
    }

    #[test]
    fn first_occurrence_order() {
        let rows = [row(42, 7, &[42, 9])];
        let map = build_local_index(&rows);
        assert_eq!(map.globals(0), &[42, 7, 9]);
        assert_eq!(map.local(v(9)), Some(v(2)));
        assert_eq!(relabel(&rows, &map).unwrap(), vec![row(0, 1, &[0, 2])]);
        assert!(build_local_index(&[]).is_empty());
        assert!(relabel(&[], &map).unwrap().is_empty());
        assert!(matches!(relabel(&[row(1, 42, &[])], &map), Err(WorkerError::Unmapped(_))));
    }

    #[test]
    fn types_get_separate_index_spaces() {
        let r = TrainingRow {
            input: VertexRef::new(1, 5),
            context: VertexRef::new(0, 5),
            negatives: vec![VertexRef::new(0, 8)],
        };
        let map = build_local_index(&[r]);
        assert_eq!(map.local(VertexRef::new(1, 5)), Some(VertexRef::new(1, 0)));
        assert_eq!(map.local(VertexRef::new(0, 8)), Some(VertexRef::new(0, 1)));
        assert_eq!(map.unique_count(), 3);
    }

    fn local_problem(seed: u64, n: u64, rows: usize) -> (Vec<EmbeddingTable<Value>>, Vec<TrainingRow>) {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        let rows = (0..rows)
            .map(|_| {
                let negs: Vec<u64> = (0..3).map(|_| rng.random_range(0..n)).collect();
                row(rng.random_range(0..n), rng.random_range(0..n), &negs)
            })
            .collect();
        (vec![init_embeddings(n, 8, seed)], rows)
    }

    fn mean_loss(tables: &[EmbeddingTable<Value>], rows: &[TrainingRow]) -> f64 {
        let total: f64 = rows
            .iter()
            .map(|r| {
                let negs: Vec<&[Value]> = r.negatives.iter().map(|n| tables[0].row(n.id as usize)).collect();
                nce_loss(tables[0].row(r.input.id as usize), tables[0].row(r.context.id as usize), &negs, Metric::Dot).unwrap() as f64
            })
            .sum();
        total / rows.len() as f64
    }

    #[test]
    fn zero_rate_and_zero_steps_leave_table_alone() {
        let (mut tables, rows) = local_problem(3, 10, 20);
        let before = tables.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 20,
            n_steps: 1,
            ..TrainConfig::default()
        };
        let out = train_subset(&mut tables, &rows, &cfg).unwrap();
        assert_eq!(tables, before);
        assert!((out.mean_loss - mean_loss(&before, &rows)).abs() < 1e-5);
        let cfg = TrainConfig { n_steps: 0, ..cfg };
        assert_eq!(train_subset(&mut tables, &rows, &cfg).unwrap().steps, 0);
        assert_eq!(tables, before);
    }

    #[test]
    fn fifty_steps_reduce_loss() {
        let (mut tables, rows) = local_problem(11, 30, 64);
        let initial = mean_loss(&tables, &rows);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            n_steps: 50,
            ..TrainConfig::default()
        };
        train_subset(&mut tables, &rows, &cfg).unwrap();
        let after = mean_loss(&tables, &rows);
        assert!(after < initial, "{after} >= {initial}");
    }

    #[test]
    fn poisoned_batch_is_reported() {
        let (mut tables, mut rows) = local_problem(5, 10, 8);
        tables[0].push_row(&[Value::NAN; 8]).unwrap();
        rows[5].input = v(10);
        let cfg = TrainConfig {
            batch_size: 4,
            n_steps: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train_subset(&mut tables, &rows, &cfg), Err(WorkerError::PoisonedBatch { batch: 1 })));
    }

    proptest! {
        #[test]
        fn relabel_round_trips(raw in prop::collection::vec((0u8..3, 0u64..50, 0u64..50, prop::collection::vec(0u64..50, 0..4)), 0..60)) {
            let rows: Vec<TrainingRow> = raw
                .into_iter()
                .map(|(t, i, c, n)| TrainingRow {
                    input: VertexRef::new(t, i),
                    context: VertexRef::new((t + 1) % 3, c),
                    negatives: n.into_iter().map(|x| VertexRef::new((t + 1) % 3, x)).collect(),
                })
                .collect();
            let map = build_local_index(&rows);
            for t in 0..map.type_count() as u8 {
                for (local, &g) in map.globals(t).iter().enumerate() {
                    prop_assert_eq!(map.local(VertexRef::new(t, g)), Some(VertexRef::new(t, local as u64)));
                }
            }
            let local = relabel(&rows, &map).unwrap();
            for r in &local {
                for x in r.vertices() {
                    prop_assert!((x.id as usize) < map.len(x.vtype));
                }
            }
            prop_assert_eq!(unrelabel(&local, &map).unwrap(), rows);
        }
    }
}
