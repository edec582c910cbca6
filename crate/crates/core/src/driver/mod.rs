//! End-to-end orchestration of a local cluster: load, split, walk, shard, plan,
//! serve, train, evaluate, checkpoint.
//!
//! A global step is one completed batch, summed over all workers.

pub mod config;
pub mod launch;

use std::error::Error as StdError;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, RunConfig};
pub use launch::Launch;

use crate::embed::{read_checkpoint, write_checkpoint, EmbeddingTable, Value};
use crate::eval::{
    convergence_log, link_accuracy, split_edges_with, steps_to_accuracy, write_convergence_csv, write_split,
    AccuracyReport, ConvergenceRow, EvalPairs, Evaluator, SplitOptions,
};
use crate::graph::{load_edge_list, Graph, LoadOptions};
use crate::seed;
use crate::server::client::{ClusterClient, RetryPolicy};
use crate::server::plan::{plan_partitions, PartitionPlan, PlanRequest, Strategy};
use crate::server::routes::RouteTable;
use crate::walk::format::{save_shard, ShardFile};
use crate::walk::{attach_negatives, generate_pairs, shard_rows, shuffle_rows, NoiseConfig};
use crate::worker::{ShardSource, WorkerConfig, WorkerReport};
use launch::{Servers, Workers};

/// Accuracy targets reported in the steps-to-threshold table.
pub const ACCURACY_TARGETS: [f64; 3] = [60.0, 70.0, 80.0];

const STEP_DEFINITION: &str = "one global step is one completed batch, summed over all workers";

/// Rows fetched per request when writing checkpoints.
const CHECKPOINT_CHUNK: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, DriverError>;
}

impl<T, E: Into<Box<dyn StdError + Send + Sync>>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, DriverError> {
        self.map_err(|e| DriverError::Stage {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsToTarget {
    pub target: f64,
    pub step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub step_definition: String,
    pub servers: usize,
    pub training_rows: usize,
    pub total_steps: u64,
    pub workers: Vec<WorkerReport>,
    pub final_accuracy: AccuracyReport,
    pub steps_to_target: Vec<StepsToTarget>,
    pub convergence: Vec<ConvergenceRow>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn steps_to(&self, target: f64) -> Option<u64> {
        steps_to_accuracy(&self.convergence, target)
    }
}

/// Load `cfg.graph` and run the pipeline on it.
pub fn run(cfg: &RunConfig, launch: &Launch) -> Result<RunReport, DriverError> {
    cfg.validate()?;
    let opts = LoadOptions {
        schema: cfg.schema,
        undirected: cfg.undirected,
        known_types: None,
    };
    let loaded = load_edge_list(&cfg.graph, &opts).stage("load")?;
    run_graph(cfg, launch, &loaded.graph)
}

/// Fetch every row of every type from the servers.
pub fn fetch_tables(client: &mut ClusterClient, graph: &Graph) -> Result<Vec<EmbeddingTable<Value>>, DriverError> {
    let dim = client.dim();
    let mut tables = Vec::new();
    for t in 0..graph.type_count() as u8 {
        let n = graph.vertex_count(t);
        let mut values = Vec::with_capacity(n as usize * dim);
        let mut start = 0;
        while start < n {
            let end = (start + CHECKPOINT_CHUNK).min(n);
            let ids: Vec<u64> = (start..end).collect();
            values.extend(client.fetch_type(t, &ids).stage("checkpoint")?);
            start = end;
        }
        tables.push(EmbeddingTable::from_values(n as usize, dim, values).stage("checkpoint")?);
    }
    Ok(tables)
}

pub fn checkpoint_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("{label}.gemb"))
}

pub fn save_checkpoints(dir: &Path, graph: &Graph, tables: &[EmbeddingTable<Value>]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (ty, table) in graph.types().iter().zip(tables) {
        let mut out = BufWriter::new(File::create(checkpoint_path(dir, &ty.label))?);
        write_checkpoint(&mut out, &ty.label, table)?;
        out.flush()?;
    }
    Ok(())
}

/// Load `<label>.gemb` for each label, in order.
pub fn load_checkpoints(dir: &Path, labels: &[String]) -> Result<Vec<EmbeddingTable<Value>>, DriverError> {
    labels
        .iter()
        .map(|l| {
            let file = File::open(checkpoint_path(dir, l)).stage("checkpoint")?;
            let (_, table) = read_checkpoint::<Value>(std::io::BufReader::new(file)).stage("checkpoint")?;
            Ok(table)
        })
        .collect()
}

/// Labels of the checkpoints in `dir`, sorted.
pub fn checkpoint_labels(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut labels: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "gemb").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    labels.sort();
    Ok(labels)
}

fn plan_for(cfg: &RunConfig, graph: &Graph) -> Result<PartitionPlan, DriverError> {
    let counts = graph.vertex_counts();
    let mut req = PlanRequest::new(
        &counts,
        cfg.dim as u32,
        std::mem::size_of::<Value>() as u64,
        cfg.server_capacity,
        Strategy::RowWise,
    );
    req.min_servers_per_type = cfg.servers_per_type;
    plan_partitions(&req).stage("plan")
}

/// Run the pipeline on an already loaded graph.
pub fn run_graph(cfg: &RunConfig, launch: &Launch, graph: &Graph) -> Result<RunReport, DriverError> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.out;
    fs::create_dir_all(out).stage("setup")?;
    let logs = out.join("logs");
    let labels: Vec<String> = graph.types().iter().map(|t| t.label.clone()).collect();

    let split = split_edges_with(
        graph,
        &SplitOptions {
            ratio: cfg.train_ratio,
            seed: cfg.split_seed(),
            ..SplitOptions::default()
        },
    )
    .stage("split")?;
    write_split(&out.join("split.txt"), &labels, &split.pairs).stage("split")?;

    let walk = crate::walk::WalkParams {
        seed: seed::derive(cfg.seed, &[0x77616c6b]),
        ..cfg.walk
    };
    let pairs = generate_pairs(&split.train, &walk).stage("walk")?;
    let noise = NoiseConfig {
        negatives: cfg.train.negatives,
        max_attempts: cfg.max_attempts,
        ..NoiseConfig::default()
    };
    let mut rows = attach_negatives(&split.train, &pairs.pairs, &noise, &mut seed::child_rng(cfg.seed, &[0x6e6f697365]))
        .stage("negatives")?;
    shuffle_rows(&mut rows, seed::derive(cfg.seed, &[0x73687566]));
    let training_rows = rows.len();
    info!("{} training rows from {} walks", training_rows, pairs.walks);
    let shards = shard_rows(rows, cfg.workers).stage("shard")?;

    let plan = plan_for(cfg, graph)?;
    let plan_path = out.join("plan.json");
    fs::write(&plan_path, serde_json::to_string_pretty(&plan).stage("plan")?).stage("plan")?;

    let servers = Servers::start(launch, &plan, &plan_path, cfg.seed, &logs).stage("servers")?;
    let routes = RouteTable::from_plan(&plan, &labels, &servers.addrs).stage("servers")?;
    let routes_path = out.join("routes.txt");
    routes.save(&routes_path).stage("servers")?;

    let mut configs = Vec::with_capacity(cfg.workers);
    let shard_dir = out.join("shards");
    for shard in shards {
        let source = match launch {
            Launch::Threads => ShardSource::Rows(shard.rows),
            Launch::Processes { .. } => {
                fs::create_dir_all(&shard_dir).stage("shard")?;
                let path = shard_dir.join(format!("w{}.gwlk", shard.shard_index));
                save_shard(&path, &ShardFile::new(shard.rows, graph.type_count() > 1).stage("shard")?).stage("shard")?;
                ShardSource::Path(path)
            }
        };
        let mut w = WorkerConfig::new(source, cfg.train, routes.clone(), cfg.dim);
        w.worker_id = shard.shard_index;
        w.seed = cfg.seed;
        w.epochs = cfg.epochs;
        w.budget_bytes = cfg.budget_bytes;
        w.shuffle = cfg.shuffle;
        configs.push(w);
    }

    let workers = Workers::start(launch, configs, &routes_path, &logs).stage("workers")?;
    let mut evaluator = Evaluator::new(
        ClusterClient::new(routes.clone(), cfg.dim, RetryPolicy::default()),
        split.pairs.clone(),
        cfg.train.metric,
        cfg.threshold,
    );
    let progress = workers.progress.clone();
    let convergence = convergence_log(
        &mut evaluator,
        cfg.eval_cadence,
        &|| progress.steps.load(Ordering::SeqCst),
        &|| workers.all_finished(),
        Duration::from_millis(2),
    );
    let reports = workers.join().stage("workers")?;
    let total_steps = progress.steps.load(Ordering::SeqCst);

    let mut client = ClusterClient::new(routes, cfg.dim, RetryPolicy::default());
    let tables = fetch_tables(&mut client, graph)?;
    save_checkpoints(&out.join("checkpoint"), graph, &tables).stage("checkpoint")?;
    servers.shutdown().stage("shutdown")?;

    let mut final_accuracy = link_accuracy(&tables, &split.pairs, cfg.train.metric, cfg.threshold).stage("eval")?;
    final_accuracy.step = Some(total_steps);
    match convergence.last().and_then(|r| r.report) {
        Some(last) if last.total == final_accuracy.total => {}
        other => warn!("final logged accuracy {other:?} differs from checkpoint accuracy {final_accuracy:?}"),
    }

    let csv = File::create(out.join(format!("convergence_w{}.csv", cfg.workers))).stage("report")?;
    write_convergence_csv(BufWriter::new(csv), &cfg.summary(), &convergence).stage("report")?;

    let report = RunReport {
        config: cfg.clone(),
        step_definition: STEP_DEFINITION.to_string(),
        servers: plan.server_count(),
        training_rows,
        total_steps,
        workers: reports,
        final_accuracy,
        steps_to_target: ACCURACY_TARGETS
            .iter()
            .map(|&target| StepsToTarget {
                target,
                step: steps_to_accuracy(&convergence, target),
            })
            .collect(),
        convergence,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).stage("report")?).stage("report")?;
    Ok(report)
}

/// Accuracy of checkpoint tables on a held-out split.
pub fn evaluate_checkpoint(
    dir: &Path,
    split: &Path,
    metric: crate::embed::Metric,
    threshold: f64,
) -> Result<AccuracyReport, DriverError> {
    let labels = checkpoint_labels(dir).stage("eval")?;
    let tables = load_checkpoints(dir, &labels)?;
    let pairs: EvalPairs = crate::eval::read_split(split, &labels).stage("eval")?;
    link_accuracy(&tables, &pairs, metric, threshold).stage("eval")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub workers: usize,
    pub run_dir: PathBuf,
    pub accuracy: Option<AccuracyReport>,
    pub steps_to_70: Option<u64>,
    pub total_steps: Option<u64>,
    pub error: Option<String>,
}

/// One run per worker count, all sharing the split seed. Failed runs are
/// recorded and the sweep moves on.
pub fn sweep(cfg: &RunConfig, worker_counts: &[usize], launch: &Launch) -> Result<Vec<SweepRow>, DriverError> {
    if worker_counts.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one worker count".into()).into());
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).stage("setup")?;
    let mut rows = Vec::new();
    for (i, &k) in worker_counts.iter().enumerate() {
        let run_dir = cfg.out.join(format!("run{i}_w{k}"));
        let run_cfg = RunConfig {
            workers: k,
            out: run_dir.clone(),
            split_seed: Some(cfg.split_seed()),
            ..cfg.clone()
        };
        let row = match run(&run_cfg, launch) {
            Ok(r) => {
                let unique = worker_counts.iter().filter(|&&c| c == k).count() == 1;
                let name = if unique {
                    format!("convergence_w{k}.csv")
                } else {
                    format!("convergence_w{k}_run{i}.csv")
                };
                if let Err(e) = fs::copy(run_dir.join(format!("convergence_w{k}.csv")), cfg.out.join(name)) {
                    warn!("could not copy convergence log: {e}");
                }
                SweepRow {
                    workers: k,
                    run_dir,
                    accuracy: Some(r.final_accuracy),
                    steps_to_70: r.steps_to(70.0),
                    total_steps: Some(r.total_steps),
                    error: None,
                }
            }
            Err(e) => {
                warn!("sweep run with {k} workers failed: {e}");
                SweepRow {
                    workers: k,
                    run_dir,
                    accuracy: None,
                    steps_to_70: None,
                    total_steps: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let mut table = String::from("workers\tpos_acc\tneg_acc\ttotal_acc\tsteps_to_70\ttotal_steps\tstatus\n");
    for r in &rows {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |s| s.to_string());
        match &r.accuracy {
            Some(a) => table.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\tok\n",
                r.workers,
                a.positive,
                a.negative,
                a.total,
                opt(r.steps_to_70),
                opt(r.total_steps)
            )),
            None => table.push_str(&format!(
                "{}\t-\t-\t-\t-\t-\tfailed: {}\n",
                r.workers,
                r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ")
            )),
        }
    }
    fs::write(cfg.out.join("sweep_table.tsv"), table).stage("report")?;
    Ok(rows)
}
