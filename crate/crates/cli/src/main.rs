use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use grembed_core::driver::launch::{Launch, WorkerEvent, LISTENING_PREFIX};
use grembed_core::driver::{self, RunConfig};
use grembed_core::embed::{Metric, TrainConfig};
use grembed_core::graph::{load_edge_list, LoadOptions, Schema};
use grembed_core::seed;
use grembed_core::server::plan::{plan_partitions, PartitionPlan, PlanRequest, Strategy};
use grembed_core::server::routes::RouteTable;
use grembed_core::server::service::Server;
use grembed_core::server::state::ServerState;
use grembed_core::synth::{stochastic_block_model, write_edge_list, SbmParams};
use grembed_core::walk::format::{save_shard, write_shard_tsv, ShardFile};
use grembed_core::walk::{attach_negatives, generate_pairs, NoiseConfig, WalkParams};
use grembed_core::worker::{run_worker, ShardSource, WorkerConfig, DEFAULT_BUDGET_BYTES};

#[derive(Parser)]
#[command(name = "grembed", version, about = "Parameter-server training of graph embeddings on a local cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline once.
    Run {
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the pipeline once per worker count and tabulate the results.
    Sweep {
        /// Comma-separated worker counts.
        #[arg(long = "workers", value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Link-prediction accuracy of saved checkpoints on a split file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "dot")]
        metric: Metric,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train on one shard against running servers.
    Worker(WorkerArgs),
    /// Serve one slice of a partition plan.
    Server {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        server_id: usize,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Size a partition plan without serving it.
    Plan {
        /// Vertex count per type, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<u64>,
        #[arg(long)]
        dim: u32,
        #[arg(long, default_value_t = 4)]
        bytes_per_value: u64,
        #[arg(long)]
        capacity: u64,
        #[arg(long, default_value = "row-wise")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        min_servers: usize,
        /// Write the plan as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate walk pairs with negatives and write them as a shard file.
    Walk {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "untyped")]
        schema: Schema,
        #[arg(long)]
        directed: bool,
        #[arg(long, default_value_t = 10)]
        walks_per_vertex: u32,
        #[arg(long, default_value_t = 5)]
        walk_length: u32,
        #[arg(long, default_value_t = 2)]
        context_window: u32,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write tab-separated text instead of the binary format.
        #[arg(long)]
        tsv: bool,
    },
    /// Write a stochastic block model edge list.
    GenSbm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1000,1000")]
        blocks: Vec<u64>,
        #[arg(long, default_value_t = 0.05)]
        p_in: f64,
        #[arg(long, default_value_t = 0.002)]
        p_out: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    metric: Option<Metric>,
    /// Any config key, as `key=value`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run servers and workers as threads instead of child processes.
    #[arg(long)]
    threads: bool,
}

impl RunArgs {
    fn config(&self, workers: Option<usize>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut set = |k: &str, v: String| cfg.set("command line", k, &v);
        if let Some(g) = &self.graph {
            set("graph", g.display().to_string())?;
        }
        if let Some(o) = &self.out {
            set("out", o.display().to_string())?;
        }
        if let Some(w) = workers {
            set("workers", w.to_string())?;
        }
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(d) = self.dim {
            set("dim", d.to_string())?;
        }
        if let Some(e) = self.epochs {
            set("epochs", e.to_string())?;
        }
        if let Some(m) = self.metric {
            set("metric", m.to_string())?;
        }
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set("--set", k, v)?;
        }
        Ok(cfg)
    }

    fn launch(&self) -> Result<Launch> {
        if self.threads {
            return Ok(Launch::Threads);
        }
        let exe = std::env::current_exe().context("locating the grembed executable")?;
        Ok(Launch::Processes { exe })
    }
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    shard: PathBuf,
    #[arg(long)]
    routes: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    n_steps: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET_BYTES)]
    budget_bytes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dot")]
    metric: Metric,
    #[arg(long, default_value_t = 0)]
    worker_id: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    shuffle: bool,
}

fn emit(out: &mut impl Write, event: &WorkerEvent) -> io::Result<()> {
    serde_json::to_writer(&mut *out, event)?;
    writeln!(out)?;
    out.flush()
}

fn worker(a: WorkerArgs) -> Result<()> {
    let routes = RouteTable::load(&a.routes).with_context(|| format!("reading routes {}", a.routes.display()))?;
    let train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        n_steps: a.n_steps,
        metric: a.metric,
        ..TrainConfig::default()
    };
    let mut cfg = WorkerConfig::new(ShardSource::Path(a.shard), train, routes, a.dim);
    cfg.budget_bytes = a.budget_bytes;
    cfg.seed = a.seed;
    cfg.worker_id = a.worker_id;
    cfg.epochs = a.epochs;
    cfg.max_steps = a.max_steps;
    cfg.shuffle = a.shuffle;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failed = None;
    let report = run_worker(&cfg, &mut |p| {
        if let Err(e) = emit(&mut out, &WorkerEvent::Progress(p.clone())) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e).context("writing progress");
    }
    emit(&mut io::stdout().lock(), &WorkerEvent::Done(report))?;
    Ok(())
}

fn server(plan: PathBuf, server_id: usize, listen: String, seed: u64) -> Result<()> {
    let text = fs::read_to_string(&plan).with_context(|| format!("reading plan {}", plan.display()))?;
    let plan: PartitionPlan = serde_json::from_str(&text).context("parsing plan")?;
    if server_id >= plan.server_count() {
        bail!("server id {server_id} out of range: plan has {} servers", plan.server_count());
    }
    if plan.strategy != Strategy::RowWise {
        bail!("only row-wise plans can be served");
    }
    let state = ServerState::from_assignments(plan.dim as usize, seed, plan.assignments_for(server_id));
    let server = Server::bind(listen.as_str(), state).with_context(|| format!("binding {listen}"))?;
    let addr = server.local_addr()?;
    info!("server {server_id} listening on {addr}");
    {
        let mut out = io::stdout().lock();
        writeln!(out, "{LISTENING_PREFIX}{addr}")?;
        out.flush()?;
    }
    server.serve()?;
    info!("server {server_id} shut down");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { workers, run } => {
            let cfg = run.config(workers)?;
            let report = driver::run(&cfg, &run.launch()?)?;
            let a = report.final_accuracy;
            println!(
                "workers={} steps={} pos_acc={:.2} neg_acc={:.2} total_acc={:.2} out={}",
                cfg.workers,
                report.total_steps,
                a.positive,
                a.negative,
                a.total,
                cfg.out.display()
            );
        }
        Command::Sweep { counts, run } => {
            let cfg = run.config(None)?;
            let rows = driver::sweep(&cfg, &counts, &run.launch()?)?;
            print!("{}", fs::read_to_string(cfg.out.join("sweep_table.tsv"))?);
            if rows.iter().all(|r| r.error.is_some()) {
                bail!("every sweep run failed");
            }
        }
        Command::Eval {
            checkpoint,
            split,
            metric,
            threshold,
        } => {
            let a = driver::evaluate_checkpoint(&checkpoint, &split, metric, threshold)?;
            println!("pos_acc={:.2} neg_acc={:.2} total_acc={:.2}", a.positive, a.negative, a.total);
        }
        Command::Worker(a) => worker(a)?,
        Command::Server {
            plan,
            server_id,
            listen,
            seed,
        } => server(plan, server_id, listen, seed)?,
        Command::Plan {
            counts,
            dim,
            bytes_per_value,
            capacity,
            strategy,
            min_servers,
            out,
        } => {
            let mut req = PlanRequest::new(&counts, dim, bytes_per_value, capacity, strategy);
            req.min_servers_per_type = min_servers;
            let plan = plan_partitions(&req)?;
            for t in 0..counts.len() as u8 {
                println!("type {t}: {} servers", plan.servers_for_type(t));
            }
            println!("servers {}", plan.server_count());
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&plan)?)?;
            }
        }
        Command::Walk {
            graph,
            out,
            schema,
            directed,
            walks_per_vertex,
            walk_length,
            context_window,
            negatives,
            seed: s,
            tsv,
        } => {
            let opts = LoadOptions {
                schema,
                undirected: !directed,
                known_types: None,
            };
            let loaded = load_edge_list(&graph, &opts).with_context(|| format!("loading {}", graph.display()))?;
            let params = WalkParams {
                walks_per_vertex,
                walk_length,
                context_window,
                seed: s,
            };
            let pairs = generate_pairs(&loaded.graph, &params)?;
            let noise = NoiseConfig {
                negatives,
                ..NoiseConfig::default()
            };
            let rows = attach_negatives(&loaded.graph, &pairs.pairs, &noise, &mut seed::child_rng(s, &[1]))?;
            let n = rows.len();
            let shard = ShardFile::new(rows, loaded.graph.type_count() > 1)?;
            if tsv {
                write_shard_tsv(BufWriter::new(File::create(&out)?), &shard)?;
            } else {
                save_shard(&out, &shard)?;
            }
            println!("rows {n} walks {} truncated {}", pairs.walks, pairs.truncated_walks);
        }
        Command::GenSbm {
            out,
            blocks,
            p_in,
            p_out,
            seed,
        } => {
            let sbm = stochastic_block_model(&SbmParams {
                block_sizes: blocks,
                p_in,
                p_out,
                seed,
            });
            write_edge_list(BufWriter::new(File::create(&out)?), &sbm.edges)?;
            println!("vertices {} edges {}", sbm.block.len(), sbm.edges.len());
        }
    }
    Ok(())
}
