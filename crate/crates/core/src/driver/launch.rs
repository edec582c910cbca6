//! Starting servers and workers either as threads of this process or as child
//! processes of a `grembed` executable. Both talk loopback TCP.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::server::client::{RetryPolicy, ServerClient};
use crate::server::plan::PartitionPlan;
use crate::server::service::{Server, ServerHandle};
use crate::server::state::ServerState;
use crate::worker::{run_worker, ShardSource, SubsetProgress, WorkerConfig, WorkerError, WorkerReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launch {
    /// Servers and workers run on threads of the calling process.
    Threads,
    /// Servers and workers are child processes of this executable.
    Processes { exe: PathBuf },
}

/// One line of a worker process's stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum WorkerEvent {
    Progress(SubsetProgress),
    Done(WorkerReport),
}

/// First line a server process prints once it is accepting connections.
pub const LISTENING_PREFIX: &str = "listening ";

/// Kills and reaps the child when dropped unless it was already waited for.
pub struct ChildGuard {
    name: String,
    child: Option<Child>,
}

impl ChildGuard {
    pub fn new(name: impl Into<String>, child: Child) -> Self {
        Self {
            name: name.into(),
            child: Some(child),
        }
    }

    pub fn id(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    pub fn take_stdout(&mut self) -> Option<ChildStdout> {
        self.child.as_mut()?.stdout.take()
    }

    /// Wait for exit and fail on a nonzero status.
    pub fn wait(&mut self) -> io::Result<()> {
        let Some(mut child) = self.child.take() else { return Ok(()) };
        let status = child.wait()?;
        if status.success() {
            Ok(())
        } else {
            Err(io::Error::other(format!("{} exited with {status}", self.name)))
        }
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            if let Ok(None) = child.try_wait() {
                warn!("killing {}", self.name);
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

fn log_file(logs: &Path, name: &str) -> io::Result<File> {
    fs::create_dir_all(logs)?;
    File::create(logs.join(format!("{name}.log")))
}

enum ServerProc {
    Thread(ServerHandle),
    Child(ChildGuard),
}

pub struct Servers {
    procs: Vec<ServerProc>,
    pub addrs: Vec<String>,
}

impl Servers {
    pub fn start(launch: &Launch, plan: &PartitionPlan, plan_path: &Path, seed: u64, logs: &Path) -> io::Result<Self> {
        let mut procs = Vec::new();
        let mut addrs = Vec::new();
        for id in 0..plan.server_count() {
            match launch {
                Launch::Threads => {
                    let state = ServerState::from_assignments(plan.dim as usize, seed, plan.assignments_for(id));
                    let handle = Server::bind("127.0.0.1:0", state)?.spawn()?;
                    addrs.push(handle.addr.to_string());
                    procs.push(ServerProc::Thread(handle));
                }
                Launch::Processes { exe } => {
                    let name = format!("server{id}");
                    let child = Command::new(exe)
                        .arg("server")
                        .arg("--plan")
                        .arg(plan_path)
                        .args(["--server-id", &id.to_string(), "--listen", "127.0.0.1:0", "--seed", &seed.to_string()])
                        .stdin(Stdio::null())
                        .stdout(Stdio::piped())
                        .stderr(log_file(logs, &name)?)
                        .spawn()?;
                    let mut guard = ChildGuard::new(name.clone(), child);
                    let mut line = String::new();
                    let stdout = guard.take_stdout().expect("stdout is piped");
                    BufReader::new(stdout).read_line(&mut line)?;
                    let addr = line
                        .trim()
                        .strip_prefix(LISTENING_PREFIX)
                        .ok_or_else(|| io::Error::other(format!("{name} did not report its address (got `{}`)", line.trim())))?
                        .to_string();
                    debug!("{name} listening on {addr}");
                    addrs.push(addr);
                    procs.push(ServerProc::Child(guard));
                }
            }
        }
        Ok(Self { procs, addrs })
    }

    /// Send SHUTDOWN to every server and reap it.
    pub fn shutdown(mut self) -> io::Result<()> {
        let mut first: Option<io::Error> = None;
        for (proc, addr) in self.procs.drain(..).zip(&self.addrs) {
            let sent = ServerClient::connect(addr.clone(), RetryPolicy::none()).and_then(|mut c| c.shutdown());
            if let Err(e) = sent {
                first.get_or_insert(io::Error::other(e.to_string()));
            }
            let joined = match proc {
                ServerProc::Thread(h) => h.join(),
                ServerProc::Child(mut g) => g.wait(),
            };
            if let Err(e) = joined {
                first.get_or_insert(e);
            }
        }
        first.map_or(Ok(()), Err)
    }
}

impl Drop for Servers {
    fn drop(&mut self) {
        for (proc, addr) in self.procs.drain(..).zip(&self.addrs) {
            if let Ok(mut c) = ServerClient::connect(addr.clone(), RetryPolicy::none()) {
                let _ = c.shutdown();
            }
            if let ServerProc::Thread(h) = proc {
                let _ = h.join();
            }
        }
    }
}

/// Shared progress of all running workers.
#[derive(Debug, Default)]
pub struct Progress {
    pub steps: AtomicU64,
    pub finished: AtomicUsize,
}

enum WorkerProc {
    Thread(JoinHandle<Result<WorkerReport, WorkerError>>),
    Child {
        guard: ChildGuard,
        reader: JoinHandle<Option<WorkerReport>>,
    },
}

pub struct Workers {
    procs: Vec<WorkerProc>,
    pub progress: Arc<Progress>,
}

/// Worker settings that become command-line flags for a worker process.
fn worker_args(cfg: &WorkerConfig, shard: &Path, routes: &Path) -> Vec<String> {
    let mut a: Vec<String> = vec![
        "worker".into(),
        "--shard".into(),
        shard.display().to_string(),
        "--routes".into(),
        routes.display().to_string(),
    ];
    let mut flag = |k: &str, v: String| {
        a.push(format!("--{k}"));
        a.push(v);
    };
    flag("dim", cfg.dim.to_string());
    flag("lr", cfg.train.learning_rate.to_string());
    flag("batch-size", cfg.train.batch_size.to_string());
    flag("n-steps", cfg.train.n_steps.to_string());
    flag("budget-bytes", cfg.budget_bytes.to_string());
    flag("seed", cfg.seed.to_string());
    flag("metric", cfg.train.metric.to_string());
    flag("worker-id", cfg.worker_id.to_string());
    flag("epochs", cfg.epochs.to_string());
    if let Some(m) = cfg.max_steps {
        flag("max-steps", m.to_string());
    }
    if cfg.shuffle {
        a.push("--shuffle".into());
    }
    a
}

impl Workers {
    /// Start one worker per config. With [`Launch::Processes`] every config's
    /// shard must be a [`ShardSource::Path`].
    pub fn start(launch: &Launch, configs: Vec<WorkerConfig>, routes_path: &Path, logs: &Path) -> io::Result<Self> {
        let progress = Arc::new(Progress::default());
        let mut procs = Vec::new();
        for cfg in configs {
            let p = Arc::clone(&progress);
            match launch {
                Launch::Threads => {
                    let handle = thread::Builder::new().name(format!("worker{}", cfg.worker_id)).spawn(move || {
                        let out = run_worker(&cfg, &mut |s: &SubsetProgress| {
                            p.steps.fetch_add(s.steps as u64, Ordering::SeqCst);
                        });
                        p.finished.fetch_add(1, Ordering::SeqCst);
                        out
                    })?;
                    procs.push(WorkerProc::Thread(handle));
                }
                Launch::Processes { exe } => {
                    let ShardSource::Path(shard) = &cfg.shard else {
                        return Err(io::Error::other("worker processes need a shard file"));
                    };
                    let name = format!("worker{}", cfg.worker_id);
                    let child = Command::new(exe)
                        .args(worker_args(&cfg, shard, routes_path))
                        .stdin(Stdio::null())
                        .stdout(Stdio::piped())
                        .stderr(log_file(logs, &name)?)
                        .spawn()?;
                    let mut guard = ChildGuard::new(name.clone(), child);
                    let stdout = guard.take_stdout().expect("stdout is piped");
                    let reader = thread::spawn(move || {
                        let mut report = None;
                        for line in BufReader::new(stdout).lines() {
                            let Ok(line) = line else { break };
                            match serde_json::from_str::<WorkerEvent>(&line) {
                                Ok(WorkerEvent::Progress(s)) => {
                                    p.steps.fetch_add(s.steps as u64, Ordering::SeqCst);
                                }
                                Ok(WorkerEvent::Done(r)) => report = Some(r),
                                Err(_) => debug!("{name}: {line}"),
                            }
                        }
                        p.finished.fetch_add(1, Ordering::SeqCst);
                        report
                    });
                    procs.push(WorkerProc::Child { guard, reader });
                }
            }
        }
        Ok(Self { procs, progress })
    }

    pub fn count(&self) -> usize {
        self.procs.len()
    }

    pub fn all_finished(&self) -> bool {
        self.progress.finished.load(Ordering::SeqCst) >= self.procs.len()
    }

    /// Wait for every worker and collect their reports in start order.
    pub fn join(self) -> Result<Vec<WorkerReport>, String> {
        let mut reports = Vec::new();
        let mut first_err = None;
        for (k, proc) in self.procs.into_iter().enumerate() {
            let out = match proc {
                WorkerProc::Thread(h) => match h.join() {
                    Ok(Ok(r)) => Ok(r),
                    Ok(Err(e)) => Err(format!("worker {k}: {e}")),
                    Err(_) => Err(format!("worker {k} panicked")),
                },
                WorkerProc::Child { mut guard, reader } => {
                    let report = reader.join().ok().flatten();
                    match (guard.wait(), report) {
                        (Ok(()), Some(r)) => Ok(r),
                        (Ok(()), None) => Err(format!("worker {k} exited without a report")),
                        (Err(e), _) => Err(format!("worker {k}: {e}")),
                    }
                }
            };
            match out {
                Ok(r) => reports.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        first_err.map_or(Ok(reports), Err)
    }
}
