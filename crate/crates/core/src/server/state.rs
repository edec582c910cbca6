//! In-memory table slices held by one parameter server.
//!
//! Every row sits behind its own lock, so a read never observes half of one
//! write and half of another, and writers to different rows never contend.
//! There is no lock spanning rows: concurrent puts to the same row resolve
//! last-writer-wins.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use super::plan::Assignment;
use super::ServerError;
use crate::embed::{init_row, Value};
use crate::seed;

/// Seed of the initial table for `vtype` given the run seed.
pub fn type_seed(seed: u64, vtype: u8) -> u64 {
    seed::derive(seed, &[0x7461_626c_65, vtype as u64])
}

pub struct Shard {
    pub vtype: u8,
    pub range: Range<u64>,
    rows: Vec<RwLock<Box<[Value]>>>,
}

impl Shard {
    /// Rows `range` of the type's table, initialized exactly as a full table built from `type_seed` would be.
    pub fn initialized(vtype: u8, range: Range<u64>, dim: usize, seed: u64) -> Self {
        let tseed = type_seed(seed, vtype);
        let rows = range
            .clone()
            .map(|row| {
                let mut values = vec![0.0; dim].into_boxed_slice();
                init_row(row, dim, tseed, &mut values);
                RwLock::new(values)
            })
            .collect();
        Self { vtype, range, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Counters {
    pub get_requests: AtomicU64,
    pub put_requests: AtomicU64,
    pub rows_read: AtomicU64,
    pub rows_written: AtomicU64,
    pub rows_rejected: AtomicU64,
    pub protocol_errors: AtomicU64,
    pub stats_requests: AtomicU64,
}

impl Counters {
    fn bump(c: &AtomicU64, by: u64) {
        c.fetch_add(by, Ordering::Relaxed);
    }
}

/// Request counters as parsed from a STATS reply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub get_requests: u64,
    pub put_requests: u64,
    pub rows_read: u64,
    pub rows_written: u64,
    pub rows_rejected: u64,
    pub protocol_errors: u64,
}

impl Stats {
    pub fn parse(text: &str) -> Self {
        let mut s = Stats::default();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim().parse().unwrap_or(0);
            match k.trim() {
                "get_requests" => s.get_requests = v,
                "put_requests" => s.put_requests = v,
                "rows_read" => s.rows_read = v,
                "rows_written" => s.rows_written = v,
                "rows_rejected" => s.rows_rejected = v,
                "protocol_errors" => s.protocol_errors = v,
                _ => {}
            }
        }
        s
    }
}

impl std::ops::Add for Stats {
    type Output = Stats;

    fn add(self, o: Stats) -> Stats {
        Stats {
            get_requests: self.get_requests + o.get_requests,
            put_requests: self.put_requests + o.put_requests,
            rows_read: self.rows_read + o.rows_read,
            rows_written: self.rows_written + o.rows_written,
            rows_rejected: self.rows_rejected + o.rows_rejected,
            protocol_errors: self.protocol_errors + o.protocol_errors,
        }
    }
}

pub struct ServerState {
    dim: usize,
    shards: Vec<Shard>,
    pub counters: Counters,
}

impl ServerState {
    pub fn new(dim: usize, mut shards: Vec<Shard>) -> Self {
        shards.sort_by_key(|s| (s.vtype, s.range.start));
        Self {
            dim,
            shards,
            counters: Counters::default(),
        }
    }

    /// Materialize this server's assignments from a plan.
    pub fn from_assignments<'a>(dim: usize, seed: u64, assignments: impl IntoIterator<Item = &'a Assignment>) -> Self {
        let shards = assignments
            .into_iter()
            .map(|a| Shard::initialized(a.vtype, a.rows.clone(), dim, seed))
            .collect();
        Self::new(dim, shards)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    fn locate(&self, vtype: u8, id: u64) -> Option<&RwLock<Box<[Value]>>> {
        let i = self.shards.partition_point(|s| (s.vtype, s.range.end) <= (vtype, id));
        let shard = self.shards.get(i)?;
        if shard.vtype == vtype && shard.range.contains(&id) {
            shard.rows.get((id - shard.range.start) as usize)
        } else {
            None
        }
    }

    /// Rows in request order. Any id outside this server's ranges fails the whole request.
    pub fn get_rows(&self, vtype: u8, ids: &[u64]) -> Result<Vec<Value>, ServerError> {
        Counters::bump(&self.counters.get_requests, 1);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let row = self.locate(vtype, id).ok_or(ServerError::OutOfRange { vtype, id })?;
            out.extend_from_slice(&row.read());
        }
        Counters::bump(&self.counters.rows_read, ids.len() as u64);
        Ok(out)
    }

    /// Overwrite whole rows. Rows with an unknown id or non-finite values are
    /// rejected individually; the rest are applied. Returns the rejected ids.
    pub fn put_rows(&self, vtype: u8, ids: &[u64], values: &[Value]) -> Result<Vec<u64>, ServerError> {
        Counters::bump(&self.counters.put_requests, 1);
        if values.len() != ids.len() * self.dim {
            return Err(ServerError::DimMismatch {
                expected: ids.len() * self.dim,
                found: values.len(),
            });
        }
        let mut rejected = Vec::new();
        for (&id, row) in ids.iter().zip(values.chunks_exact(self.dim.max(1))) {
            match self.locate(vtype, id) {
                Some(slot) if row.iter().all(|v| v.is_finite()) => slot.write().copy_from_slice(row),
                _ => rejected.push(id),
            }
        }
        Counters::bump(&self.counters.rows_written, (ids.len() - rejected.len()) as u64);
        Counters::bump(&self.counters.rows_rejected, rejected.len() as u64);
        Ok(rejected)
    }

    pub fn stats(&self) -> Stats {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        Stats {
            get_requests: get(&c.get_requests),
            put_requests: get(&c.put_requests),
            rows_read: get(&c.rows_read),
            rows_written: get(&c.rows_written),
            rows_rejected: get(&c.rows_rejected),
            protocol_errors: get(&c.protocol_errors),
        }
    }

    pub fn stats_text(&self) -> String {
        let s = self.stats();
        let mut out = String::new();
        let _ = writeln!(out, "get_requests={}", s.get_requests);
        let _ = writeln!(out, "put_requests={}", s.put_requests);
        let _ = writeln!(out, "rows_read={}", s.rows_read);
        let _ = writeln!(out, "rows_written={}", s.rows_written);
        let _ = writeln!(out, "rows_rejected={}", s.rows_rejected);
        let _ = writeln!(out, "protocol_errors={}", s.protocol_errors);
        let _ = writeln!(out, "rows_held={}", self.shards.iter().map(Shard::len).sum::<usize>());
        out
    }
}
