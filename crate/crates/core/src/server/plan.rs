//! Sizing and placement of embedding tables on parameter servers.
//!
//! Row-wise plans give every server whole rows (all `D` values) of a single
//! vertex type. Column-wise plans give every server a column range of every row
//! of a type, which caps the number of servers per type at `D` and requires a
//! full column to fit on one server. Only row-wise plans are served; column-wise
//! plans exist for the memory arithmetic.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    RowWise,
    ColumnWise,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row" | "row-wise" => Ok(Strategy::RowWise),
            "column" | "column-wise" => Ok(Strategy::ColumnWise),
            other => Err(format!("unknown strategy `{other}` (expected row-wise|column-wise)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("server capacity must be positive")]
    ZeroCapacity,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("infeasible: one {unit} of vertex type {vtype} needs {required} bytes, server capacity is {capacity}")]
    Infeasible {
        unit: &'static str,
        vtype: u8,
        required: u64,
        capacity: u64,
    },
    #[error("frequency table for vertex type {vtype} has {found} entries, expected {expected}")]
    FrequencyShape { vtype: u8, expected: u64, found: usize },
    #[error("table size overflows 64 bits")]
    Overflow,
}

/// A slice of one vertex type's table placed on one server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub server: usize,
    pub vtype: u8,
    pub rows: Range<u64>,
    pub cols: Range<u32>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub strategy: Strategy,
    pub dim: u32,
    pub bytes_per_value: u64,
    pub server_capacity: u64,
    pub assignments: Vec<Assignment>,
    /// Bytes held by each server, indexed by server id.
    pub server_bytes: Vec<u64>,
}

impl PartitionPlan {
    pub fn server_count(&self) -> usize {
        self.server_bytes.len()
    }

    pub fn assignments_for(&self, server: usize) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().filter(move |a| a.server == server)
    }

    pub fn servers_for_type(&self, vtype: u8) -> usize {
        let mut ids: Vec<usize> = self.assignments.iter().filter(|a| a.vtype == vtype).map(|a| a.server).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct PlanRequest<'a> {
    pub counts: &'a [u64],
    pub dim: u32,
    pub bytes_per_value: u64,
    pub server_capacity: u64,
    pub strategy: Strategy,
    /// Per-type, per-vertex occurrence counts in the training rows.
    pub frequencies: Option<&'a [Vec<u64>]>,
    /// Lower bound on servers per non-empty type (row-wise only).
    pub min_servers_per_type: usize,
}

impl<'a> PlanRequest<'a> {
    pub fn new(counts: &'a [u64], dim: u32, bytes_per_value: u64, server_capacity: u64, strategy: Strategy) -> Self {
        Self {
            counts,
            dim,
            bytes_per_value,
            server_capacity,
            strategy,
            frequencies: None,
            min_servers_per_type: 1,
        }
    }
}

/// Bytes of one row (`dim` values).
pub fn row_bytes(dim: u32, bytes_per_value: u64) -> Result<u64, PlanError> {
    (dim as u64).checked_mul(bytes_per_value).ok_or(PlanError::Overflow)
}

/// Bytes of one column (`count` values).
pub fn column_bytes(count: u64, bytes_per_value: u64) -> Result<u64, PlanError> {
    count.checked_mul(bytes_per_value).ok_or(PlanError::Overflow)
}

pub fn table_bytes(count: u64, dim: u32, bytes_per_value: u64) -> Result<u64, PlanError> {
    count.checked_mul(row_bytes(dim, bytes_per_value)?).ok_or(PlanError::Overflow)
}

pub fn plan_partitions(req: &PlanRequest<'_>) -> Result<PartitionPlan, PlanError> {
    if req.server_capacity == 0 {
        return Err(PlanError::ZeroCapacity);
    }
    if req.dim == 0 {
        return Err(PlanError::ZeroDim);
    }
    let mut plan = PartitionPlan {
        strategy: req.strategy,
        dim: req.dim,
        bytes_per_value: req.bytes_per_value,
        server_capacity: req.server_capacity,
        assignments: Vec::new(),
        server_bytes: Vec::new(),
    };
    for (t, &count) in req.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let vtype = t as u8;
        let groups = match req.strategy {
            Strategy::ColumnWise => plan_columns(vtype, count, req)?,
            Strategy::RowWise => match req.frequencies {
                Some(freq) => {
                    let f = freq.get(t).map_or(&[][..], Vec::as_slice);
                    if f.len() as u64 != count {
                        return Err(PlanError::FrequencyShape {
                            vtype,
                            expected: count,
                            found: f.len(),
                        });
                    }
                    plan_rows_by_frequency(vtype, count, f, req)?
                }
                None => plan_rows_uniform(vtype, count, req)?,
            },
        };
        for group in groups {
            let server = plan.server_bytes.len();
            let mut total = 0;
            for mut a in group {
                a.server = server;
                total += a.bytes;
                plan.assignments.push(a);
            }
            plan.server_bytes.push(total);
        }
    }
    Ok(plan)
}

/// Even split of `n` items into `parts` contiguous ranges; sizes differ by at most one.
fn even_ranges(n: u64, parts: u64) -> impl Iterator<Item = Range<u64>> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).scan(0u64, move |start, i| {
        let len = base + u64::from(i < extra);
        let r = *start..*start + len;
        *start += len;
        Some(r)
    })
}

fn plan_rows_uniform(vtype: u8, count: u64, req: &PlanRequest<'_>) -> Result<Vec<Vec<Assignment>>, PlanError> {
    let row = row_bytes(req.dim, req.bytes_per_value)?;
    let per_server = req.server_capacity / row.max(1);
    if per_server == 0 {
        return Err(PlanError::Infeasible {
            unit: "row",
            vtype,
            required: row,
            capacity: req.server_capacity,
        });
    }
    let servers = count.div_ceil(per_server).max(req.min_servers_per_type as u64).min(count);
    Ok(even_ranges(count, servers)
        .map(|rows| {
            vec![Assignment {
                server: 0,
                vtype,
                bytes: (rows.end - rows.start) * row,
                rows,
                cols: 0..req.dim,
            }]
        })
        .collect())
}

/// First-fit-decreasing over contiguous row chunks, packing by request frequency
/// mass under the byte capacity. Each server may receive several row ranges.
fn plan_rows_by_frequency(
    vtype: u8,
    count: u64,
    freq: &[u64],
    req: &PlanRequest<'_>,
) -> Result<Vec<Vec<Assignment>>, PlanError> {
    let row = row_bytes(req.dim, req.bytes_per_value)?;
    let per_server = req.server_capacity / row.max(1);
    if per_server == 0 {
        return Err(PlanError::Infeasible {
            unit: "row",
            vtype,
            required: row,
            capacity: req.server_capacity,
        });
    }
    let min_servers = count.div_ceil(per_server).max(req.min_servers_per_type as u64).min(count);
    let chunks = count.min(64 * min_servers);

    struct Item {
        rows: Range<u64>,
        mass: u64,
    }
    let mut items: Vec<Item> = even_ranges(count, chunks)
        .map(|rows| Item {
            mass: freq[rows.start as usize..rows.end as usize].iter().sum(),
            rows,
        })
        .collect();
    items.sort_by(|a, b| b.mass.cmp(&a.mass).then(a.rows.start.cmp(&b.rows.start)));

    let total_mass: u64 = items.iter().map(|i| i.mass).sum();
    let target = total_mass.div_ceil(min_servers).max(1);

    struct Bin {
        rows: u64,
        mass: u64,
        ranges: Vec<Range<u64>>,
    }
    let mut bins: Vec<Bin> = Vec::new();
    for item in items {
        let len = item.rows.end - item.rows.start;
        let fits = |b: &Bin| b.rows + len <= per_server && (b.ranges.is_empty() || b.mass + item.mass <= target);
        let idx = match bins.iter().position(fits) {
            Some(i) => i,
            None => {
                bins.push(Bin {
                    rows: 0,
                    mass: 0,
                    ranges: Vec::new(),
                });
                bins.len() - 1
            }
        };
        let bin = &mut bins[idx];
        bin.rows += len;
        bin.mass += item.mass;
        bin.ranges.push(item.rows);
    }

    Ok(bins
        .into_iter()
        .map(|mut bin| {
            bin.ranges.sort_by_key(|r| r.start);
            let mut merged: Vec<Range<u64>> = Vec::new();
            for r in bin.ranges {
                match merged.last_mut() {
                    Some(last) if last.end == r.start => last.end = r.end,
                    _ => merged.push(r),
                }
            }
            merged
                .into_iter()
                .map(|rows| Assignment {
                    server: 0,
                    vtype,
                    bytes: (rows.end - rows.start) * row,
                    rows,
                    cols: 0..req.dim,
                })
                .collect()
        })
        .collect())
}

fn plan_columns(vtype: u8, count: u64, req: &PlanRequest<'_>) -> Result<Vec<Vec<Assignment>>, PlanError> {
    let column = column_bytes(count, req.bytes_per_value)?;
    if column > req.server_capacity {
        return Err(PlanError::Infeasible {
            unit: "column",
            vtype,
            required: column,
            capacity: req.server_capacity,
        });
    }
    let cols_per_server = (req.server_capacity / column.max(1)).min(req.dim as u64);
    let servers = (req.dim as u64).div_ceil(cols_per_server);
    Ok(even_ranges(req.dim as u64, servers)
        .map(|c| {
            vec![Assignment {
                server: 0,
                vtype,
                rows: 0..count,
                bytes: (c.end - c.start) * column,
                cols: c.start as u32..c.end as u32,
            }]
        })
        .collect())
}
