//! Which server owns which rows.
//!
//! Text format, one record per line:
//!
//! ```text
//! server <server_id> <host:port>
//! range <vtype> <label> <start> <end> <server_id>
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::plan::{PartitionPlan, Strategy};
use crate::graph::VertexRef;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("column-wise plans cannot be routed by row")]
    ColumnWise,
    #[error("plan has {plan} servers but {given} addresses were given")]
    AddressCount { plan: usize, given: usize },
    #[error("vertex type {vtype}: ranges do not tile 0..{count} (gap or overlap at row {at})")]
    NotTotal { vtype: u8, count: u64, at: u64 },
    #[error("routes line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteRange {
    pub start: u64,
    pub end: u64,
    pub server: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RouteTable {
    labels: Vec<String>,
    ranges: Vec<Vec<RouteRange>>,
    servers: Vec<String>,
}

impl RouteTable {
    pub fn from_plan(plan: &PartitionPlan, labels: &[String], addresses: &[String]) -> Result<Self, RouteError> {
        if plan.strategy == Strategy::ColumnWise {
            return Err(RouteError::ColumnWise);
        }
        if plan.server_count() != addresses.len() {
            return Err(RouteError::AddressCount {
                plan: plan.server_count(),
                given: addresses.len(),
            });
        }
        let mut ranges = vec![Vec::new(); labels.len()];
        for a in &plan.assignments {
            ranges[a.vtype as usize].push(RouteRange {
                start: a.rows.start,
                end: a.rows.end,
                server: a.server,
            });
        }
        let table = Self {
            labels: labels.to_vec(),
            ranges,
            servers: addresses.to_vec(),
        };
        table.normalized()
    }

    fn normalized(mut self) -> Result<Self, RouteError> {
        for (t, rs) in self.ranges.iter_mut().enumerate() {
            rs.sort_by_key(|r| r.start);
            let mut at = 0;
            for r in rs.iter() {
                if r.start != at || r.end <= r.start {
                    return Err(RouteError::NotTotal {
                        vtype: t as u8,
                        count: rs.last().map_or(0, |l| l.end),
                        at,
                    });
                }
                at = r.end;
            }
        }
        Ok(self)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn servers(&self) -> &[String] {
        &self.servers
    }

    /// Rows covered for a vertex type.
    pub fn vertex_count(&self, vtype: u8) -> u64 {
        self.ranges
            .get(vtype as usize)
            .and_then(|r| r.last())
            .map_or(0, |r| r.end)
    }

    pub fn ranges(&self, vtype: u8) -> &[RouteRange] {
        self.ranges.get(vtype as usize).map_or(&[], Vec::as_slice)
    }

    /// Server index owning `v`, if `v` is routable.
    pub fn route(&self, v: VertexRef) -> Option<usize> {
        let rs = self.ranges.get(v.vtype as usize)?;
        let i = rs.partition_point(|r| r.end <= v.id);
        rs.get(i).filter(|r| r.start <= v.id).map(|r| r.server)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# grembed routes v1\n");
        for (i, addr) in self.servers.iter().enumerate() {
            out.push_str(&format!("server {i} {addr}\n"));
        }
        for (t, rs) in self.ranges.iter().enumerate() {
            for r in rs {
                out.push_str(&format!("range {t} {} {} {} {}\n", self.labels[t], r.start, r.end, r.server));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RouteError> {
        let mut table = Self::default();
        let mut servers: Vec<(usize, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |message: &str| RouteError::Parse {
                line: line_no,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                [first, ..] if first.starts_with('#') => {}
                ["server", id, addr] => servers.push((id.parse().map_err(|_| bad("bad server id"))?, addr.to_string())),
                ["range", t, label, start, end, server] => {
                    let t: usize = t.parse().map_err(|_| bad("bad type index"))?;
                    if t >= 256 {
                        return Err(bad("type index exceeds 255"));
                    }
                    if table.labels.len() <= t {
                        table.labels.resize(t + 1, String::new());
                        table.ranges.resize(t + 1, Vec::new());
                    }
                    table.labels[t] = label.to_string();
                    table.ranges[t].push(RouteRange {
                        start: start.parse().map_err(|_| bad("bad range start"))?,
                        end: end.parse().map_err(|_| bad("bad range end"))?,
                        server: server.parse().map_err(|_| bad("bad server id"))?,
                    });
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        servers.sort();
        for (expect, (id, addr)) in servers.into_iter().enumerate() {
            if id != expect {
                return Err(RouteError::Parse {
                    line: 0,
                    message: format!("server ids must be dense from 0, missing {expect}"),
                });
            }
            table.servers.push(addr);
        }
        if table.ranges.iter().flatten().any(|r| r.server >= table.servers.len()) {
            return Err(RouteError::Parse {
                line: 0,
                message: "range refers to an unknown server".into(),
            });
        }
        table.normalized()
    }

    pub fn load(path: &Path) -> Result<Self, RouteError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::plan::{plan_partitions, PlanRequest};
    use proptest::prelude::*;
    use super::Strategy;

    fn table(counts: &[u64], min_servers: usize) -> RouteTable {
        let mut req = PlanRequest::new(counts, 4, 4, 1 << 30, Strategy::RowWise);
        req.min_servers_per_type = min_servers;
        let plan = plan_partitions(&req).unwrap();
        let labels: Vec<String> = (0..counts.len()).map(|t| format!("T{t}")).collect();
        let addrs: Vec<String> = (0..plan.server_count()).map(|i| format!("127.0.0.1:{}", 9000 + i)).collect();
        RouteTable::from_plan(&plan, &labels, &addrs).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let t = table(&[10, 7], 3);
        assert_eq!(RouteTable::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_gaps_and_column_plans() {
        let text = "server 0 a:1\nrange 0 v 0 5 0\nrange 0 v 6 9 0\n";
        assert!(matches!(RouteTable::parse(text), Err(RouteError::NotTotal { at: 5, .. })));
        let plan = plan_partitions(&PlanRequest::new(&[4], 4, 4, 1 << 20, Strategy::ColumnWise)).unwrap();
        assert!(matches!(RouteTable::from_plan(&plan, &["v".into()], &["a".into()]), Err(RouteError::ColumnWise)));
        assert!(RouteTable::parse("range 0 v 0 5 3\nserver 0 a:1\n").is_err());
    }

    proptest! {
        #[test]
        fn routing_is_total(counts in prop::collection::vec(1u64..500, 1..4), min_servers in 1usize..6) {
            let t = table(&counts, min_servers);
            for (vt, &n) in counts.iter().enumerate() {
                for id in 0..n {
                    let v = VertexRef::new(vt as u8, id);
                    let s = t.route(v).unwrap();
                    let owners = t.ranges(vt as u8).iter().filter(|r| r.start <= id && id < r.end).count();
                    prop_assert_eq!(owners, 1);
                    prop_assert!(t.ranges(vt as u8).iter().any(|r| r.server == s && r.start <= id && id < r.end));
                }
                prop_assert_eq!(t.route(VertexRef::new(vt as u8, n)), None);
            }
        }
    }
}
