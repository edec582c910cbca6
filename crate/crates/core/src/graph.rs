//! Typed sparse graphs in compressed sparse row form.
//!
//! Every vertex type owns a dense id space `0..count`, and the id of a vertex is
//! its row in that type's offset array. Neighbor slices are sorted by
//! `(vtype, id)` and duplicate-free, so `has_edge` is a binary search.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label given to the single vertex type of an untyped edge list.
pub const DEFAULT_TYPE_LABEL: &str = "v";

/// Upper bound on vertex types; type indices travel as one byte on the wire.
pub const MAX_TYPES: usize = 256;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown vertex type label `{label}`")]
    UnknownType { line: usize, label: String },
    #[error("line {line}: vertex id `{raw}` does not fit in 64 bits")]
    IdOverflow { line: usize, raw: String },
    #[error("more than {MAX_TYPES} vertex types")]
    TooManyTypes,
    #[error("vertex {0} is out of range")]
    OutOfRange(VertexRef),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexType {
    pub label: String,
    pub index: u8,
}

/// A vertex identified by its type and its row within that type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexRef {
    pub vtype: u8,
    pub id: u64,
}

impl VertexRef {
    pub const fn new(vtype: u8, id: u64) -> Self {
        Self { vtype, id }
    }

    /// Shorthand for a vertex of type 0.
    pub const fn untyped(id: u64) -> Self {
        Self { vtype: 0, id }
    }
}

impl fmt::Display for VertexRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.vtype, self.id)
    }
}

/// Whether edge-list lines carry `type:id` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    #[default]
    Untyped,
    Typed,
}

impl std::str::FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "untyped" => Ok(Schema::Untyped),
            "typed" => Ok(Schema::Typed),
            other => Err(format!("unknown schema `{other}` (expected typed|untyped)")),
        }
    }
}

/// Immutable CSR adjacency, one offset array per vertex type.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    types: Vec<VertexType>,
    offsets: Vec<Vec<usize>>,
    neighbors: Vec<Vec<VertexRef>>,
    undirected: bool,
    edge_count: usize,
}

impl Graph {
    /// Build from an arc list. With `undirected` every `(u, v)` also inserts `(v, u)`.
    /// Duplicates collapse; self-loops are kept.
    pub fn from_edges(
        types: Vec<VertexType>,
        counts: &[u64],
        edges: impl IntoIterator<Item = (VertexRef, VertexRef)>,
        undirected: bool,
    ) -> Result<Self, GraphError> {
        assert_eq!(types.len(), counts.len(), "one count per vertex type");
        let in_range = |v: &VertexRef| (v.vtype as usize) < counts.len() && v.id < counts[v.vtype as usize];

        let mut arcs: Vec<(VertexRef, VertexRef)> = Vec::new();
        for (u, v) in edges {
            for x in [u, v] {
                if !in_range(&x) {
                    return Err(GraphError::OutOfRange(x));
                }
            }
            arcs.push((u, v));
            if undirected && u != v {
                arcs.push((v, u));
            }
        }
        arcs.sort_unstable();
        arcs.dedup();

        let mut offsets: Vec<Vec<usize>> = counts.iter().map(|&c| vec![0usize; c as usize + 1]).collect();
        let mut neighbors: Vec<Vec<VertexRef>> = vec![Vec::new(); counts.len()];
        for &(u, v) in &arcs {
            offsets[u.vtype as usize][u.id as usize + 1] += 1;
            neighbors[u.vtype as usize].push(v);
        }
        for off in &mut offsets {
            for i in 1..off.len() {
                off[i] += off[i - 1];
            }
        }

        let edge_count = if undirected {
            arcs.iter().filter(|(u, v)| u <= v).count()
        } else {
            arcs.len()
        };

        Ok(Self {
            types,
            offsets,
            neighbors,
            undirected,
            edge_count,
        })
    }

    /// A single-type graph over ids `0..count`.
    pub fn untyped(count: u64, edges: impl IntoIterator<Item = (u64, u64)>, undirected: bool) -> Self {
        let types = vec![VertexType {
            label: DEFAULT_TYPE_LABEL.to_string(),
            index: 0,
        }];
        let edges = edges
            .into_iter()
            .map(|(u, v)| (VertexRef::untyped(u), VertexRef::untyped(v)));
        Self::from_edges(types, &[count], edges, undirected).expect("edge endpoints within 0..count")
    }

    pub fn types(&self) -> &[VertexType] {
        &self.types
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    pub fn type_index(&self, label: &str) -> Option<u8> {
        self.types.iter().find(|t| t.label == label).map(|t| t.index)
    }

    pub fn vertex_count(&self, vtype: u8) -> u64 {
        self.offsets
            .get(vtype as usize)
            .map_or(0, |o| (o.len() - 1) as u64)
    }

    pub fn vertex_counts(&self) -> Vec<u64> {
        (0..self.types.len()).map(|t| self.vertex_count(t as u8)).collect()
    }

    pub fn total_vertices(&self) -> u64 {
        self.vertex_counts().iter().sum()
    }

    /// Undirected: number of unordered edges (a self-loop counts once). Directed: number of arcs.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Length of the concatenated neighbor arrays.
    pub fn arc_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn contains(&self, v: VertexRef) -> bool {
        v.id < self.vertex_count(v.vtype)
    }

    fn slice(&self, v: VertexRef) -> &[VertexRef] {
        let off = &self.offsets[v.vtype as usize];
        let i = v.id as usize;
        &self.neighbors[v.vtype as usize][off[i]..off[i + 1]]
    }

    fn check(&self, v: VertexRef) -> Result<(), GraphError> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(GraphError::OutOfRange(v))
        }
    }

    pub fn neighbors(&self, v: VertexRef) -> Result<&[VertexRef], GraphError> {
        self.check(v)?;
        Ok(self.slice(v))
    }

    pub fn has_edge(&self, u: VertexRef, v: VertexRef) -> Result<bool, GraphError> {
        self.check(u)?;
        self.check(v)?;
        Ok(self.slice(u).binary_search(&v).is_ok())
    }

    pub fn degree(&self, v: VertexRef) -> Result<usize, GraphError> {
        self.check(v)?;
        let off = &self.offsets[v.vtype as usize];
        Ok(off[v.id as usize + 1] - off[v.id as usize])
    }

    /// Unchecked neighbor lookup for hot loops over vertices already known to be valid.
    pub(crate) fn neighbors_of(&self, v: VertexRef) -> &[VertexRef] {
        self.slice(v)
    }

    /// Unchecked edge test, same contract as [`Graph::neighbors_of`].
    pub(crate) fn adjacent(&self, u: VertexRef, v: VertexRef) -> bool {
        self.slice(u).binary_search(&v).is_ok()
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexRef> + '_ {
        (0..self.types.len()).flat_map(move |t| (0..self.vertex_count(t as u8)).map(move |id| VertexRef::new(t as u8, id)))
    }

    /// Every edge once: for undirected graphs only the `u <= v` orientation.
    pub fn edges(&self) -> impl Iterator<Item = (VertexRef, VertexRef)> + '_ {
        self.vertices().flat_map(move |u| {
            self.slice(u)
                .iter()
                .filter(move |&&v| !self.undirected || u <= v)
                .map(move |&v| (u, v))
        })
    }
}

/// Raw-id ↔ dense-id dictionary built while loading, one per vertex type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    labels: Vec<String>,
    raw: Vec<Vec<u64>>,
    dense: Vec<HashMap<u64, u64>>,
}

impl IdMap {
    fn type_index(&mut self, label: &str) -> Result<u8, GraphError> {
        if let Some(i) = self.labels.iter().position(|l| l == label) {
            return Ok(i as u8);
        }
        if self.labels.len() == MAX_TYPES {
            return Err(GraphError::TooManyTypes);
        }
        self.labels.push(label.to_string());
        self.raw.push(Vec::new());
        self.dense.push(HashMap::new());
        Ok((self.labels.len() - 1) as u8)
    }

    fn intern(&mut self, vtype: u8, raw: u64) -> VertexRef {
        let t = vtype as usize;
        let next = self.raw[t].len() as u64;
        let id = *self.dense[t].entry(raw).or_insert(next);
        if id == next {
            self.raw[t].push(raw);
        }
        VertexRef::new(vtype, id)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dense_id(&self, vtype: u8, raw: u64) -> Option<u64> {
        self.dense.get(vtype as usize)?.get(&raw).copied()
    }

    pub fn raw_id(&self, v: VertexRef) -> Option<u64> {
        self.raw.get(v.vtype as usize)?.get(v.id as usize).copied()
    }

    /// Write `<type> <raw_id> <dense_id>` lines.
    pub fn write_sidecar(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (label, raws) in self.labels.iter().zip(&self.raw) {
            for (dense, raw) in raws.iter().enumerate() {
                writeln!(out, "{label} {raw} {dense}")?;
            }
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub schema: Schema,
    pub undirected: bool,
    /// When set, typed labels outside this list are rejected. The listed order fixes type indices.
    pub known_types: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub graph: Graph,
    pub ids: IdMap,
}

pub fn load_edge_list(path: &Path, opts: &LoadOptions) -> Result<Loaded, GraphError> {
    parse_edge_list(BufReader::new(File::open(path)?), opts)
}

/// Parse edge-list text. Untyped lines are `<src> <dst>`; typed lines are
/// `<type>:<raw> <type>:<raw>`. Blank lines and lines starting with `#` are skipped.
pub fn parse_edge_list(reader: impl BufRead, opts: &LoadOptions) -> Result<Loaded, GraphError> {
    let mut ids = IdMap::default();
    match (&opts.known_types, opts.schema) {
        (Some(known), _) => {
            for label in known {
                ids.type_index(label)?;
            }
        }
        (None, Schema::Untyped) => {
            ids.type_index(DEFAULT_TYPE_LABEL)?;
        }
        (None, Schema::Typed) => {}
    }

    let mut edges = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let (Some(a), Some(b), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(GraphError::Parse {
                line: line_no,
                message: format!("expected two endpoints, got `{trimmed}`"),
            });
        };
        let u = parse_endpoint(a, line_no, opts, &mut ids)?;
        let v = parse_endpoint(b, line_no, opts, &mut ids)?;
        edges.push((u, v));
    }

    let types = ids
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| VertexType {
            label: l.clone(),
            index: i as u8,
        })
        .collect();
    let counts: Vec<u64> = ids.raw.iter().map(|r| r.len() as u64).collect();
    let graph = Graph::from_edges(types, &counts, edges, opts.undirected)?;
    Ok(Loaded { graph, ids })
}

fn parse_endpoint(token: &str, line: usize, opts: &LoadOptions, ids: &mut IdMap) -> Result<VertexRef, GraphError> {
    let (vtype, raw) = match opts.schema {
        Schema::Untyped => (0u8, token),
        Schema::Typed => {
            let Some((label, raw)) = token.split_once(':') else {
                return Err(GraphError::Parse {
                    line,
                    message: format!("expected `type:id`, got `{token}`"),
                });
            };
            let vtype = if opts.known_types.is_some() {
                ids.labels
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| GraphError::UnknownType {
                        line,
                        label: label.to_string(),
                    })? as u8
            } else {
                ids.type_index(label)?
            };
            (vtype, raw)
        }
    };
    let raw_id = parse_raw_id(raw, line)?;
    Ok(ids.intern(vtype, raw_id))
}

fn parse_raw_id(raw: &str, line: usize) -> Result<u64, GraphError> {
    if !raw.is_empty() && raw.bytes().all(|b| b.is_ascii_digit()) {
        raw.parse().map_err(|_| GraphError::IdOverflow {
            line,
            raw: raw.to_string(),
        })
    } else {
        Err(GraphError::Parse {
            line,
            message: format!("vertex id `{raw}` is not a non-negative integer"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn parse(text: &str, schema: Schema, undirected: bool) -> Result<Loaded, GraphError> {
        let opts = LoadOptions {
            schema,
            undirected,
            known_types: None,
        };
        parse_edge_list(text.as_bytes(), &opts)
    }

    fn triangle() -> Graph {
        parse("0 1\n1 2\n2 0\n", Schema::Untyped, true).unwrap().graph
    }

    fn v(id: u64) -> VertexRef {
        VertexRef::untyped(id)
    }

    #[test]
    fn triangle_slices() {
        let g = triangle();
        assert_eq!(g.total_vertices(), 3);
        assert_eq!(g.edge_count(), 3);
        for i in 0..3 {
            assert_eq!(g.neighbors(v(i)).unwrap().len(), 2);
            assert_eq!(g.degree(v(i)).unwrap(), 2);
        }
        assert_eq!(g.neighbors(v(0)).unwrap(), &[v(1), v(2)]);
        assert!(g.has_edge(v(0), v(1)).unwrap());
        assert!(!g.has_edge(v(0), v(0)).unwrap());
    }

    #[test]
    fn empty_file() {
        let g = parse("", Schema::Untyped, true).unwrap().graph;
        assert_eq!(g.total_vertices(), 0);
        assert_eq!(g.edge_count(), 0);
        let g = parse("# only a comment\n\n", Schema::Typed, false).unwrap().graph;
        assert_eq!(g.type_count(), 0);
    }

    #[test]
    fn isolated_vertex_has_empty_slice() {
        let g = Graph::untyped(4, [(0, 1), (1, 2)], true);
        assert!(g.neighbors(v(3)).unwrap().is_empty());
        assert_eq!(g.degree(v(3)).unwrap(), 0);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let g = triangle();
        assert!(matches!(g.neighbors(v(3)), Err(GraphError::OutOfRange(_))));
        assert!(matches!(g.has_edge(v(0), v(9)), Err(GraphError::OutOfRange(_))));
        assert!(matches!(g.degree(VertexRef::new(1, 0)), Err(GraphError::OutOfRange(_))));
    }

    #[test]
    fn duplicates_collapse_and_self_loops_stay() {
        let g = parse("0 1\n1 0\n0 1\n2 2\n", Schema::Untyped, true).unwrap().graph;
        assert_eq!(g.neighbors(v(0)).unwrap(), &[v(1)]);
        assert!(g.has_edge(v(2), v(2)).unwrap());
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn raw_ids_become_dense_in_first_occurrence_order() {
        let loaded = parse("100 7\n7 5000\n", Schema::Untyped, true).unwrap();
        assert_eq!(loaded.ids.dense_id(0, 100), Some(0));
        assert_eq!(loaded.ids.dense_id(0, 7), Some(1));
        assert_eq!(loaded.ids.dense_id(0, 5000), Some(2));
        assert_eq!(loaded.ids.raw_id(v(2)), Some(5000));
        assert!(loaded.graph.has_edge(v(1), v(2)).unwrap());
    }

    #[test]
    fn sidecar_lines() {
        let loaded = parse("A:9 B:3\nA:4 B:3\n", Schema::Typed, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ids.txt");
        loaded.ids.write_sidecar(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "A 9 0\nA 4 1\nB 3 0\n");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("0 1\n0 1 2\n", Schema::Untyped, true).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }), "{err}");
        let err = parse("0 x\n", Schema::Untyped, true).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 1, .. }));
        let err = parse("# c\n0 99999999999999999999999\n", Schema::Untyped, true).unwrap_err();
        assert!(matches!(err, GraphError::IdOverflow { line: 2, .. }));
        let err = parse("A:1 2\n", Schema::Typed, true).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_type_label() {
        let opts = LoadOptions {
            schema: Schema::Typed,
            undirected: true,
            known_types: Some(vec!["A".into(), "B".into()]),
        };
        let err = parse_edge_list("A:1 B:2\nA:1 C:3\n".as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, GraphError::UnknownType { line: 2, ref label } if label == "C"));
    }

    #[test]
    fn bipartite_typed_matches_naive_map() {
        let mut text = String::new();
        let mut naive: BTreeMap<(String, u64), BTreeSet<(String, u64)>> = BTreeMap::new();
        let mut state = 12345u64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = (state >> 33) % 40;
            let b = (state >> 13) % 25;
            text.push_str(&format!("A:{a} B:{b}\n"));
            naive.entry(("A".into(), a)).or_default().insert(("B".into(), b));
            naive.entry(("B".into(), b)).or_default().insert(("A".into(), a));
        }
        let loaded = parse(&text, Schema::Typed, true).unwrap();
        let g = &loaded.graph;
        let a = g.type_index("A").unwrap();
        let b = g.type_index("B").unwrap();
        for id in 0..g.vertex_count(a) {
            let u = VertexRef::new(a, id);
            assert!(g.neighbors(u).unwrap().iter().all(|n| n.vtype == b));
        }
        for u in g.vertices() {
            let label = &g.types()[u.vtype as usize].label;
            let raw = loaded.ids.raw_id(u).unwrap();
            let got: BTreeSet<(String, u64)> = g
                .neighbors(u)
                .unwrap()
                .iter()
                .map(|n| (g.types()[n.vtype as usize].label.clone(), loaded.ids.raw_id(*n).unwrap()))
                .collect();
            assert_eq!(&got, &naive[&(label.clone(), raw)]);
        }
    }

    #[test]
    fn handshake_identity() {
        let edges: Vec<(u64, u64)> = (0..60u64).map(|i| (i % 17, (i * 7 + 3) % 17)).filter(|(a, b)| a != b).collect();
        let g = Graph::untyped(17, edges, true);
        let degree_sum: usize = g.vertices().map(|u| g.degree(u).unwrap()).sum();
        assert_eq!(degree_sum, 2 * g.edge_count());
        assert_eq!(degree_sum, g.arc_count());
    }

    fn arb_edges(n: u64, max: usize) -> impl Strategy<Value = Vec<(u64, u64)>> {
        prop::collection::vec((0..n, 0..n), 0..max)
    }

    proptest! {
        #[test]
        fn csr_matches_brute_force_scan(edges in arb_edges(50, 300), undirected in any::<bool>()) {
            let g = Graph::untyped(50, edges.clone(), undirected);
            let scan = |a: u64, b: u64| edges.iter().any(|&(x, y)| (x == a && y == b) || (undirected && x == b && y == a));
            for a in 0..50 {
                let mut expect: Vec<VertexRef> = (0..50).filter(|&b| scan(a, b)).map(v).collect();
                expect.dedup();
                prop_assert_eq!(g.neighbors(v(a)).unwrap(), expect.as_slice());
                for b in 0..50 {
                    prop_assert_eq!(g.has_edge(v(a), v(b)).unwrap(), scan(a, b));
                    if undirected {
                        prop_assert_eq!(g.has_edge(v(a), v(b)).unwrap(), g.has_edge(v(b), v(a)).unwrap());
                    }
                }
            }
            let degree_sum: usize = g.vertices().map(|u| g.degree(u).unwrap()).sum();
            prop_assert_eq!(degree_sum, g.arc_count());
        }

        #[test]
        fn loader_matches_adjacency_map(edges in arb_edges(1000, 2000)) {
            let text: String = edges.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
            let loaded = parse(&text, Schema::Untyped, true).unwrap();
            let mut naive: HashMap<u64, BTreeSet<u64>> = HashMap::new();
            for &(a, b) in &edges {
                naive.entry(a).or_default().insert(b);
                naive.entry(b).or_default().insert(a);
            }
            let g = &loaded.graph;
            prop_assert_eq!(g.total_vertices() as usize, naive.len());
            for u in g.vertices() {
                let slice = g.neighbors(u).unwrap();
                prop_assert!(slice.windows(2).all(|w| w[0] < w[1]));
                let raw: BTreeSet<u64> = slice.iter().map(|n| loaded.ids.raw_id(*n).unwrap()).collect();
                prop_assert_eq!(&raw, &naive[&loaded.ids.raw_id(u).unwrap()]);
            }
        }
    }
}
