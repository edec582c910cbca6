//! Stochastic block model graphs for desk-scale benchmarks.

use std::io::{self, Write};

use rand::Rng;

use crate::graph::Graph;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    pub block_sizes: Vec<u64>,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmParams {
    /// Two equal blocks: 2,000 vertices, intra-block 0.05, inter-block 0.002.
    pub fn desk_benchmark(seed: u64) -> Self {
        Self {
            block_sizes: vec![1000, 1000],
            p_in: 0.05,
            p_out: 0.002,
            seed,
        }
    }

    pub fn vertex_count(&self) -> u64 {
        self.block_sizes.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Sbm {
    pub graph: Graph,
    pub block: Vec<usize>,
    pub edges: Vec<(u64, u64)>,
}

/// Sample an undirected, loop-free SBM. Vertices are numbered block by block.
pub fn stochastic_block_model(p: &SbmParams) -> Sbm {
    let n = p.vertex_count();
    let block: Vec<usize> = p
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s as usize))
        .collect();
    let block_end: Vec<u64> = p
        .block_sizes
        .iter()
        .scan(0, |acc, &s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    let mut rng = seed::child_rng(p.seed, &[0x73626d]);
    let mut edges = Vec::new();
    for u in 0..n {
        let mut v = u + 1;
        while v < n {
            let b = block[v as usize];
            let prob = if block[u as usize] == b { p.p_in } else { p.p_out };
            v = sample_run(&mut rng, u, v, block_end[b], prob, &mut edges);
        }
    }
    let graph = Graph::untyped(n, edges.iter().copied(), true);
    Sbm { graph, block, edges }
}

/// Emit `(u, w)` for each `w` in `start..end` independently with probability `prob`.
fn sample_run<R: Rng>(rng: &mut R, u: u64, start: u64, end: u64, prob: f64, edges: &mut Vec<(u64, u64)>) -> u64 {
    if prob <= 0.0 {
        return end;
    }
    if prob >= 1.0 {
        edges.extend((start..end).map(|w| (u, w)));
        return end;
    }
    let log_q = (1.0 - prob).ln();
    let mut w = start;
    loop {
        let r: f64 = rng.random();
        let skip = ((1.0 - r).ln() / log_q).floor();
        if !skip.is_finite() || skip >= (end - w) as f64 {
            return end;
        }
        w += skip as u64;
        edges.push((u, w));
        w += 1;
        if w >= end {
            return end;
        }
    }
}

pub fn write_edge_list(mut out: impl Write, edges: &[(u64, u64)]) -> io::Result<()> {
    for (u, v) in edges {
        writeln!(out, "{u} {v}")?;
    }
    out.flush()
}
