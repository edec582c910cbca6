//! Random walks and the training rows derived from them.
//!
//! Walks are generated once, up front, and turned into a flat row matrix of
//! `(input, context, negatives)` triples. Workers later receive contiguous
//! row-wise slices of that matrix.

pub mod format;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, VertexRef};
use crate::seed;

/// Start vertices per independently seeded generation chunk.
const WALK_CHUNK: u64 = 256;

#[derive(Debug, Error, PartialEq)]
pub enum WalkError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("noise space saturated for input vertex {input}: no non-edge found in {attempts} attempts")]
    SaturatedNoise { input: VertexRef, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkParams {
    pub walks_per_vertex: u32,
    pub walk_length: u32,
    pub context_window: u32,
    pub seed: u64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            walks_per_vertex: 10,
            walk_length: 5,
            context_window: 2,
            seed: 0,
        }
    }
}

impl WalkParams {
    pub fn validate(&self) -> Result<(), WalkError> {
        if self.walks_per_vertex == 0 {
            return Err(WalkError::InvalidParameters("walks_per_vertex must be positive".into()));
        }
        if self.walk_length < 2 {
            return Err(WalkError::InvalidParameters("walk_length must be at least 2".into()));
        }
        check_window(self.walk_length, self.context_window)
    }
}

fn check_window(l: u32, c: u32) -> Result<(), WalkError> {
    if c < 2 || c > l {
        return Err(WalkError::InvalidParameters(format!(
            "context_window {c} must satisfy 2 <= c <= walk_length {l}"
        )));
    }
    Ok(())
}

/// One NCE training unit. Within a localized subset the ids are worker-local indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingRow {
    pub input: VertexRef,
    pub context: VertexRef,
    pub negatives: Vec<VertexRef>,
}

impl TrainingRow {
    /// Input, context, then negatives, in the order they are stored.
    pub fn vertices(&self) -> impl Iterator<Item = VertexRef> + '_ {
        [self.input, self.context].into_iter().chain(self.negatives.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingShard {
    pub rows: Vec<TrainingRow>,
    pub shard_index: usize,
    pub worker_count: usize,
}

/// Walk of at most `length` vertices starting at `start`, stepping uniformly
/// among neighbors. Stops early at a vertex with no neighbors.
pub fn random_walk<R: Rng + ?Sized>(g: &Graph, start: VertexRef, length: usize, rng: &mut R) -> Vec<VertexRef> {
    let mut walk = Vec::with_capacity(length);
    if length == 0 || !g.contains(start) {
        return walk;
    }
    walk.push(start);
    let mut at = start;
    while walk.len() < length {
        let next = g.neighbors_of(at);
        if next.is_empty() {
            break;
        }
        at = next[rng.random_range(0..next.len())];
        walk.push(at);
    }
    walk
}

/// Pairs produced by `w` untruncated walks of length `l` with context window `c`:
/// `w * sum_{j=2..=c} (l - j + 1)`.
pub fn expected_pair_count(w: u64, l: u64, c: u64) -> Result<u64, WalkError> {
    if c < 2 || c > l {
        return Err(WalkError::InvalidParameters(format!(
            "context_window {c} must satisfy 2 <= c <= walk_length {l}"
        )));
    }
    Ok(w * (2..=c).map(|j| l - j + 1).sum::<u64>())
}

/// Emit `(walk[i], walk[i + d])` for every `1 <= d < c`. Each window pair appears once,
/// oriented from the earlier to the later walk position.
pub fn window_pairs(walk: &[VertexRef], context_window: usize, out: &mut Vec<(VertexRef, VertexRef)>) {
    for (i, &a) in walk.iter().enumerate() {
        for &b in walk.iter().skip(i + 1).take(context_window.saturating_sub(1)) {
            out.push((a, b));
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<(VertexRef, VertexRef)>,
    pub walks: u64,
    /// Walks that hit a dead end before reaching `walk_length`.
    pub truncated_walks: u64,
}

/// Run `walks_per_vertex` walks from every vertex of every type and collect window pairs.
///
/// Start vertices are processed in fixed-size chunks, each with a seed derived from
/// `(seed, type, chunk)`, so the output does not depend on the thread count.
pub fn generate_pairs(g: &Graph, params: &WalkParams) -> Result<PairSet, WalkError> {
    params.validate()?;
    let chunks: Vec<(u8, u64)> = (0..g.type_count() as u8)
        .flat_map(|t| (0..g.vertex_count(t).div_ceil(WALK_CHUNK)).map(move |c| (t, c)))
        .collect();
    let parts: Vec<PairSet> = chunks
        .par_iter()
        .map(|&(t, chunk)| {
            let mut rng = seed::child_rng(params.seed, &[t as u64, chunk]);
            let mut part = PairSet::default();
            let mut walk;
            let end = ((chunk + 1) * WALK_CHUNK).min(g.vertex_count(t));
            for id in chunk * WALK_CHUNK..end {
                for _ in 0..params.walks_per_vertex {
                    walk = random_walk(g, VertexRef::new(t, id), params.walk_length as usize, &mut rng);
                    part.walks += 1;
                    if walk.len() < params.walk_length as usize {
                        part.truncated_walks += 1;
                    }
                    window_pairs(&walk, params.context_window as usize, &mut part.pairs);
                }
            }
            part
        })
        .collect();

    let mut out = PairSet {
        pairs: Vec::with_capacity(parts.iter().map(|p| p.pairs.len()).sum()),
        ..PairSet::default()
    };
    for part in parts {
        out.pairs.extend(part.pairs);
        out.walks += part.walks;
        out.truncated_walks += part.truncated_walks;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum NoiseDistribution {
    /// Uniform over all vertices of the context's type.
    Uniform,
    /// Proportional to `count^power`, counts taken from vertex occurrences in the pairs.
    Unigram { power: f64 },
}

impl Default for NoiseDistribution {
    fn default() -> Self {
        NoiseDistribution::Uniform
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub negatives: usize,
    pub max_attempts: usize,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            negatives: 5,
            max_attempts: 100,
            distribution: NoiseDistribution::Uniform,
        }
    }
}

enum TypeSampler {
    Uniform(u64),
    Weighted(WeightedAliasIndex<f64>),
}

impl TypeSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            TypeSampler::Uniform(n) => rng.random_range(0..*n),
            TypeSampler::Weighted(w) => w.sample(rng) as u64,
        }
    }
}

fn build_samplers(g: &Graph, pairs: &[(VertexRef, VertexRef)], dist: NoiseDistribution) -> Vec<TypeSampler> {
    match dist {
        NoiseDistribution::Uniform => (0..g.type_count() as u8)
            .map(|t| TypeSampler::Uniform(g.vertex_count(t)))
            .collect(),
        NoiseDistribution::Unigram { power } => {
            let mut counts: Vec<Vec<f64>> = g.vertex_counts().iter().map(|&n| vec![0.0; n as usize]).collect();
            for (a, b) in pairs {
                counts[a.vtype as usize][a.id as usize] += 1.0;
                counts[b.vtype as usize][b.id as usize] += 1.0;
            }
            counts
                .into_iter()
                .map(|c| {
                    let n = c.len() as u64;
                    let weights: Vec<f64> = c.into_iter().map(|x| x.powf(power)).collect();
                    match WeightedAliasIndex::new(weights) {
                        Ok(w) => TypeSampler::Weighted(w),
                        Err(_) => TypeSampler::Uniform(n),
                    }
                })
                .collect()
        }
    }
}

/// Attach `negatives` noise vertices to every pair.
///
/// Noise is drawn from the context's vertex type and rejection-sampled until it is
/// neither the input nor a neighbor of the input. For context windows wider than 2
/// this only rules out direct edges, not every vertex inside the window.
pub fn attach_negatives<R: Rng + ?Sized>(
    g: &Graph,
    pairs: &[(VertexRef, VertexRef)],
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<Vec<TrainingRow>, WalkError> {
    let samplers = build_samplers(g, pairs, noise.distribution);
    let mut rows = Vec::with_capacity(pairs.len());
    for &(input, context) in pairs {
        let mut negatives = Vec::with_capacity(noise.negatives);
        let sampler = &samplers[context.vtype as usize];
        for _ in 0..noise.negatives {
            let mut found = None;
            for _ in 0..noise.max_attempts {
                let cand = VertexRef::new(context.vtype, sampler.sample(rng));
                if cand != input && !g.adjacent(input, cand) {
                    found = Some(cand);
                    break;
                }
            }
            negatives.push(found.ok_or(WalkError::SaturatedNoise {
                input,
                attempts: noise.max_attempts,
            })?);
        }
        rows.push(TrainingRow {
            input,
            context,
            negatives,
        });
    }
    Ok(rows)
}

/// Split rows into `n_workers` contiguous shards whose sizes differ by at most one.
/// The first `len % n_workers` shards take the extra row.
pub fn shard_rows(rows: Vec<TrainingRow>, n_workers: usize) -> Result<Vec<TrainingShard>, WalkError> {
    if n_workers == 0 {
        return Err(WalkError::InvalidParameters("worker count must be positive".into()));
    }
    let base = rows.len() / n_workers;
    let extra = rows.len() % n_workers;
    let mut rest = rows.into_iter();
    Ok((0..n_workers)
        .map(|i| TrainingShard {
            rows: rest.by_ref().take(base + usize::from(i < extra)).collect(),
            shard_index: i,
            worker_count: n_workers,
        })
        .collect())
}

/// Deterministic permutation of the row matrix.
pub fn shuffle_rows(rows: &mut [TrainingRow], seed: u64) {
    rows.shuffle(&mut seed::rng(seed));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(id: u64) -> VertexRef {
        VertexRef::untyped(id)
    }

    fn triangle() -> Graph {
        Graph::untyped(3, [(0, 1), (1, 2), (2, 0)], true)
    }

    fn ring(n: u64) -> Graph {
        Graph::untyped(n, (0..n).map(|i| (i, (i + 1) % n)), true)
    }

    /// Slide a window over positions `0..l` and count index pairs at distance below `c`.
    fn brute_force_pairs(w: u64, l: u64, c: u64) -> u64 {
        let mut count = 0;
        for i in 0..l {
            for j in i + 1..l {
                if j - i < c {
                    count += 1;
                }
            }
        }
        w * count
    }

    #[test]
    fn isolated_start_truncates_immediately() {
        let g = Graph::untyped(3, [(0, 1)], true);
        let walk = random_walk(&g, v(2), 5, &mut seed::rng(0));
        assert_eq!(walk, vec![v(2)]);
    }

    #[test]
    fn path_graph_single_choice() {
        let g = Graph::untyped(2, [(0, 1)], true);
        assert_eq!(random_walk(&g, v(0), 2, &mut seed::rng(3)), vec![v(0), v(1)]);
    }

    #[test]
    fn walks_follow_edges() {
        let g = ring(9);
        let mut rng = seed::rng(1);
        for s in 0..9 {
            let walk = random_walk(&g, v(s), 12, &mut rng);
            assert_eq!(walk[0], v(s));
            assert_eq!(walk.len(), 12);
            assert!(walk.windows(2).all(|p| g.has_edge(p[0], p[1]).unwrap()));
        }
    }

    #[test]
    fn star_leaves_are_uniform() {
        let g = Graph::untyped(5, (1..5).map(|leaf| (0, leaf)), true);
        let mut rng = seed::rng(11);
        let mut hits = [0u64; 5];
        let n = 100_000;
        for _ in 0..n {
            let walk = random_walk(&g, v(0), 2, &mut rng);
            hits[walk[1].id as usize] += 1;
        }
        assert_eq!(hits[0], 0);
        let expected = n as f64 / 4.0;
        let chi2: f64 = hits[1..].iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, p = 0.001.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for &h in &hits[1..] {
            assert!((h as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn expected_pair_count_examples() {
        assert_eq!(expected_pair_count(1, 2, 2).unwrap(), 1);
        assert_eq!(expected_pair_count(80, 2, 2).unwrap(), 80);
        assert_eq!(expected_pair_count(2, 5, 3).unwrap(), brute_force_pairs(2, 5, 3));
        assert_eq!(expected_pair_count(2, 5, 3).unwrap(), 14);
        assert!(expected_pair_count(1, 3, 4).is_err());
        assert!(expected_pair_count(1, 3, 1).is_err());
    }

    #[test]
    fn triangle_pairs_are_edges() {
        let params = WalkParams {
            walks_per_vertex: 1,
            walk_length: 2,
            context_window: 2,
            seed: 5,
        };
        let g = triangle();
        let set = generate_pairs(&g, &params).unwrap();
        assert_eq!(set.pairs.len(), 3);
        assert!(set.pairs.iter().all(|&(a, b)| g.has_edge(a, b).unwrap()));
    }

    #[test]
    fn isolated_vertices_make_no_pairs() {
        let g = Graph::untyped(4, std::iter::empty(), true);
        let set = generate_pairs(&g, &WalkParams::default()).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.truncated_walks, set.walks);
    }

    #[test]
    fn generation_is_deterministic() {
        let g = ring(700);
        let p = WalkParams {
            seed: 99,
            ..WalkParams::default()
        };
        assert_eq!(generate_pairs(&g, &p).unwrap(), generate_pairs(&g, &p).unwrap());
        let other = WalkParams { seed: 100, ..p };
        assert_ne!(generate_pairs(&g, &p).unwrap().pairs, generate_pairs(&g, &other).unwrap().pairs);
    }

    #[test]
    fn invalid_params_rejected() {
        let g = triangle();
        for (w, l, c) in [(0, 5, 2), (1, 1, 2), (1, 5, 6), (1, 5, 1)] {
            let p = WalkParams {
                walks_per_vertex: w,
                walk_length: l,
                context_window: c,
                seed: 0,
            };
            assert!(matches!(generate_pairs(&g, &p), Err(WalkError::InvalidParameters(_))));
        }
    }

    #[test]
    fn zero_negatives() {
        let g = triangle();
        let rows = attach_negatives(&g, &[(v(0), v(1))], &NoiseConfig { negatives: 0, ..Default::default() }, &mut seed::rng(0)).unwrap();
        assert!(rows[0].negatives.is_empty());
    }

    #[test]
    fn complete_graph_saturates() {
        let edges: Vec<(u64, u64)> = (0..4).flat_map(|a| (a + 1..4).map(move |b| (a, b))).collect();
        let g = Graph::untyped(4, edges, true);
        let noise = NoiseConfig {
            negatives: 1,
            ..Default::default()
        };
        let err = attach_negatives(&g, &[(v(2), v(3))], &noise, &mut seed::rng(0)).unwrap_err();
        assert_eq!(
            err,
            WalkError::SaturatedNoise {
                input: v(2),
                attempts: 100
            }
        );
    }

    #[test]
    fn negatives_match_context_type() {
        let types = vec![
            crate::graph::VertexType { label: "A".into(), index: 0 },
            crate::graph::VertexType { label: "B".into(), index: 1 },
        ];
        let edges: Vec<_> = (0..30u64)
            .map(|i| (VertexRef::new(0, i % 10), VertexRef::new(1, (i * 7) % 20)))
            .collect();
        let g = Graph::from_edges(types, &[10, 20], edges, true).unwrap();
        let set = generate_pairs(&g, &WalkParams { seed: 3, ..Default::default() }).unwrap();
        for dist in [NoiseDistribution::Uniform, NoiseDistribution::Unigram { power: 0.75 }] {
            let noise = NoiseConfig {
                negatives: 3,
                max_attempts: 100,
                distribution: dist,
            };
            let rows = attach_negatives(&g, &set.pairs, &noise, &mut seed::rng(4)).unwrap();
            for row in &rows {
                for n in &row.negatives {
                    assert_eq!(n.vtype, row.context.vtype);
                    assert!(!g.has_edge(row.input, *n).unwrap());
                    assert_ne!(*n, row.input);
                }
            }
        }
    }

    #[test]
    fn shard_sizes() {
        let rows: Vec<TrainingRow> = (0..10)
            .map(|i| TrainingRow {
                input: v(i),
                context: v(i + 1),
                negatives: vec![],
            })
            .collect();
        let one = shard_rows(rows.clone(), 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rows.len(), 10);
        let three = shard_rows(rows.clone(), 3).unwrap();
        assert_eq!(three.iter().map(|s| s.rows.len()).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(matches!(shard_rows(rows, 0), Err(WalkError::InvalidParameters(_))));
    }

    proptest! {
        #[test]
        fn sharding_round_trips(n_rows in 0usize..200, n in 1usize..17) {
            let rows: Vec<TrainingRow> = (0..n_rows as u64)
                .map(|i| TrainingRow { input: v(i), context: v(i * 3), negatives: vec![v(i + 1)] })
                .collect();
            let shards = shard_rows(rows.clone(), n).unwrap();
            let sizes: Vec<usize> = shards.iter().map(|s| s.rows.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(shards.iter().enumerate().all(|(i, s)| s.shard_index == i && s.worker_count == n));
            let joined: Vec<TrainingRow> = shards.into_iter().flat_map(|s| s.rows).collect();
            prop_assert_eq!(joined, rows);
        }

        #[test]
        fn pair_count_identity(w in 1u32..4, l in 2u32..21, c_off in 0u32..20, n in 3u64..40, seed in any::<u64>()) {
            let c = 2 + c_off % (l - 1);
            let g = ring(n);
            let p = WalkParams { walks_per_vertex: w, walk_length: l, context_window: c, seed };
            let set = generate_pairs(&g, &p).unwrap();
            let per_vertex = expected_pair_count(w as u64, l as u64, c as u64).unwrap();
            prop_assert_eq!(per_vertex, brute_force_pairs(w as u64, l as u64, c as u64));
            prop_assert_eq!(set.pairs.len() as u64, n * per_vertex);
            prop_assert_eq!(set.truncated_walks, 0);
        }
    }
}
