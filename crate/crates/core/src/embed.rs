//! Embedding tables, pairwise scoring and the sigmoid NCE objective.
//!
//! There is exactly one table per vertex type. The same row serves as the
//! vertex's vector whether it appears as input, context or noise, so there is
//! no separate output matrix.
//!
//! For an input `x`, context `y` and negatives `n_1..n_k` the loss is
//!
//! ```text
//! L = -log σ(s(x, y)) - Σ_i log σ(-s(x, n_i))
//! ```
//!
//! where `s` is the dot product or cosine similarity.

use std::collections::HashMap;
use std::fmt::Debug;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Scalar type used by the servers, the wire protocol and worker-side training.
pub type Value = f32;

/// Arguments to σ are clamped to this magnitude before taking logs.
pub const SIGMOID_CLAMP: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    DegenerateVector,
    #[error("{skipped} row update(s) skipped because the gradient was not finite")]
    PoisonedUpdate { skipped: usize },
    #[error("row {row} out of range for a table of {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
}

/// Floating point element of a table: `f32` (dtype 4) or `f64` (dtype 8).
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: u8;

    fn of(x: f64) -> Self;

    fn write_le(self, out: &mut impl Write) -> io::Result<()>;

    fn read_le(input: &mut impl Read) -> io::Result<Self>;
}

impl Real for f32 {
    const DTYPE: u8 = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le(input: &mut impl Read) -> io::Result<Self> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le(input: &mut impl Read) -> io::Result<Self> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Dense row-major `rows x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T = Value> {
    rows: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![T::zero(); rows * dim],
        }
    }

    pub fn from_values(rows: usize, dim: usize, values: Vec<T>) -> Result<Self, EmbedError> {
        if values.len() != rows * dim {
            return Err(EmbedError::DimMismatch {
                expected: rows * dim,
                found: values.len(),
            });
        }
        Ok(Self { rows, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<(), EmbedError> {
        if row.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn byte_size(&self) -> usize {
        self.values.len() * std::mem::size_of::<T>()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Values for row `row` of a table seeded with `seed`. Each row has its own
/// derived stream, so any row range can be materialized independently.
pub fn init_row<T: Real>(row: u64, dim: usize, seed: u64, out: &mut [T]) {
    let half = 0.5 / dim as f64;
    let bound = T::of(half);
    let mut rng = seed::child_rng(seed, &[row]);
    for v in out.iter_mut().take(dim) {
        let x = T::of(rng.random_range(-half..=half));
        *v = x.max(-bound).min(bound);
    }
}

/// Rows `range` of the table that [`init_embeddings`] would produce for the same seed.
pub fn init_rows<T: Real>(range: Range<u64>, dim: usize, seed: u64) -> EmbeddingTable<T> {
    let rows = (range.end - range.start) as usize;
    let mut table = EmbeddingTable::zeros(rows, dim);
    for (i, row) in range.enumerate() {
        init_row(row, dim, seed, table.row_mut(i));
    }
    table
}

/// i.i.d. uniform values on `[-0.5/D, 0.5/D]`.
pub fn init_embeddings<T: Real>(count: u64, dim: usize, seed: u64) -> EmbeddingTable<T> {
    init_rows(0..count, dim, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(Metric::Dot),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric `{other}` (expected dot|cosine)")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        })
    }
}

fn check_dims<T>(expected: usize, v: &[T]) -> Result<(), EmbedError> {
    if v.len() != expected {
        return Err(EmbedError::DimMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

fn norm<T: Real>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

pub fn score<T: Real>(u: &[T], v: &[T], metric: Metric) -> Result<T, EmbedError> {
    check_dims(u.len(), v)?;
    match metric {
        Metric::Dot => Ok(dot(u, v)),
        Metric::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == T::zero() || nv == T::zero() {
                return Err(EmbedError::DegenerateVector);
            }
            Ok(dot(u, v) / (nu * nv))
        }
    }
}

pub fn sigmoid<T: Real>(s: T) -> T {
    T::one() / (T::one() + (-s).exp())
}

/// `log σ(s)` with `s` clamped to `±SIGMOID_CLAMP`.
pub fn log_sigmoid<T: Real>(s: T) -> T {
    let c = T::of(SIGMOID_CLAMP);
    let s = s.max(-c).min(c);
    if s >= T::zero() {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

pub fn nce_loss<T: Real>(x: &[T], y: &[T], negs: &[&[T]], metric: Metric) -> Result<T, EmbedError> {
    let mut loss = -log_sigmoid(score(x, y, metric)?);
    for n in negs {
        loss = loss - log_sigmoid(-score(x, n, metric)?);
    }
    Ok(loss)
}

/// Gradients of [`nce_loss`] with respect to every vector that took part.
#[derive(Debug, Clone, PartialEq)]
pub struct NceGradients<T> {
    pub loss: T,
    pub input: Vec<T>,
    pub context: Vec<T>,
    pub negatives: Vec<Vec<T>>,
}

/// Adds `coef * ∂s(u, v)/∂u` to `gu` and `coef * ∂s(u, v)/∂v` to `gv`.
fn accumulate_score_grad<T: Real>(u: &[T], v: &[T], s: T, coef: T, metric: Metric, gu: &mut [T], gv: &mut [T]) {
    match metric {
        Metric::Dot => {
            for i in 0..u.len() {
                gu[i] = gu[i] + coef * v[i];
                gv[i] = gv[i] + coef * u[i];
            }
        }
        Metric::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            let inv = T::one() / (nu * nv);
            let (su, sv) = (s / (nu * nu), s / (nv * nv));
            for i in 0..u.len() {
                gu[i] = gu[i] + coef * (v[i] * inv - su * u[i]);
                gv[i] = gv[i] + coef * (u[i] * inv - sv * v[i]);
            }
        }
    }
}

/// Analytic gradients. For the dot metric:
/// `∂L/∂y = (σ(x·y) - 1) x`, `∂L/∂n_i = σ(x·n_i) x`,
/// `∂L/∂x = (σ(x·y) - 1) y + Σ_i σ(x·n_i) n_i`.
pub fn nce_gradients<T: Real>(x: &[T], y: &[T], negs: &[&[T]], metric: Metric) -> Result<NceGradients<T>, EmbedError> {
    let d = x.len();
    let mut out = NceGradients {
        loss: T::zero(),
        input: vec![T::zero(); d],
        context: vec![T::zero(); d],
        negatives: vec![vec![T::zero(); d]; negs.len()],
    };
    let s_pos = score(x, y, metric)?;
    out.loss = -log_sigmoid(s_pos);
    accumulate_score_grad(x, y, s_pos, sigmoid(s_pos) - T::one(), metric, &mut out.input, &mut out.context);
    for (n, gn) in negs.iter().zip(out.negatives.iter_mut()) {
        let s = score(x, n, metric)?;
        out.loss = out.loss - log_sigmoid(-s);
        accumulate_score_grad(x, n, s, sigmoid(s), metric, &mut out.input, gn);
    }
    Ok(out)
}

/// Summed gradients keyed by table row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet<T = Value> {
    dim: usize,
    rows: HashMap<usize, Vec<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn get(&self, row: usize) -> Option<&[T]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn accumulate(&mut self, row: usize, grad: &[T]) -> Result<(), EmbedError> {
        check_dims(self.dim, grad)?;
        let acc = self.rows.entry(row).or_insert_with(|| vec![T::zero(); grad.len()]);
        for (a, &g) in acc.iter_mut().zip(grad) {
            *a = *a + g;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }
}

/// `row <- row - lr * grad` for every keyed row. Rows whose gradient is not
/// finite are left untouched; the others are still applied and the skip count is
/// reported as [`EmbedError::PoisonedUpdate`].
pub fn sgd_step<T: Real>(table: &mut EmbeddingTable<T>, grads: &GradientSet<T>, lr: T) -> Result<usize, EmbedError> {
    if grads.dim() != table.dim() {
        return Err(EmbedError::DimMismatch {
            expected: table.dim(),
            found: grads.dim(),
        });
    }
    if let Some((row, _)) = grads.iter().find(|(r, _)| *r >= table.rows()) {
        return Err(EmbedError::RowOutOfRange { row, rows: table.rows() });
    }
    let mut skipped = 0;
    let mut applied = 0;
    for (row, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            continue;
        }
        for (w, &gi) in table.row_mut(row).iter_mut().zip(g) {
            *w = *w - lr * gi;
        }
        applied += 1;
    }
    if skipped > 0 {
        return Err(EmbedError::PoisonedUpdate { skipped });
    }
    Ok(applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub metric: Metric,
    pub negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            n_steps: 8,
            metric: Metric::Dot,
            negatives: 5,
        }
    }
}

impl TrainConfig {
    /// Rows per worker subset: `n_steps * batch_size`.
    pub fn data_size(&self) -> usize {
        self.n_steps * self.batch_size
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.n_steps == 0 {
            return Err("batch_size and n_steps must be positive".into());
        }
        Ok(())
    }
}

// Checkpoints: "GEMB" | version u16 | label (u16 len + utf-8) | rows u64 | dim u32 | dtype u8 | values.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GEMB";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint holds {found}-byte values, expected {expected}")]
    Dtype { expected: u8, found: u8 },
    #[error("checkpoint label is not valid UTF-8")]
    Label,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_checkpoint<T: Real>(out: impl Write, label: &str, table: &EmbeddingTable<T>) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let label = label.as_bytes();
    let len = u16::try_from(label.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "label too long"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(label)?;
    out.write_all(&(table.rows() as u64).to_le_bytes())?;
    out.write_all(&(table.dim() as u32).to_le_bytes())?;
    out.write_all(&[T::DTYPE])?;
    for &v in table.values() {
        v.write_le(&mut out)?;
    }
    out.flush()
}

pub fn read_checkpoint<T: Real>(input: impl Read) -> Result<(String, EmbeddingTable<T>), CheckpointError> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut two = [0u8; 2];
    r.read_exact(&mut two)?;
    let version = u16::from_le_bytes(two);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    r.read_exact(&mut two)?;
    let mut label = vec![0u8; u16::from_le_bytes(two) as usize];
    r.read_exact(&mut label)?;
    let label = String::from_utf8(label).map_err(|_| CheckpointError::Label)?;
    let mut eight = [0u8; 8];
    r.read_exact(&mut eight)?;
    let rows = u64::from_le_bytes(eight) as usize;
    let mut four = [0u8; 4];
    r.read_exact(&mut four)?;
    let dim = u32::from_le_bytes(four) as usize;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != T::DTYPE {
        return Err(CheckpointError::Dtype {
            expected: T::DTYPE,
            found: dtype[0],
        });
    }
    let values = (0..rows * dim).map(|_| T::read_le(&mut r)).collect::<io::Result<Vec<T>>>()?;
    Ok((label, EmbeddingTable { rows, dim, values }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(rng: &mut seed::Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Loss recomputed term by term with explicit loops and the textbook sigmoid.
    fn scalar_loss(x: &[f64], y: &[f64], negs: &[Vec<f64>], metric: Metric) -> f64 {
        let s = |a: &[f64], b: &[f64]| {
            let mut d = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..a.len() {
                d += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            match metric {
                Metric::Dot => d,
                Metric::Cosine => d / (na.sqrt() * nb.sqrt()),
            }
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut loss = -sig(s(x, y)).ln();
        for n in negs {
            loss -= sig(-s(x, n)).ln();
        }
        loss
    }

    #[test]
    fn init_range_and_determinism() {
        let empty: EmbeddingTable<f32> = init_embeddings(0, 8, 1);
        assert_eq!(empty.rows(), 0);
        assert!(empty.values().is_empty());

        let t: EmbeddingTable<f32> = init_embeddings(50, 100, 7);
        assert!(t.values().iter().all(|v| (-0.005..=0.005).contains(v)));
        assert_eq!(t, init_embeddings(50, 100, 7));
        assert_ne!(t, init_embeddings(50, 100, 8));
    }

    #[test]
    fn init_rows_is_partition_invariant() {
        let full: EmbeddingTable<f32> = init_embeddings(20, 4, 3);
        let tail: EmbeddingTable<f32> = init_rows(12..20, 4, 3);
        for i in 0..8 {
            assert_eq!(tail.row(i), full.row(12 + i));
        }
    }

    #[test]
    fn score_edge_cases() {
        let z = [0.0f64; 4];
        assert_eq!(score(&z, &z, Metric::Dot).unwrap(), 0.0);
        let u = [0.6f64, 0.8];
        assert!((score(&u, &u, Metric::Cosine).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score(&z, &z, Metric::Cosine), Err(EmbedError::DegenerateVector));
        assert!(matches!(score(&u, &z, Metric::Dot), Err(EmbedError::DimMismatch { .. })));
    }

    #[test]
    fn score_matches_scalar_loop() {
        let mut rng = seed::rng(21);
        for _ in 0..100 {
            let u = random_vec(&mut rng, 16);
            let v = random_vec(&mut rng, 16);
            let mut d = 0.0;
            for i in 0..16 {
                d += u[i] * v[i];
            }
            assert!((score(&u, &v, Metric::Dot).unwrap() - d).abs() < 1e-12);
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((score(&u, &v, Metric::Cosine).unwrap() - d / (nu * nv)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_of_zero_vectors_is_two_ln_two() {
        let z = [0.0f64; 3];
        let loss = nce_loss(&z, &z, &[&z], Metric::Dot).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn loss_vanishes_in_the_separated_limit() {
        let x = [100.0f64];
        let y = [100.0f64];
        let n = [-100.0f64];
        let loss = nce_loss(&x, &y, &[&n], Metric::Dot).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "{loss}");
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = seed::rng(5);
        for metric in [Metric::Dot, Metric::Cosine] {
            let x = random_vec(&mut rng, 8);
            let y = random_vec(&mut rng, 8);
            let negs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 8)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let got = nce_loss(&x, &y, &refs, metric).unwrap();
            assert!((got - scalar_loss(&x, &y, &negs, metric)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_of_zero_vectors_vanish() {
        let z = [0.0f64; 5];
        let g = nce_gradients(&z, &z, &[&z, &z], Metric::Dot).unwrap();
        assert!(g.input.iter().chain(&g.context).chain(g.negatives.iter().flatten()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_without_negatives() {
        let x = [0.3f64, -0.2];
        let y = [0.5f64, 0.1];
        let g = nce_gradients(&x, &y, &[], Metric::Dot).unwrap();
        let c = 1.0 - sigmoid(0.3 * 0.5 - 0.2 * 0.1);
        assert!((g.input[0] + c * y[0]).abs() < 1e-15);
        assert!((g.input[1] + c * y[1]).abs() < 1e-15);
        assert!(g.negatives.is_empty());
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut p = at.to_vec();
                let mut m = at.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        diff / scale
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed::rng(77);
        for metric in [Metric::Dot, Metric::Cosine] {
            for d in [2, 8, 16] {
                for k in [1, 5] {
                    let x = random_vec(&mut rng, d);
                    let y = random_vec(&mut rng, d);
                    let negs: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, d)).collect();
                    let g = nce_gradients(&x, &y, &negs.iter().map(Vec::as_slice).collect::<Vec<_>>(), metric).unwrap();
                    let fx = central_difference(|p| scalar_loss(p, &y, &negs, metric), &x, 1e-5);
                    assert!(rel_err(&g.input, &fx) < 1e-6);
                    let fy = central_difference(|p| scalar_loss(&x, p, &negs, metric), &y, 1e-5);
                    assert!(rel_err(&g.context, &fy) < 1e-6);
                    for j in 0..k {
                        let fj = central_difference(
                            |p| {
                                let mut n2 = negs.clone();
                                n2[j] = p.to_vec();
                                scalar_loss(&x, &y, &n2, metric)
                            },
                            &negs[j],
                            1e-5,
                        );
                        assert!(rel_err(&g.negatives[j], &fj) < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn sgd_identities() {
        let mut t: EmbeddingTable<f64> = init_embeddings(4, 3, 1);
        let before = t.clone();
        let zero = {
            let mut g = GradientSet::new(3);
            g.accumulate(1, &[0.0; 3]).unwrap();
            g
        };
        sgd_step(&mut t, &zero, 0.1).unwrap();
        assert_eq!(t, before);
        let mut g = GradientSet::new(3);
        g.accumulate(2, &[1.0, 2.0, 3.0]).unwrap();
        sgd_step(&mut t, &g, 0.0).unwrap();
        assert_eq!(t, before);
        sgd_step(&mut t, &g, 0.5).unwrap();
        assert_eq!(t.row(0), before.row(0));
        assert_eq!(t.row(2)[2], before.row(2)[2] - 1.5);
    }

    #[test]
    fn poisoned_rows_are_skipped_and_counted() {
        let mut t: EmbeddingTable<f64> = init_embeddings(3, 2, 1);
        let before = t.clone();
        let mut g = GradientSet::new(2);
        g.accumulate(0, &[f64::NAN, 0.0]).unwrap();
        g.accumulate(1, &[1.0, 1.0]).unwrap();
        assert_eq!(sgd_step(&mut t, &g, 0.1), Err(EmbedError::PoisonedUpdate { skipped: 1 }));
        assert_eq!(t.row(0), before.row(0));
        assert_ne!(t.row(1), before.row(1));
        let mut bad = GradientSet::new(2);
        bad.accumulate(9, &[1.0, 1.0]).unwrap();
        assert!(matches!(sgd_step(&mut t, &bad, 0.1), Err(EmbedError::RowOutOfRange { row: 9, .. })));
    }

    #[test]
    fn sgd_matches_scalar_resimulation() {
        let mut rng = seed::rng(9);
        let mut t: EmbeddingTable<f64> = init_embeddings(3, 4, 2);
        let mut shadow: Vec<Vec<f64>> = (0..3).map(|i| t.row(i).to_vec()).collect();
        let lr = 0.07;
        for _ in 0..20 {
            let mut g = GradientSet::new(4);
            let mut plain: Vec<(usize, Vec<f64>)> = Vec::new();
            for _ in 0..rng.random_range(1..4) {
                let row = rng.random_range(0..3);
                let grad = random_vec(&mut rng, 4);
                g.accumulate(row, &grad).unwrap();
                plain.push((row, grad));
            }
            sgd_step(&mut t, &g, lr).unwrap();
            let mut sums = vec![vec![0.0; 4]; 3];
            let mut touched = [false; 3];
            for (row, grad) in plain {
                touched[row] = true;
                for i in 0..4 {
                    sums[row][i] += grad[i];
                }
            }
            for r in 0..3 {
                if touched[r] {
                    for i in 0..4 {
                        shadow[r][i] -= lr * sums[r][i];
                    }
                }
            }
        }
        for r in 0..3 {
            assert_eq!(t.row(r), shadow[r].as_slice());
        }
    }

    #[test]
    fn single_row_loss_decreases() {
        let mut decreasing = 0;
        for trial in 0..100u64 {
            let mut t: EmbeddingTable<f64> = init_embeddings(7, 8, trial);
            let loss_at = |t: &EmbeddingTable<f64>| {
                nce_loss(t.row(0), t.row(1), &[t.row(2), t.row(3), t.row(4)], Metric::Dot).unwrap()
            };
            let first = loss_at(&t);
            for _ in 0..50 {
                let g = nce_gradients(t.row(0), t.row(1), &[t.row(2), t.row(3), t.row(4)], Metric::Dot).unwrap();
                assert!(g.loss >= 0.0);
                let mut set = GradientSet::new(8);
                set.accumulate(0, &g.input).unwrap();
                set.accumulate(1, &g.context).unwrap();
                for (j, gn) in g.negatives.iter().enumerate() {
                    set.accumulate(2 + j, gn).unwrap();
                }
                sgd_step(&mut t, &set, 0.5).unwrap();
            }
            if loss_at(&t) < first {
                decreasing += 1;
            }
        }
        assert_eq!(decreasing, 100);
    }

    #[test]
    fn checkpoint_header_and_dtype() {
        let t: EmbeddingTable<f32> = init_embeddings(3, 2, 0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "user", &t).unwrap();
        assert_eq!(&buf[..4], b"GEMB");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[4, 0]);
        assert_eq!(&buf[8..12], b"user");
        assert_eq!(&buf[12..20], &3u64.to_le_bytes());
        assert_eq!(&buf[20..24], &2u32.to_le_bytes());
        assert_eq!(buf[24], 4);
        assert_eq!(buf.len(), 25 + 6 * 4);
        assert!(matches!(read_checkpoint::<f64>(buf.as_slice()), Err(CheckpointError::Dtype { expected: 8, found: 4 })));
        let (label, back) = read_checkpoint::<f32>(buf.as_slice()).unwrap();
        assert_eq!(label, "user");
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(u in prop::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>()) {
            let v: Vec<f64> = random_vec(&mut seed::rng(seed), u.len());
            prop_assert_eq!(score(&u, &v, Metric::Dot).unwrap(), score(&v, &u, Metric::Dot).unwrap());
            if let (Ok(a), Ok(b)) = (score(&u, &v, Metric::Cosine), score(&v, &u, Metric::Cosine)) {
                prop_assert_eq!(a, b);
                prop_assert!(a.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn checkpoint_round_trip(rows in 0usize..20, dim in 1usize..9, seed in any::<u64>(), label in "[a-zA-Z0-9_]{0,12}") {
            let t: EmbeddingTable<f64> = init_embeddings(rows as u64, dim, seed);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &label, &t).unwrap();
            let (l, back) = read_checkpoint::<f64>(buf.as_slice()).unwrap();
            prop_assert_eq!(l, label);
            prop_assert_eq!(back, t);
        }
    }
}
