//! Shard files: the on-disk row matrix handed to each worker.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "GWLK" | version u16 | k u16 | row_count u64 | typed u8
//! row: input (u8 type, u64 id) | context (u8, u64) | k x negative (u8, u64)
//! ```
//!
//! The TSV debug form has a `#GWLK` header line followed by one row per line with
//! the same fields as the binary record, in the same order.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::TrainingRow;
use crate::graph::VertexRef;

pub const SHARD_MAGIC: &[u8; 4] = b"GWLK";
pub const SHARD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a shard file (bad magic)")]
    BadMagic,
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u16),
    #[error("row {row} has {found} negatives, header says {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("shard TSV line {line}: {message}")]
    Tsv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardFile {
    pub k: u16,
    pub typed: bool,
    pub rows: Vec<TrainingRow>,
}

impl ShardFile {
    /// Wrap rows, taking `k` from the first row. All rows must agree.
    pub fn new(rows: Vec<TrainingRow>, typed: bool) -> Result<Self, FormatError> {
        let k = rows.first().map_or(0, |r| r.negatives.len());
        check_ragged(&rows, k)?;
        Ok(Self { k: k as u16, typed, rows })
    }
}

fn check_ragged(rows: &[TrainingRow], k: usize) -> Result<(), FormatError> {
    match rows.iter().position(|r| r.negatives.len() != k) {
        Some(row) => Err(FormatError::RaggedRow {
            row,
            found: rows[row].negatives.len(),
            expected: k,
        }),
        None => Ok(()),
    }
}

fn put_vertex(out: &mut impl Write, v: VertexRef) -> io::Result<()> {
    out.write_all(&[v.vtype])?;
    out.write_all(&v.id.to_le_bytes())
}

fn get_vertex(r: &mut impl Read) -> io::Result<VertexRef> {
    let mut buf = [0u8; 9];
    r.read_exact(&mut buf)?;
    Ok(VertexRef::new(buf[0], u64::from_le_bytes(buf[1..].try_into().unwrap())))
}

pub fn write_shard(out: impl Write, shard: &ShardFile) -> Result<(), FormatError> {
    check_ragged(&shard.rows, shard.k as usize)?;
    let mut out = BufWriter::new(out);
    out.write_all(SHARD_MAGIC)?;
    out.write_all(&SHARD_VERSION.to_le_bytes())?;
    out.write_all(&shard.k.to_le_bytes())?;
    out.write_all(&(shard.rows.len() as u64).to_le_bytes())?;
    out.write_all(&[u8::from(shard.typed)])?;
    for row in &shard.rows {
        for v in row.vertices() {
            put_vertex(&mut out, v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_shard(input: impl Read) -> Result<ShardFile, FormatError> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut header = [0u8; 13];
    r.read_exact(&mut header)?;
    let version = u16::from_le_bytes([header[0], header[1]]);
    if version != SHARD_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let k = u16::from_le_bytes([header[2], header[3]]);
    let count = u64::from_le_bytes(header[4..12].try_into().unwrap());
    let typed = header[12] != 0;
    let mut rows = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let input = get_vertex(&mut r)?;
        let context = get_vertex(&mut r)?;
        let negatives = (0..k).map(|_| get_vertex(&mut r)).collect::<io::Result<_>>()?;
        rows.push(TrainingRow {
            input,
            context,
            negatives,
        });
    }
    Ok(ShardFile { k, typed, rows })
}

pub fn save_shard(path: &Path, shard: &ShardFile) -> Result<(), FormatError> {
    write_shard(File::create(path)?, shard)
}

pub fn load_shard(path: &Path) -> Result<ShardFile, FormatError> {
    read_shard(File::open(path)?)
}

pub fn write_shard_tsv(out: impl Write, shard: &ShardFile) -> Result<(), FormatError> {
    check_ragged(&shard.rows, shard.k as usize)?;
    let mut out = BufWriter::new(out);
    writeln!(
        out,
        "#GWLK\tversion={SHARD_VERSION}\tk={}\trows={}\ttyped={}",
        shard.k,
        shard.rows.len(),
        u8::from(shard.typed)
    )?;
    for row in &shard.rows {
        let fields: Vec<String> = row.vertices().map(|v| format!("{}\t{}", v.vtype, v.id)).collect();
        writeln!(out, "{}", fields.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_shard_tsv(input: impl Read) -> Result<ShardFile, FormatError> {
    let mut lines = BufReader::new(input).lines();
    let header = lines.next().transpose()?.ok_or(FormatError::BadMagic)?;
    let mut fields = header.split('\t');
    if fields.next() != Some("#GWLK") {
        return Err(FormatError::BadMagic);
    }
    let mut k = None;
    let mut typed = false;
    for f in fields {
        match f.split_once('=') {
            Some(("version", v)) if v != SHARD_VERSION.to_string() => {
                return Err(FormatError::UnsupportedVersion(v.parse().unwrap_or(0)))
            }
            Some(("k", v)) => k = v.parse::<u16>().ok(),
            Some(("typed", v)) => typed = v == "1",
            _ => {}
        }
    }
    let k = k.ok_or(FormatError::Tsv {
        line: 1,
        message: "header lacks k=".into(),
    })?;

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let bad = |message: String| FormatError::Tsv { line: line_no, message };
        let nums: Vec<&str> = line.split('\t').collect();
        if nums.len() != 2 * (2 + k as usize) {
            return Err(bad(format!("expected {} fields, got {}", 2 * (2 + k as usize), nums.len())));
        }
        let mut verts = nums.chunks(2).map(|p| -> Result<VertexRef, FormatError> {
            let t = p[0].parse().map_err(|_| bad(format!("bad type `{}`", p[0])))?;
            let id = p[1].parse().map_err(|_| bad(format!("bad id `{}`", p[1])))?;
            Ok(VertexRef::new(t, id))
        });
        let input = verts.next().unwrap()?;
        let context = verts.next().unwrap()?;
        let negatives = verts.collect::<Result<_, _>>()?;
        rows.push(TrainingRow {
            input,
            context,
            negatives,
        });
    }
    Ok(ShardFile { k, typed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_vertex() -> impl Strategy<Value = VertexRef> {
        (0u8..4, any::<u64>()).prop_map(|(t, id)| VertexRef::new(t, id))
    }

    fn arb_shard() -> impl Strategy<Value = ShardFile> {
        (0usize..6, any::<bool>()).prop_flat_map(|(k, typed)| {
            prop::collection::vec(
                (arb_vertex(), arb_vertex(), prop::collection::vec(arb_vertex(), k)).prop_map(
                    |(input, context, negatives)| TrainingRow {
                        input,
                        context,
                        negatives,
                    },
                ),
                0..40,
            )
            .prop_map(move |rows| ShardFile { k: k as u16, typed, rows })
        })
    }

    proptest! {
        #[test]
        fn binary_and_tsv_round_trip(shard in arb_shard()) {
            let mut bin = Vec::new();
            write_shard(&mut bin, &shard).unwrap();
            prop_assert_eq!(bin.len(), 17 + shard.rows.len() * 9 * (2 + shard.k as usize));
            prop_assert_eq!(read_shard(bin.as_slice()).unwrap(), shard.clone());

            let mut tsv = Vec::new();
            write_shard_tsv(&mut tsv, &shard).unwrap();
            prop_assert_eq!(read_shard_tsv(tsv.as_slice()).unwrap(), shard);
        }
    }

    #[test]
    fn header_layout() {
        let shard = ShardFile::new(
            vec![TrainingRow {
                input: VertexRef::new(1, 2),
                context: VertexRef::new(0, 3),
                negatives: vec![VertexRef::new(0, 0x0102)],
            }],
            true,
        )
        .unwrap();
        let mut bin = Vec::new();
        write_shard(&mut bin, &shard).unwrap();
        assert_eq!(&bin[..4], b"GWLK");
        assert_eq!(&bin[4..6], &[1, 0]);
        assert_eq!(&bin[6..8], &[1, 0]);
        assert_eq!(&bin[8..16], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bin[16], 1);
        assert_eq!(&bin[17..26], &[1, 2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bin[35..44], &[0, 2, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_shard(&b"XXXX\x01\x00"[..]), Err(FormatError::BadMagic)));
        assert!(matches!(
            read_shard(&b"GWLK\x09\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00"[..]),
            Err(FormatError::UnsupportedVersion(9))
        ));
        let ragged = vec![
            TrainingRow { input: VertexRef::untyped(0), context: VertexRef::untyped(1), negatives: vec![] },
            TrainingRow { input: VertexRef::untyped(0), context: VertexRef::untyped(1), negatives: vec![VertexRef::untyped(2)] },
        ];
        assert!(matches!(ShardFile::new(ragged, false), Err(FormatError::RaggedRow { row: 1, .. })));
        let truncated = b"GWLK\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(read_shard(&truncated[..]), Err(FormatError::Io(_))));
    }
}
