//! Population archive: exact cosine retrieval over unit trajectory vectors.
//!
//! The archive is a flat, immutable store. Search is a full scan — no
//! approximate index — so retrieved neighbors are exactly the top-k by
//! inner product (equal to cosine similarity since every vector is
//! unit-norm). Ties are broken by insertion order, lowest index first.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::encoder::TrajectoryVector;
use crate::error::{CoreError, Result};
use crate::synthdata::Sex;

const ARCHIVE_MAGIC: &[u8; 4] = b"TJAR";
const ARCHIVE_VERSION: u32 = 1;

/// One archived subject: trajectory plus the metadata the downstream
/// evidence prompt needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub subject_id: String,
    pub trajectory: Vec<f64>,
    pub label: u8,
    pub age: f64,
    pub sex: Sex,
}

impl ArchiveEntry {
    pub fn new(trajectory: TrajectoryVector, label: u8, age: f64, sex: Sex) -> Self {
        Self {
            subject_id: trajectory.subject_id,
            trajectory: trajectory.values,
            label,
            age,
            sex,
        }
    }
}

/// A retrieval hit, carrying its similarity and position in the archive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Neighbor {
    pub archive_index: usize,
    pub subject_id: String,
    pub similarity: f64,
    pub label: u8,
    pub age: f64,
    pub sex: Sex,
}

/// Immutable set of archived trajectories with exact top-k search.
#[derive(Debug, Clone)]
pub struct PopulationArchive {
    dim: usize,
    entries: Vec<ArchiveEntry>,
}

fn check_unit_norm(id: &str, values: &[f64]) -> Result<()> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(CoreError::Numeric(format!(
            "archive entry '{id}' has norm {norm}, expected a unit vector"
        )));
    }
    Ok(())
}

/// Validates entries (consistent dimension, unit norms, unique ids) and
/// freezes them in insertion order. An empty archive is valid; searching
/// it is not.
pub fn build_archive(entries: Vec<ArchiveEntry>) -> Result<PopulationArchive> {
    let dim = entries.first().map_or(0, |e| e.trajectory.len());
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for e in &entries {
        if e.trajectory.len() != dim {
            return Err(CoreError::Shape(format!(
                "archive entry '{}' has dimension {}, expected {dim}",
                e.subject_id,
                e.trajectory.len()
            )));
        }
        check_unit_norm(&e.subject_id, &e.trajectory)?;
        if e.label > 1 {
            return Err(CoreError::Config(format!(
                "archive entry '{}' has label {}, expected 0 or 1",
                e.subject_id, e.label
            )));
        }
        if !seen.insert(e.subject_id.as_str()) {
            return Err(CoreError::Config(format!(
                "archive: duplicate subject id '{}'",
                e.subject_id
            )));
        }
    }
    drop(seen);
    Ok(PopulationArchive { dim, entries })
}

impl PopulationArchive {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    /// Exact top-k by inner product over the full archive. `k` larger than
    /// the archive returns everything, ranked. Equal similarities keep
    /// insertion order (stable sort).
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if self.entries.is_empty() {
            return Err(CoreError::Config("search: archive is empty".into()));
        }
        if k == 0 {
            return Err(CoreError::Config("search: k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(CoreError::Shape(format!(
                "search: query has dimension {}, archive stores {}",
                query.len(),
                self.dim
            )));
        }
        check_unit_norm("<query>", query)?;
        let mut ranked: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    i,
                    e.trajectory.iter().zip(query).map(|(a, b)| a * b).sum::<f64>(),
                )
            })
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("similarities are finite"));
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .map(|(i, sim)| {
                let e = &self.entries[i];
                Neighbor {
                    archive_index: i,
                    subject_id: e.subject_id.clone(),
                    similarity: sim,
                    label: e.label,
                    age: e.age,
                    sex: e.sex,
                }
            })
            .collect())
    }
}

/// Binary serialization: magic, version, dimension, entry count, then each
/// entry as (id, label, age, sex, trajectory), all little-endian.
pub fn save_archive(path: &Path, archive: &PopulationArchive) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
    w.write_u32::<LittleEndian>(archive.dim as u32)?;
    w.write_u32::<LittleEndian>(archive.entries.len() as u32)?;
    for e in &archive.entries {
        let id = e.subject_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(CoreError::Config(format!(
                "archive: subject id '{}…' is too long to serialize",
                &e.subject_id[..32.min(e.subject_id.len())]
            )));
        }
        w.write_u16::<LittleEndian>(id.len() as u16)?;
        w.write_all(id)?;
        w.write_u8(e.label)?;
        w.write_f64::<LittleEndian>(e.age)?;
        w.write_u8(match e.sex {
            Sex::M => 0,
            Sex::F => 1,
        })?;
        for &v in &e.trajectory {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<PopulationArchive> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Parse("archive file: missing header".into()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(CoreError::Parse("archive file: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != ARCHIVE_VERSION {
        return Err(CoreError::Parse(format!(
            "archive file: unsupported version {version}"
        )));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let truncated = |_| CoreError::Parse(format!("archive file: truncated at entry {i}"));
        let id_len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(truncated)?;
        let subject_id = String::from_utf8(id)
            .map_err(|_| CoreError::Parse(format!("archive file: entry {i} id is not UTF-8")))?;
        let label = r.read_u8().map_err(truncated)?;
        let age = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let sex = match r.read_u8().map_err(truncated)? {
            0 => Sex::M,
            1 => Sex::F,
            other => {
                return Err(CoreError::Parse(format!(
                    "archive file: entry {i} has invalid sex tag {other}"
                )))
            }
        };
        let mut trajectory = vec![0.0f64; dim];
        r.read_f64_into::<LittleEndian>(&mut trajectory).map_err(truncated)?;
        entries.push(ArchiveEntry {
            subject_id,
            trajectory,
            label,
            age,
            sex,
        });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(CoreError::Parse(
            "archive file: trailing bytes after the last entry".into(),
        ));
    }
    build_archive(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn unit(values: Vec<f64>) -> Vec<f64> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.into_iter().map(|v| v / n).collect()
    }

    fn random_entry(rng: &mut impl Rng, id: &str, dim: usize) -> ArchiveEntry {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ArchiveEntry {
            subject_id: id.to_string(),
            trajectory: unit(raw),
            label: rng.gen_range(0..2) as u8,
            age: rng.gen_range(18.0..65.0),
            sex: if rng.gen_bool(0.5) { Sex::M } else { Sex::F },
        }
    }

    fn random_archive(rng: &mut impl Rng, n: usize, dim: usize) -> PopulationArchive {
        let entries = (0..n).map(|i| random_entry(rng, &format!("s{i:04}"), dim)).collect();
        build_archive(entries).unwrap()
    }

    // reference ranking: compute all similarities, stable-sort descending
    fn brute_force(archive: &PopulationArchive, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut sims: Vec<(usize, f64)> = archive
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.trajectory.iter().zip(query).map(|(a, b)| a * b).sum()))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sims.truncate(k);
        sims
    }

    #[test]
    fn search_matches_brute_force_on_random_instances() {
        let mut rng = derive_rng(20, &[0]);
        for _ in 0..200 {
            let n = rng.gen_range(1..=40);
            let dim = rng.gen_range(2..=16);
            let archive = random_archive(&mut rng, n, dim);
            let query = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let k = rng.gen_range(1..=n + 3);
            let got = archive.search(&query, k).unwrap();
            let expected = brute_force(&archive, &query, k);
            assert_eq!(got.len(), expected.len());
            for (g, (idx, sim)) in got.iter().zip(expected) {
                assert_eq!(g.archive_index, idx);
                assert_eq!(g.similarity, sim);
            }
        }
    }

    #[test]
    fn ties_resolve_by_insertion_order() {
        let v = unit(vec![1.0, 1.0, 0.0]);
        let entries: Vec<ArchiveEntry> = (0..4)
            .map(|i| ArchiveEntry {
                subject_id: format!("dup{i}"),
                trajectory: v.clone(),
                label: 0,
                age: 40.0,
                sex: Sex::F,
            })
            .collect();
        let archive = build_archive(entries).unwrap();
        let hits = archive.search(&v, 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.subject_id.as_str()).collect();
        assert_eq!(ids, ["dup0", "dup1", "dup2"]);
    }

    #[test]
    fn oversized_k_returns_the_whole_archive_ranked() {
        let mut rng = derive_rng(21, &[0]);
        let archive = random_archive(&mut rng, 7, 5);
        let query = unit((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let hits = archive.search(&query, 100).unwrap();
        assert_eq!(hits.len(), 7);
        for pair in hits.windows(2) {
            assert!(pair[0].similarity >= pair[1].similarity);
        }
    }

    #[test]
    fn build_rejects_duplicates_and_bad_vectors() {
        let mut rng = derive_rng(22, &[0]);
        let a = random_entry(&mut rng, "same", 4);
        let b = random_entry(&mut rng, "same", 4);
        let err = build_archive(vec![a.clone(), b]).unwrap_err().to_string();
        assert!(err.contains("same"), "{err}");

        let mut bad = random_entry(&mut rng, "offender", 4);
        bad.trajectory[0] += 0.5;
        let err = build_archive(vec![a.clone(), bad]).unwrap_err().to_string();
        assert!(err.contains("offender"), "{err}");

        let mut short = random_entry(&mut rng, "short", 3);
        short.trajectory = unit(vec![1.0, 2.0, 3.0]);
        let err = build_archive(vec![a.clone(), short]).unwrap_err().to_string();
        assert!(err.contains("dimension"), "{err}");

        let mut mislabeled = random_entry(&mut rng, "mislabeled", 4);
        mislabeled.label = 2;
        assert!(build_archive(vec![a, mislabeled]).is_err());
    }

    #[test]
    fn empty_archive_builds_but_rejects_search() {
        let archive = build_archive(Vec::new()).unwrap();
        assert!(archive.is_empty());
        assert!(archive.search(&[1.0], 1).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        save_archive(&path, &archive).unwrap();
        let loaded = load_archive(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn search_validates_query_and_k() {
        let mut rng = derive_rng(23, &[0]);
        let archive = random_archive(&mut rng, 3, 4);
        let q = unit(vec![1.0, 0.0, 0.0, 2.0]);
        assert!(archive.search(&q, 0).is_err());
        assert!(archive.search(&[1.0, 0.0], 1).is_err());
        assert!(archive.search(&[0.9, 0.0, 0.0, 0.0], 1).is_err());
        assert!(archive.search(&q, 1).is_ok());
    }

    #[test]
    fn file_roundtrip_preserves_entries_and_rankings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("archive.bin");
        let mut rng = derive_rng(24, &[0]);
        let archive = random_archive(&mut rng, 25, 8);
        save_archive(&path, &archive).unwrap();
        let loaded = load_archive(&path).unwrap();
        assert_eq!(archive.entries(), loaded.entries());
        let query = unit((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = archive.search(&query, 5).unwrap();
        let b = loaded.search(&query, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_or_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("archive.bin");
        let mut rng = derive_rng(25, &[0]);
        let archive = random_archive(&mut rng, 5, 6);
        save_archive(&path, &archive).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(load_archive(&cut), Err(CoreError::Parse(_))));

        let padded = dir.path().join("padded.bin");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&padded, &longer).unwrap();
        assert!(matches!(load_archive(&padded), Err(CoreError::Parse(_))));

        let wrong = dir.path().join("wrong.bin");
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        std::fs::write(&wrong, &bad_magic).unwrap();
        assert!(matches!(load_archive(&wrong), Err(CoreError::Parse(_))));
    }
}
