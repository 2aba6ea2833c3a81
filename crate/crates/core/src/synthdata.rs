//! Deterministic synthetic cohorts of paired pre/post toy volumes.
//!
//! Each subject carries a pre volume of smooth random "anatomy" and a post
//! volume equal to the pre volume plus a centered spherical intensity
//! decrement (a "cavity") and class-independent nuisance structure (smooth
//! fields, global intensity shift, voxel noise). The class signal is a
//! weak fixed high-frequency grating added to unfavourable post volumes:
//! its amplitude (scaled by `class_separation`) is negligible against the
//! nuisance energy, so raw pairwise distances stay uninformative, but its
//! direction is perfectly consistent and therefore learnable. At
//! separation zero the classes are statistically indistinguishable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::derive_rng;

/// Subject sex marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

/// Cubic voxel grid of real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dim: usize,
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dim: usize, voxels: Vec<f64>) -> Result<Self> {
        if dim < 4 {
            return Err(CoreError::Config(format!(
                "volume_dim: dims must be cubic and >= 4, got {dim}"
            )));
        }
        if voxels.len() != dim * dim * dim {
            return Err(CoreError::Shape(format!(
                "volume expects {} voxels for dim {dim}, got {}",
                dim * dim * dim,
                voxels.len()
            )));
        }
        if !voxels.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Numeric("volume contains non-finite intensity".into()));
        }
        Ok(Self { dim, voxels })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(dim, vec![0.0; dim * dim * dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[(x * self.dim + y) * self.dim + z]
    }
}

/// One cohort member.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub label: u8,
    pub pre_volume: Volume,
    pub post_volume: Volume,
}

/// Recipe for a deterministic synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub positive_fraction: f64,
    pub volume_dim: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        // mirrors the 215/53 cohort split at desk scale
        Self {
            n_subjects: 268,
            positive_fraction: 53.0 / 268.0,
            volume_dim: 16,
            class_separation: 1.0,
            seed: 42,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(CoreError::Config(format!(
                "n_subjects: need at least 2 subjects, got {}",
                self.n_subjects
            )));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(CoreError::Config(format!(
                "positive_fraction: must lie in (0,1), got {}",
                self.positive_fraction
            )));
        }
        let n_pos = self.n_positives();
        if n_pos < 1 || n_pos > self.n_subjects - 1 {
            return Err(CoreError::Config(format!(
                "positive_fraction: round(n x fraction) = {n_pos} leaves an empty class"
            )));
        }
        if self.volume_dim < 4 {
            return Err(CoreError::Config(format!(
                "volume_dim: must be >= 4, got {}",
                self.volume_dim
            )));
        }
        if !(self.class_separation >= 0.0) {
            return Err(CoreError::Config(format!(
                "class_separation: must be >= 0, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }

    pub fn n_positives(&self) -> usize {
        (self.n_subjects as f64 * self.positive_fraction).round() as usize
    }
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn add_blob(voxels: &mut [f64], dim: usize, blob: &Blob) {
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    let mut idx = 0;
    for x in 0..dim {
        let dx = x as f64 - blob.center[0];
        for y in 0..dim {
            let dy = y as f64 - blob.center[1];
            for z in 0..dim {
                let dz = z as f64 - blob.center[2];
                let r2 = dx * dx + dy * dy + dz * dz;
                voxels[idx] += blob.amplitude * (-r2 * inv).exp();
                idx += 1;
            }
        }
    }
}

/// Generates a cohort as a pure function of `spec`; per-subject RNG
/// streams are derived from (seed, subject index) so generation order
/// never matters.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let n = spec.n_subjects;
    let d = spec.volume_dim as f64;

    // label layout: exactly n_positives ones, positions shuffled by seed
    let mut labels = vec![0u8; n];
    for l in labels.iter_mut().take(spec.n_positives()) {
        *l = 1;
    }
    let mut label_rng = derive_rng(spec.seed, &[0]);
    for i in (1..n).rev() {
        let j = label_rng.gen_range(0..=i);
        labels.swap(i, j);
    }

    let mut cohort = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = derive_rng(spec.seed, &[1, i as u64]);
        let age = rng.gen_range(18.0..65.0);
        let sex = if rng.gen_bool(0.5) { Sex::M } else { Sex::F };

        let nvox = spec.volume_dim.pow(3);
        let mut pre = vec![0.0f64; nvox];
        // smooth anatomy: a handful of broad positive blobs
        for _ in 0..4 {
            add_blob(
                &mut pre,
                spec.volume_dim,
                &Blob {
                    center: [
                        rng.gen_range(0.0..d),
                        rng.gen_range(0.0..d),
                        rng.gen_range(0.0..d),
                    ],
                    sigma: rng.gen_range(d / 6.0..d / 3.0),
                    amplitude: rng.gen_range(0.5..1.0),
                },
            );
        }
        for v in pre.iter_mut() {
            *v += 0.05 * gauss(&mut rng);
        }

        let mut post = pre.clone();

        // resection cavity: centered with jitter, class-independent
        let center = (d - 1.0) / 2.0;
        let jitter = 0.06 * d;
        let cavity = Blob {
            center: [
                (center + jitter * gauss(&mut rng)).clamp(1.0, d - 2.0),
                (center + jitter * gauss(&mut rng)).clamp(1.0, d - 2.0),
                (center + jitter * gauss(&mut rng)).clamp(1.0, d - 2.0),
            ],
            sigma: 0.11 * d,
            amplitude: -1.2,
        };
        add_blob(&mut post, spec.volume_dim, &cavity);

        // class signal: a weak fixed grating on unfavourable post volumes.
        // cos(w(x-c)) factors are even around the center, so axis flips
        // leave the pattern invariant; the high frequency keeps its overlap
        // with the smooth nuisance fields near zero.
        if label == 1 && spec.class_separation > 0.0 {
            let amp = 0.05 * spec.class_separation;
            let w = 2.0;
            let mut idx = 0;
            for x in 0..spec.volume_dim {
                let px = (w * (x as f64 - center)).cos();
                for y in 0..spec.volume_dim {
                    let py = (w * (y as f64 - center)).cos();
                    for z in 0..spec.volume_dim {
                        let pz = (w * (z as f64 - center)).cos();
                        post[idx] += amp * px * py * pz;
                        idx += 1;
                    }
                }
            }
        }

        // class-independent nuisance: smooth fields, global drift, noise
        for _ in 0..5 {
            add_blob(
                &mut post,
                spec.volume_dim,
                &Blob {
                    center: [
                        rng.gen_range(0.0..d),
                        rng.gen_range(0.0..d),
                        rng.gen_range(0.0..d),
                    ],
                    sigma: rng.gen_range(0.10 * d..0.25 * d),
                    amplitude: rng.gen_range(-0.8..0.8),
                },
            );
        }
        let drift = 0.15 * gauss(&mut rng);
        for v in post.iter_mut() {
            *v += drift + 0.05 * gauss(&mut rng);
        }

        cohort.push(SubjectRecord {
            subject_id: format!("s{i:04}"),
            age,
            sex,
            label,
            pre_volume: Volume::new(spec.volume_dim, pre)?,
            post_volume: Volume::new(spec.volume_dim, post)?,
        });
    }
    Ok(cohort)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Z-score normalizes over the supra-mean voxel mask: voxels strictly
/// above the volume's global mean define mu/sigma, applied to all voxels.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    let n = v.voxels.len() as f64;
    let global_mean = v.voxels.iter().sum::<f64>() / n;
    let mask: Vec<f64> = v
        .voxels
        .iter()
        .copied()
        .filter(|&x| x > global_mean)
        .collect();
    if mask.is_empty() {
        return Err(CoreError::Numeric(
            "degenerate volume: no voxel exceeds the global mean".into(),
        ));
    }
    let m = mask.len() as f64;
    let mu = mask.iter().sum::<f64>() / m;
    let var = mask.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
    let sigma = var.sqrt();
    if sigma <= 0.0 {
        return Err(CoreError::Numeric(
            "degenerate volume: supra-mean voxels have zero variance".into(),
        ));
    }
    let voxels = v.voxels.iter().map(|x| (x - mu) / sigma).collect();
    Volume::new(v.dim, voxels)
}

/// Center-crops or symmetrically zero-pads to a cubic `target` grid.
/// The odd leftover voxel always goes to the high-index side.
pub fn crop_or_pad(v: &Volume, target: usize) -> Result<Volume> {
    if target < 1 {
        return Err(CoreError::Config("crop_or_pad target must be >= 1".into()));
    }
    if target == v.dim {
        return Ok(v.clone());
    }
    let d = v.dim;
    let mut out = vec![0.0f64; target * target * target];
    // shared index map: out coordinate o corresponds to input o - off,
    // where off is the low-side pad (positive) or -crop start (negative)
    let off: isize = if target > d {
        ((target - d) / 2) as isize
    } else {
        -(((d - target) / 2) as isize)
    };
    for ox in 0..target {
        let ix = ox as isize - off;
        if ix < 0 || ix >= d as isize {
            continue;
        }
        for oy in 0..target {
            let iy = oy as isize - off;
            if iy < 0 || iy >= d as isize {
                continue;
            }
            for oz in 0..target {
                let iz = oz as isize - off;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                out[(ox * target + oy) * target + oz] =
                    v.voxels[((ix as usize) * d + iy as usize) * d + iz as usize];
            }
        }
    }
    // bypass the dim >= 4 floor: crop targets below 4 are legal scratch shapes
    Ok(Volume {
        dim: target,
        voxels: out,
    })
}

#[derive(Serialize, Deserialize)]
struct CohortHeader {
    format: String,
    spec: CohortSpec,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    subject_id: String,
    age: f64,
    sex: Sex,
    label: u8,
    dims: usize,
    pre_voxels: Vec<f64>,
    post_voxels: Vec<f64>,
}

pub const COHORT_FORMAT: &str = "trajo.cohort.v1";

/// Writes a cohort as JSON lines: a header line carrying the spec for
/// provenance, then one record per line.
pub fn write_cohort(path: &Path, spec: &CohortSpec, cohort: &[SubjectRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CohortHeader {
        format: COHORT_FORMAT.into(),
        spec: spec.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| CoreError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    for r in cohort {
        let line = RecordLine {
            subject_id: r.subject_id.clone(),
            age: r.age,
            sex: r.sex,
            label: r.label,
            dims: r.pre_volume.dim(),
            pre_voxels: r.pre_volume.voxels().to_vec(),
            post_voxels: r.post_volume.voxels().to_vec(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| CoreError::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cohort file; returns the provenance spec and the records.
/// Any malformed line fails the whole read (no partial cohort).
pub fn read_cohort(path: &Path) -> Result<(CohortSpec, Vec<SubjectRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::Parse("empty cohort file: missing header line".into()))??;
    let header: CohortHeader = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::Parse(format!("header line: {e}")))?;
    if header.format != COHORT_FORMAT {
        return Err(CoreError::Parse(format!(
            "unsupported cohort format '{}'",
            header.format
        )));
    }
    let mut cohort = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)
            .map_err(|e| CoreError::Parse(format!("record {} (line {}): {e}", i + 1, i + 2)))?;
        if !seen.insert(rec.subject_id.clone()) {
            return Err(CoreError::Parse(format!(
                "record {}: duplicate subject_id '{}'",
                i + 1,
                rec.subject_id
            )));
        }
        if rec.label > 1 {
            return Err(CoreError::Parse(format!(
                "record {}: label must be 0 or 1",
                i + 1
            )));
        }
        cohort.push(SubjectRecord {
            subject_id: rec.subject_id,
            age: rec.age,
            sex: rec.sex,
            label: rec.label,
            pre_volume: Volume::new(rec.dims, rec.pre_voxels)
                .map_err(|e| CoreError::Parse(format!("record {}: {e}", i + 1)))?,
            post_volume: Volume::new(rec.dims, rec.post_voxels)
                .map_err(|e| CoreError::Parse(format!("record {}: {e}", i + 1)))?,
        });
    }
    Ok((header.spec, cohort))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            n_subjects: 10,
            positive_fraction: 0.5,
            volume_dim: 8,
            class_separation: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn paper_scale_label_counts() {
        let spec = CohortSpec {
            n_subjects: 268,
            positive_fraction: 53.0 / 268.0,
            volume_dim: 4,
            class_separation: 1.0,
            seed: 42,
        };
        let cohort = generate_cohort(&spec).unwrap();
        let pos = cohort.iter().filter(|r| r.label == 1).count();
        assert_eq!(pos, 53);
        assert_eq!(cohort.len() - pos, 215);
    }

    #[test]
    fn zero_separation_balanced_split() {
        let spec = CohortSpec {
            class_separation: 0.0,
            ..small_spec()
        };
        let cohort = generate_cohort(&spec).unwrap();
        assert_eq!(cohort.iter().filter(|r| r.label == 1).count(), 5);
        assert_eq!(cohort.iter().filter(|r| r.label == 0).count(), 5);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small_spec()).unwrap();
        let b = generate_cohort(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = CohortSpec {
            positive_fraction: 0.01,
            ..small_spec()
        };
        let err = generate_cohort(&spec).unwrap_err();
        assert!(err.to_string().contains("positive_fraction"), "{err}");
    }

    #[test]
    fn zscore_hand_case() {
        // voxels {2,4} exceed the global mean; mask mean 3, std 1
        let mut voxels = vec![0.0; 64];
        voxels[0] = 2.0;
        voxels[1] = 4.0;
        let v = Volume::new(4, voxels).unwrap();
        let out = zscore_normalize(&v).unwrap();
        assert!((out.voxels()[0] - (-1.0)).abs() < 1e-12);
        assert!((out.voxels()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_constant_volume_errors() {
        let v = Volume::new(4, vec![3.0; 64]).unwrap();
        assert!(zscore_normalize(&v).is_err());
    }

    #[test]
    fn zscore_idempotent_on_planted_volumes() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        for r in cohort.iter().take(3) {
            let once = zscore_normalize(&r.pre_volume).unwrap();
            let twice = zscore_normalize(&once).unwrap();
            for (a, b) in once.voxels().iter().zip(twice.voxels()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_or_pad_identity() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let v = &cohort[0].pre_volume;
        assert_eq!(crop_or_pad(v, 8).unwrap(), *v);
    }

    #[test]
    fn pad_ones_count() {
        let v = Volume::new(4, vec![1.0; 64]).unwrap();
        let out = crop_or_pad(&v, 6).unwrap();
        let ones = out.voxels().iter().filter(|&&x| x == 1.0).count();
        let zeros = out.voxels().iter().filter(|&&x| x == 0.0).count();
        assert_eq!(ones, 64);
        assert_eq!(zeros, 216 - 64);
        // centered: low pad 1, extra zero on the high-index side
        assert_eq!(out.at(0, 1, 1), 0.0);
        assert_eq!(out.at(1, 1, 1), 1.0);
        assert_eq!(out.at(4, 4, 4), 1.0);
        assert_eq!(out.at(5, 4, 4), 0.0);
    }

    #[test]
    fn crop_matches_indexing_oracle() {
        let voxels: Vec<f64> = (0..216).map(|i| i as f64).collect();
        let v = Volume::new(6, voxels).unwrap();
        let out = crop_or_pad(&v, 4).unwrap();
        // central 4^3 block: start index floor((6-4)/2) = 1 on each axis
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    assert_eq!(out.at(x, y, z), v.at(x + 1, y + 1, z + 1));
                }
            }
        }
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        let v = &cohort[1].post_volume;
        let big = crop_or_pad(v, 13).unwrap();
        assert_eq!(crop_or_pad(&big, 8).unwrap(), *v);
    }

    #[test]
    fn cohort_file_roundtrip() {
        let spec = small_spec();
        let cohort = generate_cohort(&spec).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cohort.jsonl");
        write_cohort(&path, &spec, &cohort).unwrap();
        let (spec2, cohort2) = read_cohort(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(cohort, cohort2);
    }

    #[test]
    fn empty_cohort_roundtrip() {
        let spec = small_spec();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("empty.jsonl");
        write_cohort(&path, &spec, &[]).unwrap();
        let (_, cohort) = read_cohort(&path).unwrap();
        assert!(cohort.is_empty());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let spec = small_spec();
        let cohort = generate_cohort(&spec).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cohort.jsonl");
        write_cohort(&path, &spec, &cohort).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() * 2 / 3];
        let tpath = tmp.path().join("truncated.jsonl");
        std::fs::write(&tpath, cut).unwrap();
        assert!(matches!(read_cohort(&tpath), Err(CoreError::Parse(_))));
    }
}
