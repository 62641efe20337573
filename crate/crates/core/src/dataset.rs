//! On-disk slice datasets and cohort manifests.
//!
//! A slice dataset is a pair of files: `NAME.rfsl` holds the pixels
//! (magic `RFSL`, then little-endian `u32` version, count, height, width,
//! then `count·height·width` little-endian `f32`), and `NAME.csv` indexes
//! each slice with its subject, sagittal index and byte offset.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::phantom::FaceParams;
use crate::slicing::{DomainTag, SliceImage};

pub const MAGIC: &[u8; 4] = b"RFSL";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}: not a slice dataset (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported dataset version {version}")]
    VersionMismatch { path: PathBuf, version: u32 },
    #[error("{0}: file shorter than its header implies")]
    Truncated(PathBuf),
    #[error("dataset is empty or images differ in size")]
    Inconsistent,
    #[error("{path}: index does not match payload: {reason}")]
    IndexMismatch { path: PathBuf, reason: String },
    #[error("{path}: bad CSV: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: bad field: {reason}")]
    BadField { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn payload_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.rfsl"))
}

pub fn index_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

pub fn encode_slices(images: &[SliceImage]) -> Result<Vec<u8>, DatasetError> {
    let first = images.first().ok_or(DatasetError::Inconsistent)?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| (im.height, im.width) != (h, w)) {
        return Err(DatasetError::Inconsistent);
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + images.len() * h * w * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for im in images {
        for &p in &im.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `NAME.rfsl` and `NAME.csv` into `dir`.
pub fn write_slice_dataset(images: &[SliceImage], dir: &Path, name: &str) -> Result<(), DatasetError> {
    let bytes = encode_slices(images)?;
    let ppath = payload_path(dir, name);
    fs::write(&ppath, bytes).map_err(io_err(&ppath))?;
    let ipath = index_path(dir, name);
    let mut wr = csv::Writer::from_path(&ipath).map_err(csv_err(&ipath))?;
    wr.write_record(["subject_id", "slice_index", "offset"]).map_err(csv_err(&ipath))?;
    let per = first_len(images) * 4;
    for (i, im) in images.iter().enumerate() {
        wr.write_record([
            im.subject_id.to_string(),
            im.slice_index.to_string(),
            (HEADER_BYTES + i * per).to_string(),
        ])
        .map_err(csv_err(&ipath))?;
    }
    wr.flush().map_err(io_err(&ipath))
}

fn first_len(images: &[SliceImage]) -> usize {
    images.first().map_or(0, |im| im.pixels.len())
}

fn parse_field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T, DatasetError> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| DatasetError::BadField {
            path: path.to_path_buf(),
            reason: format!("column {what} in row {:?}", rec.position().map(|p| p.line())),
        })
}

/// Reads a dataset written by [`write_slice_dataset`], tagging every slice
/// with `domain`.
pub fn read_slice_dataset(dir: &Path, name: &str, domain: DomainTag) -> Result<Vec<SliceImage>, DatasetError> {
    let ppath = payload_path(dir, name);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic(ppath));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(DatasetError::Truncated(ppath));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]);
    let version = word(1);
    if version != VERSION {
        return Err(DatasetError::VersionMismatch { path: ppath, version });
    }
    let (count, h, w) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let per = h * w * 4;
    if bytes.len() != HEADER_BYTES + count * per {
        return Err(DatasetError::Truncated(ppath));
    }
    let ipath = index_path(dir, name);
    let mut rd = csv::Reader::from_path(&ipath).map_err(csv_err(&ipath))?;
    let mut images = Vec::with_capacity(count);
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(&ipath))?;
        let subject_id: u32 = parse_field(&ipath, &rec, 0, "subject_id")?;
        let slice_index: u32 = parse_field(&ipath, &rec, 1, "slice_index")?;
        let offset: usize = parse_field(&ipath, &rec, 2, "offset")?;
        if offset < HEADER_BYTES || !(offset - HEADER_BYTES).is_multiple_of(per.max(1)) || offset + per > bytes.len() {
            return Err(DatasetError::IndexMismatch {
                path: ipath,
                reason: format!("offset {offset} is not a slice boundary"),
            });
        }
        let pixels = bytes[offset..offset + per]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        images.push(SliceImage {
            width: w,
            height: h,
            pixels,
            subject_id,
            slice_index,
            domain,
        });
    }
    if images.len() != count {
        return Err(DatasetError::IndexMismatch {
            path: ipath,
            reason: format!("{} index rows for {count} slices", images.len()),
        });
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortEntry {
    pub subject_id: u32,
    pub params: FaceParams,
    /// File name relative to the manifest's directory.
    pub file: String,
}

pub const MANIFEST_COLUMNS: [&str; 10] = [
    "subject_id",
    "nose_length",
    "nose_angle",
    "lip_protrusion",
    "chin_extent",
    "forehead_slope",
    "skull_axis_ap",
    "skull_axis_si",
    "texture_seed",
    "file",
];

pub fn write_cohort_manifest(entries: &[CohortEntry], path: &Path) -> Result<(), DatasetError> {
    let mut wr = csv::Writer::from_path(path).map_err(csv_err(path))?;
    wr.write_record(MANIFEST_COLUMNS).map_err(csv_err(path))?;
    for e in entries {
        let p = &e.params;
        wr.write_record([
            e.subject_id.to_string(),
            p.nose_length.to_string(),
            p.nose_angle.to_string(),
            p.lip_protrusion.to_string(),
            p.chin_extent.to_string(),
            p.forehead_slope.to_string(),
            p.skull_axes[0].to_string(),
            p.skull_axes[1].to_string(),
            p.texture_seed.to_string(),
            e.file.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    wr.flush().map_err(io_err(path))
}

pub fn read_cohort_manifest(path: &Path) -> Result<Vec<CohortEntry>, DatasetError> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err(path))?;
        let f = |i| parse_field::<f64>(path, &rec, i, MANIFEST_COLUMNS[i]);
        out.push(CohortEntry {
            subject_id: parse_field(path, &rec, 0, "subject_id")?,
            params: FaceParams {
                nose_length: f(1)?,
                nose_angle: f(2)?,
                lip_protrusion: f(3)?,
                chin_extent: f(4)?,
                forehead_slope: f(5)?,
                skull_axes: [f(6)?, f(7)?],
                texture_seed: parse_field(path, &rec, 8, "texture_seed")?,
            },
            file: parse_field(path, &rec, 9, "file")?,
        });
    }
    Ok(out)
}
