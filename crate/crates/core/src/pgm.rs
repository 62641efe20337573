//! 16-bit binary PGM (P5, maxval 65535) output for slices and montages.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::slicing::SliceImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("white level must be positive, got {0}")]
    BadWhiteLevel(f64),
    #[error("montage has no images")]
    EmptyMontage,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[inline]
fn quantize(v: f64, white_level: f64) -> u16 {
    ((v / white_level).clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encodes `width`×`height` row-major pixels. Samples are big-endian as the
/// PGM format requires for maxval > 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64], white_level: f64) -> Result<Vec<u8>, PgmError> {
    if !(white_level > 0.0) {
        return Err(PgmError::BadWhiteLevel(white_level));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(2 * pixels.len());
    for &v in pixels {
        out.extend_from_slice(&quantize(v, white_level).to_be_bytes());
    }
    Ok(out)
}

pub fn write_image_pgm(image: &SliceImage, path: impl AsRef<Path>, white_level: f64) -> Result<(), PgmError> {
    let bytes = encode_pgm(image.width, image.height, &image.pixels, white_level)?;
    write_bytes(path.as_ref(), &bytes)
}

/// Tiles `rows` of equally sized images into one PGM, e.g. original /
/// anonymized / reconstructed rows with one column per slice. A one-pixel
/// black gutter separates tiles.
pub fn write_montage(rows: &[Vec<&SliceImage>], path: impl AsRef<Path>, white_level: f64) -> Result<(), PgmError> {
    let first = rows
        .iter()
        .flat_map(|r| r.iter())
        .next()
        .ok_or(PgmError::EmptyMontage)?;
    let (tw, th) = (first.width, first.height);
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = ncols * (tw + 1) - 1;
    let height = rows.len() * (th + 1) - 1;
    let mut canvas = vec![0.0; width * height];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            assert_eq!((img.width, img.height), (tw, th), "montage tiles must share a size");
            for y in 0..th {
                let dst = (ri * (th + 1) + y) * width + ci * (tw + 1);
                canvas[dst..dst + tw].copy_from_slice(&img.pixels[y * tw..(y + 1) * tw]);
            }
        }
    }
    let bytes = encode_pgm(width, height, &canvas, white_level)?;
    write_bytes(path.as_ref(), &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PgmError> {
    fs::write(path, bytes).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(bytes: &[u8]) -> Vec<u16> {
        let header_end = bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(2)
            .unwrap()
            .0
            + 1;
        bytes[header_end..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    }

    #[test]
    fn saturation_black_and_midgray() {
        let white = 1.7;
        let b = encode_pgm(3, 2, &[white; 6], white).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n65535\n"));
        assert!(samples(&b).iter().all(|&s| s == 65535));
        let b = encode_pgm(3, 2, &[0.0; 6], white).unwrap();
        assert!(samples(&b).iter().all(|&s| s == 0));
        let b = encode_pgm(3, 2, &[white / 2.0; 6], white).unwrap();
        assert!(samples(&b).iter().all(|&s| s.abs_diff(32768) <= 1));
    }

    #[test]
    fn clamps_out_of_range() {
        let b = encode_pgm(2, 1, &[-1.0, 5.0], 1.0).unwrap();
        assert_eq!(samples(&b), vec![0, 65535]);
    }

    #[test]
    fn rejects_nonpositive_white() {
        assert!(matches!(encode_pgm(1, 1, &[0.0], 0.0), Err(PgmError::BadWhiteLevel(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = SliceImage::filled(2, 2, 0.5);
        let err = write_image_pgm(&img, "/nonexistent-dir/x.pgm", 1.0).unwrap_err();
        assert!(matches!(err, PgmError::Io { .. }));
    }

    #[test]
    fn montage_layout() {
        let a = SliceImage::filled(2, 2, 1.0);
        let b = SliceImage::filled(2, 2, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_montage(&[vec![&a, &b], vec![&b, &a]], &path, 1.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 5\n65535\n"));
        let s = samples(&bytes);
        assert_eq!(s.len(), 25);
        assert_eq!(s[0], 65535);
        assert_eq!(s[2], 0); // gutter
        assert_eq!(s[3], 0);
        assert_eq!(s[3 * 5 + 3], 65535);
    }
}
