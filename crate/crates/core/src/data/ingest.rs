//! IDX and CSV readers.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

struct IdxReader<'a> {
    name: String,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(out)
            }
            None => Err(Error::data(
                &self.name,
                format!(
                    "truncated file: needed {n} bytes for {what} at offset {}, file has {}",
                    self.offset,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32_be("magic number")?;
        if magic != expected {
            return Err(Error::data(
                &self.name,
                format!("wrong magic 0x{magic:08x} at offset 0, expected 0x{expected:08x}"),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX3 image file; returns `(count, rows*cols, pixels in [0,1])`.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut r = IdxReader {
        name: path.display().to_string(),
        bytes: &bytes,
        offset: 0,
    };
    r.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::data(&r.name, "image dimensions must be positive"));
    }
    let pixels = r.take(count * dim, "pixel data")?;
    Ok((
        count,
        dim,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    ))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let mut r = IdxReader {
        name: path.display().to_string(),
        bytes: &bytes,
        offset: 0,
    };
    r.expect_magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_be("label count")? as usize;
    let labels = r.take(count, "label data")?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair. `num_classes` is `1 + max label`, and at
/// least 2.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, dim, pixels) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::data(
            labels_path.display().to_string(),
            format!(
                "count mismatch at offset 4: {} labels for {count} images",
                labels.len()
            ),
        ));
    }
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(pixels, labels, num_classes, dim)
}

/// Loads a numeric CSV with a header row. Every column other than
/// `label_column` is a feature, in file order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::data(&name, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(&name, format!("line 1: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::data(&name, format!("label column \"{label_column}\" not found")))?;
    let width = headers.len();
    let feature_dim = width - 1;
    if feature_dim == 0 {
        return Err(Error::data(&name, "no feature columns"));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(&name, format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::data(
                &name,
                format!(
                    "line {line}: ragged row with {} fields, expected {width}",
                    record.len()
                ),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let label: usize = cell.parse().map_err(|_| {
                    Error::data(
                        &name,
                        format!("line {line}: label \"{cell}\" is not a class index"),
                    )
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| {
                        Error::data(
                            &name,
                            format!(
                                "line {line}: non-numeric cell \"{cell}\" in column \"{}\"",
                                &headers[col]
                            ),
                        )
                    })?;
                inputs.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::data(&name, "no data rows"));
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(inputs, labels, num_classes, feature_dim)
}
