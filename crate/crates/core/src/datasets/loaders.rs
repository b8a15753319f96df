use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::set::{Label, LabeledSet, Space};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse comma-separated rows of decimal numbers. Column `label_column` holds
/// the label: class indices when every label is a non-negative integer,
/// scalar regression targets otherwise.
pub fn parse_csv(text: &str, label_column: usize, has_header: bool) -> Result<LabeledSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                column: 0,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if label_column >= record.len() {
            return Err(Error::Index(format!(
                "label column {label_column} with {} fields on line {line}",
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                column: j + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if j == label_column {
                raw_labels.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("csv without data rows".into()));
    }
    let integral = raw_labels
        .iter()
        .all(|v| *v >= 0.0 && v.fract() == 0.0 && *v < u32::MAX as f64);
    let labels = raw_labels
        .into_iter()
        .map(|v| {
            if integral {
                Label::Class(v as usize)
            } else {
                Label::Target(vec![v])
            }
        })
        .collect();
    LabeledSet::from_rows(&rows, labels, Space::Input)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: usize, has_header: bool) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, label_column, has_header)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::BinaryParse {
            offset,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::BinaryParse {
            offset: 0,
            message: format!("magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

/// Parse an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::Shape(format!("{n} images but {n_labels} labels")));
    }
    let pixels = rows * cols;
    let need = 16 + n * pixels;
    if images.len() < need {
        return Err(Error::BinaryParse {
            offset: images.len(),
            message: format!("image payload truncated, expected {need} bytes"),
        });
    }
    if labels.len() < 8 + n {
        return Err(Error::BinaryParse {
            offset: labels.len(),
            message: format!("label payload truncated, expected {} bytes", 8 + n),
        });
    }
    let data = images[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels[8..8 + n]
        .iter()
        .map(|&b| Label::Class(b as usize))
        .collect();
    LabeledSet::new(Matrix::new(n, pixels, data)?, labels, Space::Input)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels)
}
