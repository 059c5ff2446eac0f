//! IDX (MNIST) and CSV dataset ingestion.
//!
//! CSV layout: a header row, one column named `label` holding the integer
//! class id, every other column a real-valued feature in header order.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_owned(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(header..header + len).ok_or_else(|| Error::Truncated {
        path: path.to_owned(),
        needed: header + len,
        found: bytes.len(),
    })
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;

    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;

    if n_images != n_labels {
        return Err(Error::LengthMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixels = body(&images, 16, n_images * dim, images_path)?;
    let label_bytes = body(&labels, 8, n_labels, labels_path)?;

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&y| usize::from(y)).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, labels, dim, class_count)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Csv(format!("{}: no `label` column", path.display())))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Csv(format!("{}: no feature columns", path.display())));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = row + 2;
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                let y = field
                    .parse::<usize>()
                    .map_err(|_| Error::Csv(format!("{}:{line}: bad label {field:?}", path.display())))?;
                labels.push(y);
            } else {
                let x = field
                    .parse::<f64>()
                    .map_err(|_| Error::Csv(format!("{}:{line}: bad feature {field:?}", path.display())))?;
                features.push(x);
            }
        }
    }
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, labels, dim, class_count)
}

/// Writes a dataset in the CSV layout accepted by [`load_csv`].
pub fn write_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Csv(e.to_string()))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for (x, y) in dataset.iter() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write_pair(dir: &TempDir, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn reads_small_pair() {
        let dir = TempDir::new().unwrap();
        let pixels: Vec<u8> = vec![0, 255, 51, 102, 10, 20, 30, 40];
        let (ip, lp) = write_pair(
            &dir,
            &idx_images(2, 2, 2, &pixels),
            &idx_labels(IDX_LABELS_MAGIC, &[3, 9]),
        );
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.class_count(), 10);
        assert_eq!(ds.sample(0), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn wrong_label_magic() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(&dir, &idx_images(1, 1, 1, &[0]), &idx_labels(IDX_IMAGES_MAGIC, &[0]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { found: 0x803, .. })));
    }

    #[test]
    fn count_mismatch() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(
            &dir,
            &idx_images(10, 1, 1, &[0; 10]),
            &idx_labels(IDX_LABELS_MAGIC, &[0; 9]),
        );
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::LengthMismatch { images: 10, labels: 9 })
        ));
    }

    #[test]
    fn truncated_images() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(
            &dir,
            &idx_images(2, 2, 2, &[0; 5]),
            &idx_labels(IDX_LABELS_MAGIC, &[0, 1]),
        );
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));
        let (ip, lp) = write_pair(&dir, &[0, 0, 8], &idx_labels(IDX_LABELS_MAGIC, &[0]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));
    }

    #[test]
    fn csv_roundtrip_and_label_column_anywhere() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,label,b\n0.5,1,2\n-1,0,3.25\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.sample(1), &[-1.0, 3.25]);

        let out = dir.path().join("e.csv");
        write_csv(&ds, &out).unwrap();
        assert_eq!(load_csv(&out).unwrap(), ds);
    }

    #[test]
    fn csv_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Csv(_))));
        fs::write(&path, "a,label\nx,2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Csv(_))));
    }
}
