use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{DataError, ImageDataset, TabularDataset};

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PIXELS;
const CIFAR_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decodes one CIFAR-10 binary batch file: 3073-byte records of a label byte
/// followed by the red, green and blue planes (row-major 32x32 each).
/// Pixels are scaled to `[0, 1]` and re-laid out channel-last.
pub fn load_cifar10_file(path: &Path) -> Result<ImageDataset, DataError> {
    let bytes = read(path)?;
    let records = bytes.len() / CIFAR_RECORD;
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            record: records,
            got: rem,
            want: CIFAR_RECORD,
        });
    }
    let mut pixels = Vec::with_capacity(records * 3 * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(records);
    for (idx, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DataError::BadHeader {
                path: path.display().to_string(),
                message: format!("record {idx} has label byte {label}"),
            });
        }
        labels.push(label);
        let planes = &record[1..];
        for p in 0..CIFAR_PIXELS {
            for c in 0..3 {
                pixels.push(planes[c * CIFAR_PIXELS + p] as f32 / 255.0);
            }
        }
    }
    ImageDataset::new(
        pixels,
        (CIFAR_SIDE, CIFAR_SIDE),
        3,
        labels,
        CIFAR_CLASSES,
        format!("cifar10:{}", path.display()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads the standard `data_batch_{1..5}.bin` (train) or `test_batch.bin`
/// files from a CIFAR-10 binary directory.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<ImageDataset, DataError> {
    let files: Vec<String> = match split {
        CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        CifarSplit::Test => vec!["test_batch.bin".to_string()],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in &files {
        let part = load_cifar10_file(&dir.join(name))?;
        pixels.extend_from_slice(part.pixels());
        labels.extend_from_slice(part.labels());
    }
    ImageDataset::new(
        pixels,
        (CIFAR_SIDE, CIFAR_SIDE),
        3,
        labels,
        CIFAR_CLASSES,
        format!("cifar10:{}:{split:?}", dir.display()),
    )
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::BadHeader {
            path: path.display().to_string(),
            message: "header shorter than expected".into(),
        })
}

/// Reads an MNIST-style IDX image/label file pair into `N x H x W x 1` images
/// scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<ImageDataset, DataError> {
    let img = read(images)?;
    let lab = read(labels)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadHeader {
            path: images.display().to_string(),
            message: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadHeader {
            path: labels.display().to_string(),
            message: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let label_count = be_u32(&lab, 4, labels)? as usize;
    if count != label_count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let per_image = rows * cols;
    let body = &img[16..];
    if body.len() != count * per_image {
        return Err(DataError::Truncated {
            path: images.display().to_string(),
            record: body.len() / per_image.max(1),
            got: body.len(),
            want: count * per_image,
        });
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() != count {
        return Err(DataError::Truncated {
            path: labels.display().to_string(),
            record: label_bytes.len(),
            got: label_bytes.len(),
            want: count,
        });
    }
    let labels_vec: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels_vec.iter().max().map_or(10, |&m| (m + 1).max(10));
    let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
    ImageDataset::new(
        pixels,
        (rows, cols),
        1,
        labels_vec,
        class_count,
        format!("mnist:{}", images.display()),
    )
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    /// Zero-based column index.
    Index(usize),
    /// Last column.
    Last,
    /// Header name (requires a header row).
    Name(String),
}

/// Numeric CSV with one categorical label column. Labels are numbered by
/// first appearance; every other cell must parse as a number.
pub fn load_csv_tabular(
    path: &Path,
    label: &LabelColumn,
    has_header: bool,
) -> Result<TabularDataset, DataError> {
    let display = path.display().to_string();
    let csv_err = |row: usize, message: String| DataError::Csv {
        path: display.clone(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let label_idx = match label {
        LabelColumn::Index(i) => Some(*i),
        LabelColumn::Last => None,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(csv_err(0, format!("label column `{name}` needs a header")));
            }
            let headers = reader.headers().map_err(|e| csv_err(0, e.to_string()))?;
            Some(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| csv_err(0, format!("no column named `{name}`")))?,
            )
        }
    };
    let mut width = None;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row_no = idx + 1 + usize::from(has_header);
        let record = record.map_err(|e| csv_err(row_no, e.to_string()))?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(csv_err(
                row_no,
                format!("ragged row: {} fields, expected {w}", record.len()),
            ));
        }
        let li = label_idx.unwrap_or(w - 1);
        if li >= w {
            return Err(csv_err(row_no, format!("label column {li} out of range")));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == li {
                let next = names.len();
                let id = *lookup.entry(cell.to_string()).or_insert(next);
                if id == next {
                    names.push(cell.to_string());
                }
                labels.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    csv_err(row_no, format!("column {col}: `{cell}` is not numeric"))
                })?;
                if !v.is_finite() {
                    return Err(csv_err(row_no, format!("column {col}: non-finite value")));
                }
                rows.push(v);
            }
        }
    }
    let dim = width.map_or(0, |w| w - 1);
    TabularDataset::new(rows, dim, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend((0..3 * CIFAR_PIXELS).map(fill));
        rec
    }

    #[test]
    fn cifar_framing_labels_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = cifar_record(7, |_| 255);
        // Second record: red plane 10, green 20, blue 30.
        bytes.extend(cifar_record(2, |i| [10, 20, 30][i / CIFAR_PIXELS]));
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_file(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 2]);
        assert_eq!(ds.spatial(), (32, 32));
        assert!(ds.image(0).iter().all(|&v| v == 1.0));
        let px = &ds.image(1)[..3];
        assert_eq!(px, &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn cifar_rejects_truncation_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        let mut bytes = cifar_record(1, |_| 0);
        bytes.truncate(CIFAR_RECORD - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cifar10_file(&path),
            Err(DataError::Truncated { record: 0, .. })
        ));
        fs::write(&path, cifar_record(12, |_| 0)).unwrap();
        assert!(matches!(
            load_cifar10_file(&path),
            Err(DataError::BadHeader { .. })
        ));
    }

    fn idx_images(count: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(body);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn mnist_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut body = vec![0u8; 2 * 4 * 3];
        body[0] = 128;
        fs::write(&ip, idx_images(2, 4, 3, &body)).unwrap();
        fs::write(&lp, idx_labels(&[3, 9])).unwrap();
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.spatial(), (4, 3));
        assert_eq!(ds.channels(), 1);
        assert!((ds.image(0)[0] - 0.50196).abs() < 1e-5);
        assert_eq!(ds.labels(), &[3, 9]);
    }

    #[test]
    fn mnist_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, idx_images(2, 2, 2, &[0; 8])).unwrap();
        fs::write(&lp, idx_labels(&[1])).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 1
            })
        ));
        // Swapped files: label magic where images are expected.
        assert!(matches!(
            load_mnist_idx(&lp, &ip),
            Err(DataError::BadHeader { .. })
        ));
    }

    #[test]
    fn csv_labels_by_first_appearance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "x,y,class\n1.0,2,a\n3,4.5,b\n-1,0,a").unwrap();
        let ds = load_csv_tabular(&path, &LabelColumn::Name("class".into()), true).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.row(1), &[3.0, 4.5]);
        assert_eq!(ds.class_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1,2,a\n3,b\n").unwrap();
        match load_csv_tabular(&path, &LabelColumn::Last, false) {
            Err(DataError::Csv { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("ragged"));
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "label,f\nx,1.5\ny,abc\n").unwrap();
        match load_csv_tabular(&path, &LabelColumn::Index(0), true) {
            Err(DataError::Csv { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
