//! Dataset loading, preprocessing and synthetic fixtures.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::RandomSource;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Attempts at placing blob centers before [`make_blobs`] gives up.
pub const BLOB_CENTER_RETRIES: usize = 1000;

/// Per-feature bounds recorded by [`minmax_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Samples are rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub labels: Option<Vec<usize>>,
    /// Number of classes; 0 when unlabeled.
    pub n_classes: usize,
    pub scaler: Option<ScalingRecord>,
    /// `(height, width)` for image data loaded from IDX files.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: DenseMatrix, labels: Option<Vec<usize>>) -> Result<Self> {
        let n_classes = match &labels {
            Some(l) => {
                if l.len() != x.rows() {
                    return Err(Error::Consistency(format!(
                        "{} labels for {} samples",
                        l.len(),
                        x.rows()
                    )));
                }
                l.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        Ok(Self {
            x,
            labels,
            n_classes,
            scaler: None,
            image_shape: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn c(&self) -> usize {
        self.n_classes
    }

    /// Subset in the given order; class count is preserved.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            n_classes: self.n_classes,
            scaler: self.scaler.clone(),
            image_shape: self.image_shape,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

struct ByteCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::io(
                self.path,
                io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!(
                        "truncated: need {len} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn be_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads an IDX image file (and optional label file), flattening each image
/// row-wise and dividing pixel bytes by 255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = read_all(images_path)?;
    let mut cur = ByteCursor {
        path: images_path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.be_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.into(),
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = cur.be_u32()? as usize;
    let height = cur.be_u32()? as usize;
    let width = cur.be_u32()? as usize;
    let d = height * width;
    let pixels = cur.take(count * d)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let x = DenseMatrix::from_vec(count, d, data)?;

    let labels = match labels_path {
        Some(lp) => {
            let lbytes = read_all(lp)?;
            let mut lcur = ByteCursor {
                path: lp,
                bytes: &lbytes,
                pos: 0,
            };
            let magic = lcur.be_u32()?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::Format {
                    path: lp.into(),
                    msg: format!(
                        "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
                    ),
                });
            }
            let lcount = lcur.be_u32()? as usize;
            if lcount != count {
                return Err(Error::Consistency(format!(
                    "{} has {count} images but {} has {lcount} labels",
                    images_path.display(),
                    lp.display()
                )));
            }
            Some(lcur.take(lcount)?.iter().map(|&b| b as usize).collect())
        }
        None => None,
    };
    let mut ds = Dataset::new(x, labels)?;
    ds.image_shape = Some((height, width));
    Ok(ds)
}

/// Encodes images as an IDX file body. `pixels` is `count * height * width`
/// bytes, image-major and row-major within an image.
pub fn encode_idx_images(pixels: &[u8], count: usize, height: usize, width: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), count * height * width);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an image dataset back to IDX, quantizing `round(v * 255)`.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let (h, w) = dataset
        .image_shape
        .ok_or_else(|| Error::Unsupported("dataset has no image shape".into()))?;
    let pixels: Vec<u8> = dataset
        .x
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(images_path, encode_idx_images(&pixels, dataset.n(), h, w))
        .map_err(|e| Error::io(images_path, e))?;
    if let (Some(lp), Some(labels)) = (labels_path, &dataset.labels) {
        let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        fs::write(lp, encode_idx_labels(&bytes)).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}

/// Reads a numeric CSV. A first row containing any non-numeric cell is
/// treated as a header. With `has_labels`, the last column holds class ids.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if i == 0 && record.iter().any(|c| c.trim().parse::<f64>().is_err()) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!(
                        "ragged row at line {line}: {} fields, expected {w}",
                        record.len()
                    ),
                });
            }
            _ => {}
        }
        let n_features = if has_labels {
            record
                .len()
                .checked_sub(1)
                .filter(|&f| f > 0)
                .ok_or_else(|| Error::Format {
                    path: path.into(),
                    msg: format!("line {line}: need at least one feature besides the label"),
                })?
        } else {
            record.len()
        };
        let mut row = Vec::with_capacity(n_features);
        for (col, cell) in record.iter().take(n_features).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                row: line,
                col: col + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            row.push(v);
        }
        if has_labels {
            let cell = record[n_features].trim();
            let label: usize = cell.parse().map_err(|_| Error::Parse {
                path: path.into(),
                row: line,
                col: n_features + 1,
                msg: format!("not a class id: {cell:?}"),
            })?;
            labels.push(label);
        }
        rows.push(row);
    }
    let x = DenseMatrix::from_rows(&rows)?;
    Dataset::new(x, has_labels.then_some(labels))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            msg: format!("{other:?}"),
        },
    }
}

/// Per-feature MinMax to [0, 1]; constant features map to 0.
pub fn minmax_scale(dataset: &Dataset) -> Dataset {
    let (n, d) = dataset.x.shape();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, &v) in dataset.x.row(i).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    let mut x = dataset.x.clone();
    for i in 0..n {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            let range = max[j] - min[j];
            *v = if range > 0.0 {
                ((*v - min[j]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Dataset {
        x,
        labels: dataset.labels.clone(),
        n_classes: dataset.n_classes,
        scaler: Some(ScalingRecord { min, max }),
        image_shape: dataset.image_shape,
    }
}

/// Seeded shuffle split into `(train, test)` index lists; train takes
/// `floor(n * train_fraction)`.
pub fn split_indices(
    n: usize,
    train_fraction: f64,
    rng: &mut RandomSource,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::arg(format!(
            "split of {n} samples at {train_fraction} leaves an empty side"
        )));
    }
    let mut perm = rng.permutation(n);
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    rng: &mut RandomSource,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.n(), train_fraction, rng)?;
    Ok((dataset.select(&train), dataset.select(&test)))
}

/// Indices of a uniform subset of size `round(n * fraction)`.
pub fn subsample_indices(n: usize, fraction: f64, rng: &mut RandomSource) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let size = (n as f64 * fraction).round() as usize;
    if size == 0 {
        return Err(Error::arg(format!(
            "subsample of {n} samples at {fraction} is empty"
        )));
    }
    let mut perm = rng.permutation(n);
    perm.truncate(size);
    Ok(perm)
}

pub fn subsample(dataset: &Dataset, fraction: f64, rng: &mut RandomSource) -> Result<Dataset> {
    let idx = subsample_indices(dataset.n(), fraction, rng)?;
    Ok(dataset.select(&idx))
}

/// `c` unit-variance Gaussian clusters in `d` dimensions with centers at
/// least `separation` apart. Sample `i` belongs to class `i % c`.
///
/// Centers are drawn from `N(0, separation^2 I)` and redrawn as a whole until
/// every pair is far enough apart, up to [`BLOB_CENTER_RETRIES`] attempts.
pub fn make_blobs(
    n: usize,
    d: usize,
    c: usize,
    separation: f64,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if c == 0 || n < c || d == 0 || separation.is_nan() || separation <= 0.0 {
        return Err(Error::arg(format!(
            "make_blobs needs n >= c >= 1, d >= 1, separation > 0 (got n={n}, d={d}, c={c}, separation={separation})"
        )));
    }
    let center_sd = separation;
    let mut centers = None;
    for _ in 0..BLOB_CENTER_RETRIES {
        let mut cand = rng.gaussian_matrix(c, d);
        cand.scale(center_sd);
        let ok = (0..c).all(|a| {
            (a + 1..c).all(|b| sq_dist(cand.row(a), cand.row(b)) >= separation * separation)
        });
        if ok {
            centers = Some(cand);
            break;
        }
    }
    let centers = centers.ok_or_else(|| {
        Error::Generation(format!(
            "could not place {c} centers {separation} apart in {d} dimensions after {BLOB_CENTER_RETRIES} attempts"
        ))
    })?;
    let mut x = rng.gaussian_matrix(n, d);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    for (i, &l) in labels.iter().enumerate() {
        for (v, &m) in x.row_mut(i).iter_mut().zip(centers.row(l)) {
            *v += m;
        }
    }
    let mut ds = Dataset::new(x, Some(labels))?;
    ds.n_classes = c;
    Ok(ds)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
