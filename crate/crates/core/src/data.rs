//! Labeled datasets: MNIST IDX files, CSV feature tables and synthetic
//! Gaussian blobs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, tags};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix plus observed labels, with optional ground truth.
///
/// `clean_labels` is the true label of every sample when known and
/// `flip_mask[n]` records whether the observed label differs from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    observed_labels: Vec<usize>,
    clean_labels: Option<Vec<usize>>,
    flip_mask: Option<Vec<bool>>,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset whose observed labels are also its clean labels.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let clean = labels.clone();
        Self::with_clean_labels(features, labels, Some(clean), num_classes)
    }

    /// Builds a dataset with no ground-truth labels (observed labels only).
    pub fn unlabeled_truth(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        Self::with_clean_labels(features, labels, None, num_classes)
    }

    /// Builds a dataset from observed and clean labels; the flip mask is derived.
    pub fn with_clean_labels(
        features: Array2<f64>,
        observed_labels: Vec<usize>,
        clean_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::arg("num_classes must be positive"));
        }
        let n = features.nrows();
        if n == 0 {
            return Err(Error::arg("dataset must contain at least one sample"));
        }
        if observed_labels.len() != n {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                n,
                observed_labels.len()
            )));
        }
        check_label_range(&observed_labels, num_classes)?;
        let flip_mask = match &clean_labels {
            Some(clean) => {
                if clean.len() != n {
                    return Err(Error::Consistency(format!(
                        "{} observed labels but {} clean labels",
                        n,
                        clean.len()
                    )));
                }
                check_label_range(clean, num_classes)?;
                Some(
                    observed_labels
                        .iter()
                        .zip(clean)
                        .map(|(o, c)| o != c)
                        .collect(),
                )
            }
            None => None,
        };
        Ok(Self {
            features,
            observed_labels,
            clean_labels,
            flip_mask,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    pub fn flip_mask(&self) -> Option<&[bool]> {
        self.flip_mask.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Same features and clean labels, new observed labels.
    pub fn relabeled(&self, observed_labels: Vec<usize>) -> Result<Self> {
        Self::with_clean_labels(
            self.features.clone(),
            observed_labels,
            self.clean_labels.clone(),
            self.num_classes,
        )
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::arg(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let features = self.features.select(Axis(0), indices);
        let observed = indices.iter().map(|&i| self.observed_labels[i]).collect();
        let clean = self
            .clean_labels
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Self::with_clean_labels(features, observed, clean, self.num_classes)
    }

    /// The first `n` samples (or all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn check_label_range(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::Validation(format!(
            "label {l} at sample {i} is outside [0, {}]",
            num_classes - 1
        )));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, offset + 4, bytes.len()))
}

fn truncated(path: &Path, needed: usize, actual: usize) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("file truncated: need {needed} bytes, have {actual}"),
        ),
    )
}

/// Loads an MNIST-style IDX image/label pair.
///
/// Pixels are divided by 255 and flattened row-major, so `d = rows * cols`.
/// The dataset is noise-free: clean labels equal observed labels.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.into(),
            expected: format!("magic {IDX_IMAGES_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.into(),
            expected: format!("magic {IDX_LABELS_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }

    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!(
            "image file holds {n} images but label file holds {n_labels} labels"
        )));
    }

    let d = rows * cols;
    let needed = 16 + n * d;
    if images.len() < needed {
        return Err(truncated(images_path, needed, images.len()));
    }
    if labels.len() < 8 + n {
        return Err(truncated(labels_path, 8 + n, labels.len()));
    }

    let pixels: Vec<f64> = images[16..needed].iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Array2::from_shape_vec((n, d), pixels)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&l| l as usize).collect();
    Dataset::new(features, labels, 10)
}

/// Loads the standard four MNIST files from a directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Loads a CSV table with a header row. Every column other than
/// `label_column` is a numeric feature, kept in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Validation(format!("no column named {label_column:?}")))?;
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1, so data row r sits on line r + 2
        let line = row + 2;
        for (i, name) in &feature_cols {
            let cell = record.get(*i).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line,
                column: name.clone(),
                message: format!("{cell:?} is not a number"),
            })?;
            values.push(v);
        }
        let cell = record.get(label_idx).unwrap_or("");
        let label: i64 = cell.trim().parse().map_err(|_| Error::Parse {
            row: line,
            column: label_column.to_string(),
            message: format!("{cell:?} is not an integer label"),
        })?;
        if label < 0 || label as usize >= num_classes {
            return Err(Error::Validation(format!(
                "label {label} on line {line} is outside [0, {}]",
                num_classes.saturating_sub(1)
            )));
        }
        labels.push(label as usize);
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, feature_cols.len()), values)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    Dataset::new(features, labels, num_classes)
}

/// Writes features as `f0..f{d-1}` followed by the observed label column.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (row, &label) in ds.features.rows().into_iter().zip(&ds.observed_labels) {
        let mut line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        line.push(label.to_string());
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blob centre for class `c`: `±separation * e_{c mod d}`, the sign flipping
/// every `d` classes and the radius growing by `separation` every `2d`
/// classes, plus a seeded jitter orthogonal to that axis of norm at most
/// `0.1 * separation`.
fn blob_centers(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, tags::DATA, 0);
    let mut centers = Array2::zeros((num_classes, dim));
    for c in 0..num_classes {
        let axis = c % dim;
        let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
        let ring = (c / (2 * dim)) as f64;
        centers[[c, axis]] = sign * separation * (1.0 + ring);

        if dim > 1 {
            let mut jitter: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            jitter[axis] = 0.0;
            let norm = jitter.dot(&jitter).sqrt();
            if norm > 0.0 {
                let radius = 0.1 * separation * rng.random::<f64>();
                jitter *= radius / norm;
                let mut row = centers.row_mut(c);
                row += &jitter;
            }
        }
    }
    centers
}

/// Isotropic unit-variance Gaussian blobs, `per_class` samples per class,
/// ordered class by class.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || dim < 1 || !(separation > 0.0) {
        return Err(Error::arg(format!(
            "make_blobs needs C >= 2, m >= 1, d >= 1, separation > 0; got C={num_classes}, m={per_class}, d={dim}, separation={separation}"
        )));
    }
    let centers = blob_centers(num_classes, dim, separation, seed);
    let mut rng = rng::stream(seed, tags::DATA, 1);
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for i in 0..per_class {
            let r = c * per_class + i;
            for j in 0..dim {
                features[[r, j]] = centers[[c, j]] + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// Seeded shuffled partition. The first part receives `floor(N * train_fraction)`
/// samples, the second the rest.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!("train_fraction {train_fraction} not in (0,1)")));
    }
    let n_first = (n as f64 * train_fraction).floor() as usize;
    if n_first == 0 || n_first == n {
        return Err(Error::arg(format!(
            "fraction {train_fraction} of {n} samples leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, tags::SPLIT, 0));
    let (a, b) = idx.split_at(n_first);
    Ok((ds.subset(a)?, ds.subset(b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn idx_images(n: u32, rows: u32, cols: u32, pixel: u8) -> Vec<u8> {
        let mut v = vec![0, 0, 8, 3];
        for x in [n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat(pixel).take((n * rows * cols) as usize));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 8, 1];
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_zero_and_full_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &idx_images(1, 28, 28, 0), &idx_labels(&[3]));
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (1, 784, 10));
        assert!(ds.features().iter().all(|&v| v == 0.0));
        assert_eq!(ds.observed_labels(), &[3]);
        assert_eq!(ds.clean_labels(), Some(&[3usize][..]));

        let (ip, lp) = write_pair(dir.path(), &idx_images(1, 28, 28, 255), &idx_labels(&[9]));
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert!(ds.features().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_bad_magic_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = idx_images(1, 2, 2, 1);
        img[3] = 0x01;
        let (ip, lp) = write_pair(dir.path(), &img, &idx_labels(&[0]));
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }), "{msg}");
        assert!(msg.contains("0x00000803") && msg.contains("0x00000801"), "{msg}");
    }

    #[test]
    fn idx_count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &idx_images(2, 2, 2, 1), &idx_labels(&[0]));
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Consistency(_))));

        let mut img = idx_images(2, 2, 2, 1);
        img.truncate(img.len() - 1);
        let (ip, lp) = write_pair(dir.path(), &img, &idx_labels(&[0, 1]));
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_minimal_and_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "f0,f1,label\n0.5,1,0\n2,3.25,1\n-1,0,0\n").unwrap();
        let ds = load_csv(&p, "label", 2).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.features()[[1, 1]], 3.25);
        assert_eq!(ds.observed_labels(), &[0, 1, 0]);

        std::fs::write(&p, "f0,label\n1,5\n").unwrap();
        assert!(matches!(load_csv(&p, "label", 3), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_non_numeric_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "f0,f1,label\n1,2,0\n1,abc,1\n").unwrap();
        match load_csv(&p, "label", 2) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "f1");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_twenty_features_many_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("latent.csv");
        let mut text: Vec<String> = vec![(0..20).map(|j| format!("z{j}")).chain(["cell_type".into()]).collect::<Vec<_>>().join(",")];
        for r in 0..31 {
            let mut row: Vec<String> = (0..20).map(|j| format!("{}", (r * j) as f64 * 0.01)).collect();
            row.push(r.to_string());
            text.push(row.join(","));
        }
        std::fs::write(&p, text.join("\n")).unwrap();
        let ds = load_csv(&p, "cell_type", 31).unwrap();
        assert_eq!((ds.dim(), ds.num_classes(), ds.len()), (20, 31, 31));
    }

    #[test]
    fn blobs_counts_and_determinism() {
        let a = make_blobs(2, 5, 2, 10.0, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.observed_labels().iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(a.observed_labels().iter().filter(|&&l| l == 1).count(), 5);
        let b = make_blobs(2, 5, 2, 10.0, 7).unwrap();
        let bits = |d: &Dataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn blob_centers_distinct_and_jitter_bounded() {
        let sep = 8.0;
        let c = blob_centers(9, 2, sep, 3);
        for i in 0..9 {
            for j in (i + 1)..9 {
                let d = (&c.row(i) - &c.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!(d > 0.5 * sep, "centres {i} and {j} too close: {d}");
            }
        }
        let c1 = blob_centers(1 + 1, 3, sep, 5);
        let mut off_axis = c1.row(0).to_owned();
        off_axis[0] = 0.0;
        assert!(off_axis.dot(&off_axis).sqrt() <= 0.1 * sep + 1e-12);
    }

    #[test]
    fn blobs_reject_bad_arguments() {
        assert!(make_blobs(1, 5, 2, 1.0, 0).is_err());
        assert!(make_blobs(2, 0, 2, 1.0, 0).is_err());
        assert!(make_blobs(2, 5, 0, 1.0, 0).is_err());
        assert!(make_blobs(2, 5, 2, 0.0, 0).is_err());
    }

    #[test]
    fn split_sizes_and_rounding() {
        let ds = make_blobs(2, 5, 2, 10.0, 7).unwrap();
        let (a, b) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((a, b), (a2, b2));

        let three = ds.head(3).unwrap();
        let (a, b) = split(&three, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 2));

        let two = ds.head(2).unwrap();
        assert!(split(&two, 0.4, 1).is_err());
        assert!(split(&two, 1.0, 1).is_err());
    }

    #[test]
    fn split_carries_ground_truth() {
        let base = make_blobs(3, 4, 2, 5.0, 1).unwrap();
        let mut noisy = base.observed_labels().to_vec();
        noisy[0] = (noisy[0] + 1) % 3;
        let ds = base.relabeled(noisy).unwrap();
        let (a, b) = split(&ds, 0.5, 2).unwrap();
        let flips = a.flip_mask().unwrap().iter().chain(b.flip_mask().unwrap()).filter(|&&f| f).count();
        assert_eq!(flips, 1);
    }

    #[test]
    fn constructor_checks_invariants() {
        let x = array![[0.0], [1.0]];
        assert!(Dataset::new(x.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(x.clone(), vec![0], 2).is_err());
        let ds = Dataset::with_clean_labels(x, vec![0, 1], Some(vec![1, 1]), 2).unwrap();
        assert_eq!(ds.flip_mask(), Some(&[true, false][..]));
    }
}
