//! Dataset ingestion, host-side pretraining, and mesh deployment.
//!
//! This module covers the two stages that happen before on-chip recovery:
//!
//! 1. *Pretraining*: [`pretrain_mlp`] trains a bias-free dense MLP with
//!    clipped-ReLU hidden activations and softmax cross-entropy by plain
//!    mini-batch SGD with hand-derived gradients. The result is a
//!    [`PretrainedModel`] that can be saved to and loaded from a small flat
//!    binary format.
//! 2. *Deployment*: [`deploy`] factors every dense weight through an SVD,
//!    maps the factors onto mesh phases (clamping singular values that
//!    exceed the representable bound, with a warning), draws the active
//!    mask, and freezes one hardware-noise realization. Without noise and
//!    without clamping the deployed network reproduces the dense logits to
//!    within 1e-6.
//!
//! Loaders ingest IDX image/label containers (big-endian, magic-checked)
//! and labeled numeric CSV files, both scaled into `[0, 1]`; a seeded
//! Gaussian-cluster generator covers experiments whose original data is
//! not redistributable. All loaders are deterministic: identical files
//! produce identical datasets, byte for byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ledger::PowerLedger;
use crate::linalg::{jacobi_svd, Mat};
use crate::mesh::{decompose_orthogonal, phases_from_singular, MeshLayer};
use crate::network::{argmax, relu_clip, Batch, OnnModel, DEFAULT_CEILING};
use crate::noise::{Adjacency, NoiseRealization, NoiseSpec};
use crate::optim::ActiveMask;
use crate::{CoreError, Real, Result};

/// Mini-batch size used by host-side pretraining.
const PRETRAIN_BATCH: usize = 32;

/// Seed for the fidelity probe drawn during deployment.
const FIDELITY_PROBE_SEED: u64 = 0xF1DE;

/// A labeled dataset with features scaled to `[0, 1]` and a disjoint,
/// covering train/test split.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    name: String,
    features: Mat<T>,
    labels: Vec<usize>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    n_classes: usize,
    image_side: Option<usize>,
}

impl<T: Real> Dataset<T> {
    /// Assembles a dataset, checking every invariant: one label per row,
    /// labels within the class count, and the split indices covering each
    /// row exactly once.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        features: Mat<T>,
        labels: Vec<usize>,
        train_idx: Vec<usize>,
        test_idx: Vec<usize>,
        n_classes: usize,
        image_side: Option<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(CoreError::Validation(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(CoreError::Validation(format!(
                "label {} outside the {} classes",
                bad, n_classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in train_idx.iter().chain(test_idx.iter()) {
            if i >= n {
                return Err(CoreError::Validation(format!(
                    "split index {} outside {} samples",
                    i, n
                )));
            }
            if seen[i] {
                return Err(CoreError::Validation(format!(
                    "split index {} appears more than once",
                    i
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(CoreError::Validation(
                "train/test split does not cover every sample".into(),
            ));
        }
        if let Some(side) = image_side {
            if side * side != features.cols() {
                return Err(CoreError::Validation(format!(
                    "image side {} does not square to {} features",
                    side,
                    features.cols()
                )));
            }
        }
        Ok(Dataset { name, features, labels, train_idx, test_idx, n_classes, image_side })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Mat<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_idx(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_idx(&self) -> &[usize] {
        &self.test_idx
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Side length when every feature row is a square image.
    pub fn image_side(&self) -> Option<usize> {
        self.image_side
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Gathers the given rows into a batch.
    pub fn make_batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        if indices.is_empty() {
            return Err(CoreError::Argument("batch needs at least one sample".into()));
        }
        let mut inputs = Mat::zeros(indices.len(), self.n_features());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(CoreError::Argument(format!(
                    "sample index {} outside {} samples",
                    i,
                    self.len()
                )));
            }
            inputs.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels)
    }

    /// Draws a mini-batch from the training split without replacement
    /// (capped at the split size).
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Batch<T>> {
        if self.train_idx.is_empty() {
            return Err(CoreError::Argument("training split is empty".into()));
        }
        let k = size.clamp(1, self.train_idx.len());
        let picks: Vec<usize> = rand::seq::index::sample(rng, self.train_idx.len(), k)
            .iter()
            .map(|i| self.train_idx[i])
            .collect();
        self.make_batch(&picks)
    }

    /// Replaces the split with a seeded random one: `round(fraction·n)`
    /// samples (at least one, never all) go to the test side.
    pub fn split(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(CoreError::Argument("splitting needs at least two samples".into()));
        }
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CoreError::Argument(format!(
                "test fraction must lie in (0, 1), got {}",
                test_fraction
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut test: Vec<usize> = order[..n_test].to_vec();
        let mut train: Vec<usize> = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        self.test_idx = test;
        self.train_idx = train;
        Ok(())
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4-byte slice"))),
        None => Err(CoreError::Format(format!(
            "truncated IDX file: {} needs bytes {}..{} but the file ends at byte offset {}",
            what,
            offset,
            offset + 4,
            bytes.len()
        ))),
    }
}

/// Reads an IDX image container: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != 0x0000_0803 {
        return Err(CoreError::Format(format!(
            "bad IDX image magic 0x{:08x} at byte offset 0 (expected 0x00000803) in {}",
            magic,
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, "image count")? as usize;
    let rows = be_u32(&bytes, 8, "row count")? as usize;
    let cols = be_u32(&bytes, 12, "column count")? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| CoreError::Format("IDX header dimensions overflow".into()))?;
    if bytes.len() != 16 + pixels {
        return Err(CoreError::Format(format!(
            "IDX image data: expected {} bytes starting at byte offset 16, file ends at byte offset {}",
            pixels,
            bytes.len()
        )));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Reads an IDX label container.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, "magic")?;
    if magic != 0x0000_0801 {
        return Err(CoreError::Format(format!(
            "bad IDX label magic 0x{:08x} at byte offset 0 (expected 0x00000801) in {}",
            magic,
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, "label count")? as usize;
    if bytes.len() != 8 + n {
        return Err(CoreError::Format(format!(
            "IDX label data: expected {} bytes starting at byte offset 8, file ends at byte offset {}",
            n,
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads the four standard IDX files (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`) from a directory. Pixels are scaled to
/// `[0, 1]`; the file split becomes the train/test split.
pub fn load_idx<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let (n_train, rows, cols, train_px) = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let (n_test, t_rows, t_cols, test_px) = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if train_labels.len() != n_train || test_labels.len() != n_test {
        return Err(CoreError::Format(format!(
            "image/label counts disagree: {} train images vs {} labels, {} test images vs {} labels",
            n_train,
            train_labels.len(),
            n_test,
            test_labels.len()
        )));
    }
    if (t_rows, t_cols) != (rows, cols) {
        return Err(CoreError::Format(format!(
            "train images are {}x{} but test images are {}x{}",
            rows, cols, t_rows, t_cols
        )));
    }
    let d = rows * cols;
    let n = n_train + n_test;
    let scale = T::c(1.0 / 255.0);
    let mut data = Vec::with_capacity(n * d);
    for px in train_px.iter().chain(test_px.iter()) {
        data.push(T::c(*px as f64) * scale);
    }
    let features = Mat::from_flat(n, d, data)?;
    let labels: Vec<usize> = train_labels
        .iter()
        .chain(test_labels.iter())
        .map(|&l| l as usize)
        .collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(
        name,
        features,
        labels,
        (0..n_train).collect(),
        (n_train..n).collect(),
        n_classes,
        if rows == cols { Some(rows) } else { None },
    )
}

/// Shrinks one square image by non-overlapping average pooling.
///
/// - `side == target`: identity.
/// - `side % target == 0`: pool with kernel `side/target`.
/// - `side/target ≥ 2` otherwise: center-crop to `target·⌊side/target⌋`
///   first (28→8 crops to 24, then pools 3×3).
/// - `target < side < 2·target`: zero-pad centered to `2·target`, then
///   pool 2×2 (28→16 pads to 32).
pub fn downsample_image<T: Real>(img: &[T], side: usize, target: usize) -> Result<Vec<T>> {
    if side == 0 || target == 0 {
        return Err(CoreError::Argument("image sides must be positive".into()));
    }
    if img.len() != side * side {
        return Err(CoreError::Argument(format!(
            "image has {} pixels, expected {}x{}",
            img.len(),
            side,
            side
        )));
    }
    if target > side {
        return Err(CoreError::Argument(format!(
            "cannot downsample {}x{} up to {}x{}",
            side, side, target, target
        )));
    }
    if target == side {
        return Ok(img.to_vec());
    }
    let pool = |img: &[T], side: usize, k: usize| -> Vec<T> {
        let out_side = side / k;
        let norm = T::c(1.0 / (k * k) as f64);
        let mut out = Vec::with_capacity(out_side * out_side);
        for y in 0..out_side {
            for x in 0..out_side {
                let mut sum = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        sum += img[(y * k + dy) * side + (x * k + dx)];
                    }
                }
                out.push(sum * norm);
            }
        }
        out
    };
    if side % target == 0 {
        return Ok(pool(img, side, side / target));
    }
    let k = side / target;
    if k >= 2 {
        let cropped_side = target * k;
        let start = (side - cropped_side) / 2;
        let mut cropped = Vec::with_capacity(cropped_side * cropped_side);
        for y in 0..cropped_side {
            let row = (y + start) * side + start;
            cropped.extend_from_slice(&img[row..row + cropped_side]);
        }
        Ok(pool(&cropped, cropped_side, k))
    } else {
        // target < side < 2·target: grow to an even multiple with a zero
        // border, then halve.
        let padded_side = 2 * target;
        let offset = (padded_side - side) / 2;
        let mut padded = vec![T::zero(); padded_side * padded_side];
        for y in 0..side {
            let dst = (y + offset) * padded_side + offset;
            padded[dst..dst + side].copy_from_slice(&img[y * side..(y + 1) * side]);
        }
        Ok(pool(&padded, padded_side, 2))
    }
}

/// Applies [`downsample_image`] to every sample of a square-image dataset.
pub fn downsample<T: Real>(ds: &Dataset<T>, target: usize) -> Result<Dataset<T>> {
    let side = ds.image_side().ok_or_else(|| {
        CoreError::Argument("dataset does not carry square-image geometry".into())
    })?;
    let mut data = Vec::with_capacity(ds.len() * target * target);
    for r in 0..ds.len() {
        data.extend(downsample_image(ds.features.row(r), side, target)?);
    }
    let features = Mat::from_flat(ds.len(), target * target, data)?;
    Dataset::new(
        ds.name.clone(),
        features,
        ds.labels.clone(),
        ds.train_idx.clone(),
        ds.test_idx.clone(),
        ds.n_classes,
        Some(target),
    )
}

/// Which CSV column carries the class label.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub label_column: String,
}

fn csv_err(e: csv::Error) -> CoreError {
    match e.position() {
        Some(pos) => CoreError::Format(format!("CSV error at line {}: {}", pos.line(), e)),
        None => CoreError::Format(format!("CSV error: {}", e)),
    }
}

/// Loads a labeled numeric CSV: a header row names the columns, one of
/// which (per the schema) holds class labels. Features are min-max scaled
/// per column (constant columns map to 0); labels become indices into the
/// sorted set of distinct label strings. Row order is preserved, and the
/// whole file lands in the training split — call [`Dataset::split`] after.
pub fn load_csv<T: Real>(path: &Path, schema: &CsvSchema) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            CoreError::Schema(format!(
                "label column '{}' not found; available columns: {}",
                schema.label_column,
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    if headers.len() < 2 {
        return Err(CoreError::Schema(
            "CSV needs at least one feature column besides the label".into(),
        ));
    }
    let d = headers.len() - 1;
    let mut raw: Vec<f64> = Vec::new();
    let mut label_strings: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header line
        let record = record.map_err(csv_err)?;
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                label_strings.push(cell.to_string());
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    CoreError::Format(format!(
                        "line {}: column '{}' has non-numeric value '{}'",
                        line,
                        headers.get(j).unwrap_or("?"),
                        cell
                    ))
                })?;
                raw.push(v);
            }
        }
    }
    let n = label_strings.len();
    if n == 0 {
        return Err(CoreError::Format("CSV has a header but no data rows".into()));
    }
    let classes: Vec<String> = label_strings.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<usize> = label_strings
        .iter()
        .map(|l| classes.binary_search(l).expect("label drawn from the set"))
        .collect();
    // Per-column min-max scaling with a zero-range guard.
    for c in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..n {
            let v = raw[r * d + c];
            if !v.is_finite() {
                return Err(CoreError::Format(format!(
                    "column {} contains a non-finite value",
                    c
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for r in 0..n {
            let v = &mut raw[r * d + c];
            *v = if range == 0.0 { 0.0 } else { (*v - lo) / range };
        }
    }
    let features = Mat::from_flat(n, d, raw.into_iter().map(T::c).collect())?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, features, labels, (0..n).collect(), Vec::new(), classes.len(), None)
}

/// Seeded Gaussian class clusters in `[0, 1]^dim`: each class gets a
/// uniformly drawn center and `n_per_class` samples scattered around it
/// with the given spread (clamped back into range). Everything starts in
/// the training split.
pub fn synthetic_clusters<T: Real>(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_per_class == 0 || dim == 0 {
        return Err(CoreError::Argument("need at least one sample and one feature".into()));
    }
    if n_classes < 2 {
        return Err(CoreError::Argument("need at least two classes".into()));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(CoreError::Argument(format!("spread must be finite and nonnegative, got {}", spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in center {
                let eps: f64 = StandardNormal.sample(&mut rng);
                data.push(T::c((mu + spread * eps).clamp(0.0, 1.0)));
            }
            labels.push(c);
        }
    }
    let features = Mat::from_flat(n, dim, data)?;
    Dataset::new(
        "synthetic-clusters".into(),
        features,
        labels,
        (0..n).collect(),
        Vec::new(),
        n_classes,
        None,
    )
}

/// A bias-free dense MLP trained off-chip, ready to be factored onto
/// meshes. Layer `l` maps `arch[l] → arch[l+1]`; hidden activations are
/// clipped ReLUs with the default ceiling, the last layer emits raw logits.
#[derive(Debug, Clone)]
pub struct PretrainedModel<T> {
    arch: Vec<usize>,
    weights: Vec<Mat<T>>,
}

const MODEL_MAGIC: &[u8; 8] = b"ONNMLP01";

impl<T: Real> PretrainedModel<T> {
    /// Wraps explicit weight matrices, validating that consecutive shapes
    /// compose (`weights[l]` is `arch[l+1] × arch[l]`).
    pub fn from_weights(weights: Vec<Mat<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(CoreError::Argument("model needs at least one layer".into()));
        }
        let mut arch = vec![weights[0].cols()];
        for (l, w) in weights.iter().enumerate() {
            if w.cols() != *arch.last().expect("nonempty") {
                return Err(CoreError::Validation(format!(
                    "layer {} expects {} inputs but the previous layer emits {}",
                    l,
                    w.cols(),
                    arch.last().expect("nonempty")
                )));
            }
            arch.push(w.rows());
        }
        Ok(PretrainedModel { arch, weights })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    /// Dashed layer sizes, e.g. `"64-24-24-10"`.
    pub fn arch_string(&self) -> String {
        self.arch
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn weights(&self) -> &[Mat<T>] {
        &self.weights
    }

    /// Batched forward pass: rows of `inputs` are samples; returns logits.
    pub fn dense_forward(&self, inputs: &Mat<T>) -> Result<Mat<T>> {
        if inputs.cols() != self.arch[0] {
            return Err(CoreError::Argument(format!(
                "inputs have {} features, model expects {}",
                inputs.cols(),
                self.arch[0]
            )));
        }
        let ceiling = T::c(DEFAULT_CEILING);
        let mut cur = inputs.matmul_nt(&self.weights[0]);
        for w in &self.weights[1..] {
            for v in cur.as_mut_slice() {
                *v = relu_clip(*v, ceiling);
            }
            cur = cur.matmul_nt(w);
        }
        Ok(cur)
    }

    /// Fraction of samples whose argmax logit matches the label.
    pub fn accuracy(&self, inputs: &Mat<T>, labels: &[usize]) -> Result<T> {
        if labels.len() != inputs.rows() || labels.is_empty() {
            return Err(CoreError::Argument("need one label per sample".into()));
        }
        let logits = self.dense_forward(inputs)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| argmax(logits.row(r)) == l)
            .count();
        Ok(T::c(hits as f64 / labels.len() as f64))
    }

    /// Writes the flat binary format: an 8-byte magic, the architecture
    /// string (u32 little-endian length + UTF-8 bytes), then every weight
    /// matrix as row-major little-endian f64 in layer order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = self.arch_string();
        let mut bytes = Vec::with_capacity(16 + arch.len() + 8 * self.param_count());
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        bytes.extend_from_slice(arch.as_bytes());
        for w in &self.weights {
            for &v in w.as_slice() {
                bytes.extend_from_slice(&v.to_f64().expect("weight converts to f64").to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads the format written by [`PretrainedModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 {
            return Err(CoreError::Format(format!(
                "model file truncated at byte offset {}: shorter than the fixed header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(CoreError::Format(
                "bad model magic at byte offset 0 (expected ONNMLP01)".into(),
            ));
        }
        let arch_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let arch_end = 12 + arch_len;
        let arch_bytes = bytes.get(12..arch_end).ok_or_else(|| {
            CoreError::Format(format!(
                "model file truncated at byte offset {}: architecture string needs bytes 12..{}",
                bytes.len(),
                arch_end
            ))
        })?;
        let arch_str = std::str::from_utf8(arch_bytes)
            .map_err(|_| CoreError::Format("architecture string is not UTF-8".into()))?;
        let arch: Vec<usize> = arch_str
            .split('-')
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    CoreError::Format(format!("bad architecture component '{}' in '{}'", p, arch_str))
                })
            })
            .collect::<Result<_>>()?;
        if arch.len() < 2 || arch.iter().any(|&d| d == 0) {
            return Err(CoreError::Format(format!("unusable architecture '{}'", arch_str)));
        }
        let total: usize = arch.windows(2).map(|w| w[0] * w[1]).sum();
        if bytes.len() != arch_end + 8 * total {
            return Err(CoreError::Format(format!(
                "model file: expected {} weight bytes starting at byte offset {}, file ends at byte offset {}",
                8 * total,
                arch_end,
                bytes.len()
            )));
        }
        let mut offset = arch_end;
        let mut weights = Vec::with_capacity(arch.len() - 1);
        for w in arch.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
                data.push(T::c(v));
                offset += 8;
            }
            weights.push(Mat::from_flat(rows, cols, data)?);
        }
        PretrainedModel::from_weights(weights)
    }

    fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }
}

/// Mean softmax cross-entropy over logit rows plus its gradient with
/// respect to the logits (already divided by the batch size).
fn softmax_cross_entropy_grad<T: Real>(logits: &Mat<T>, labels: &[usize]) -> (T, Mat<T>) {
    let (b, k) = (logits.rows(), logits.cols());
    let inv_b = T::c(1.0 / b as f64);
    let floor = T::c(1e-12);
    let mut grad = Mat::zeros(b, k);
    let mut loss = T::zero();
    for r in 0..b {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut sum = T::zero();
        for c in 0..k {
            let e = (row[c] - max).exp();
            grad[(r, c)] = e;
            sum += e;
        }
        for c in 0..k {
            grad[(r, c)] = grad[(r, c)] / sum * inv_b;
        }
        let p = (row[labels[r]] - max).exp() / sum;
        loss -= p.max(floor).ln();
        grad[(r, labels[r])] -= inv_b;
    }
    (loss * inv_b, grad)
}

/// Hardware-unaware stage-one training: a bias-free MLP with clipped-ReLU
/// hidden activations and softmax cross-entropy, optimized by mini-batch
/// SGD with hand-derived gradients. Deterministic for a given seed.
///
/// `arch` must start at the dataset's feature count and end at its class
/// count. Weights start from seeded scaled-normal draws (`√(2/fan_in)`).
pub fn pretrain_mlp<T: Real>(
    ds: &Dataset<T>,
    arch: &[usize],
    epochs: usize,
    lr: T,
    seed: u64,
) -> Result<PretrainedModel<T>> {
    if arch.len() < 2 {
        return Err(CoreError::Argument("architecture needs at least two layer sizes".into()));
    }
    if arch[0] != ds.n_features() || *arch.last().expect("nonempty") != ds.n_classes() {
        return Err(CoreError::Argument(format!(
            "architecture {:?} does not match {} features / {} classes",
            arch,
            ds.n_features(),
            ds.n_classes()
        )));
    }
    if arch.iter().any(|&d| d == 0) {
        return Err(CoreError::Argument("layer sizes must be positive".into()));
    }
    if ds.train_idx().is_empty() {
        return Err(CoreError::Argument("training split is empty".into()));
    }
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(CoreError::Argument(format!("learning rate must be finite and nonnegative, got {}", lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Vec<Mat<T>> = Vec::with_capacity(arch.len() - 1);
    for l in 0..arch.len() - 1 {
        let (rows, cols) = (arch[l + 1], arch[l]);
        let std = (2.0 / cols as f64).sqrt();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::c(std * z)
            })
            .collect();
        weights.push(Mat::from_flat(rows, cols, data)?);
    }
    let ceiling = T::c(DEFAULT_CEILING);
    let zero = T::zero();
    let mut order: Vec<usize> = ds.train_idx().to_vec();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(PRETRAIN_BATCH) {
            let batch = ds.make_batch(chunk)?;
            // Forward, keeping pre-activations of every hidden layer.
            let mut acts: Vec<Mat<T>> = vec![batch.inputs];
            let mut zs: Vec<Mat<T>> = Vec::with_capacity(weights.len() - 1);
            for (l, w) in weights.iter().enumerate() {
                let z = acts[l].matmul_nt(w);
                if l + 1 < weights.len() {
                    let mut a = z.clone();
                    for v in a.as_mut_slice() {
                        *v = relu_clip(*v, ceiling);
                    }
                    zs.push(z);
                    acts.push(a);
                } else {
                    zs.push(z); // logits
                }
            }
            let (_, mut delta) = softmax_cross_entropy_grad(
                zs.last().expect("at least one layer"),
                &batch.labels,
            );
            for l in (0..weights.len()).rev() {
                let grad = delta.transpose().matmul(&acts[l]);
                if l > 0 {
                    let mut back = delta.matmul(&weights[l]);
                    for (b, &z) in back.as_mut_slice().iter_mut().zip(zs[l - 1].as_slice()) {
                        if !(z > zero && z < ceiling) {
                            *b = zero; // clipped-ReLU gradient is 1 only strictly inside (0, ceiling)
                        }
                    }
                    delta = back;
                }
                for (w, &g) in weights[l].as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *w -= lr * g;
                }
            }
        }
    }
    PretrainedModel::from_weights(weights)
}

/// Everything [`deploy`] produces: the mesh-programmed model, the active
/// mask, the frozen noise realization, how many singular values hit the
/// representable bound, and the worst logit deviation of the noise-free
/// deployed network against the dense model on a seeded probe batch.
#[derive(Debug)]
pub struct Deployment<T> {
    pub model: OnnModel<T>,
    pub mask: ActiveMask,
    pub noise: NoiseRealization<T>,
    pub clamp_count: usize,
    pub fidelity_error: T,
}

/// Stage-two deployment: factor every dense weight as `U·Σ·Vᵀ`, program
/// the factors onto mesh phases (σ above the bound is clamped with a
/// warning), draw the active mask, and freeze one noise realization.
///
/// When nothing was clamped, the noise-free deployed forward must agree
/// with the dense forward within 1e-6 on every logit — violating that is
/// reported as an error rather than silently accepted.
pub fn deploy<T: Real>(
    pre: &PretrainedModel<T>,
    sigma_bound: T,
    noise_spec: &NoiseSpec<T>,
    alpha: f64,
    seed_mask: u64,
    seed_noise: u64,
) -> Result<Deployment<T>> {
    if !(sigma_bound > T::zero()) || !sigma_bound.is_finite() {
        return Err(CoreError::Argument(format!(
            "sigma bound must be positive and finite, got {}",
            sigma_bound
        )));
    }
    noise_spec.validate()?;
    let mut clamp_count = 0usize;
    let mut layers = Vec::with_capacity(pre.weights().len());
    for w in pre.weights() {
        let svd = jacobi_svd(w);
        let (phi_s, clamps) = phases_from_singular(&svd.sigma, sigma_bound)?;
        clamp_count += clamps;
        let (phi_u, d_u) = decompose_orthogonal(&svd.u)?;
        let (phi_v, d_v) = decompose_orthogonal(&svd.vt)?;
        layers.push(MeshLayer::from_parts(
            w.rows(),
            w.cols(),
            phi_u,
            phi_s,
            phi_v,
            d_u,
            d_v,
            sigma_bound,
        )?);
    }
    let conv = vec![None; layers.len()];
    let mut model = OnnModel::from_parts(layers, conv, T::c(DEFAULT_CEILING))?;
    let mask = ActiveMask::select_active(model.layout(), alpha, seed_mask)?;
    let adjacency = Adjacency::from_block_sizes(&model.layout().block_sizes());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed_noise);
    let noise = NoiseRealization::sample(noise_spec, &adjacency, mask.as_slice(), &mut noise_rng)?;

    // Fidelity probe: noise-free deployed logits against the dense model.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(FIDELITY_PROBE_SEED);
    let probe_rows = 8;
    let probe_data: Vec<T> = (0..probe_rows * model.in_dim())
        .map(|_| T::c(probe_rng.random::<f64>()))
        .collect();
    let probe = Mat::from_flat(probe_rows, model.in_dim(), probe_data)?;
    let ideal = pre.dense_forward(&probe)?;
    let transparent = NoiseRealization::identity(model.phase_count());
    let mut scratch = PowerLedger::new();
    let deployed = model.forward(&probe, &transparent, &mut scratch)?;
    let fidelity_error = ideal.max_abs_diff(&deployed);
    if clamp_count == 0 && fidelity_error > T::c(1e-6) {
        return Err(CoreError::Validation(format!(
            "clamp-free deployment drifted from the dense model by {} (limit 1e-6)",
            fidelity_error
        )));
    }
    Ok(Deployment { model, mask, noise, clamp_count, fidelity_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::path::PathBuf;

    fn fixture_dir() -> PathBuf {
        if let Ok(dir) = std::env::var("ONN_MNIST_DIR") {
            return PathBuf::from(dir);
        }
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata/digits-8x8")
    }

    fn write_idx_images(path: &Path, images: &[&[u8]], rows: usize, cols: usize) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for img in images {
            bytes.extend_from_slice(img);
        }
        fs::write(path, bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn idx_round_trip_through_synthetic_files() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte"),
            &[&[0, 51, 102, 153], &[255, 204, 153, 102], &[0, 0, 0, 0]],
            2,
            2,
        );
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[0, 2, 1]);
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &[&[255, 0, 0, 255]], 2, 2);
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[1]);

        let ds: Dataset<f64> = load_idx(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.n_features(), 4);
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.image_side(), Some(2));
        assert_eq!(ds.train_idx(), &[0, 1, 2]);
        assert_eq!(ds.test_idx(), &[3]);
        assert_eq!(ds.labels(), &[0, 2, 1, 1]);
        assert!((ds.features()[(0, 1)] - 51.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.features()[(3, 0)], 1.0);
        assert_eq!(ds.features()[(2, 3)], 0.0);
    }

    #[test]
    fn idx_errors_carry_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        // Wrong magic.
        fs::write(&img, [0u8, 0, 8, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2]).unwrap();
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("byte offset 0"), "got: {}", err);
        // Truncated pixel payload: header promises 1 image of 2x2.
        fs::write(&img, [0u8, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 9, 9]).unwrap();
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("byte offset 18"), "got: {}", err);
        // Truncated header.
        fs::write(&img, [0u8, 0, 8, 3, 0, 0]).unwrap();
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("file ends at byte offset 6"), "got: {}", err);
        // Label container with the same checks.
        let lbl = dir.path().join("lbl");
        fs::write(&lbl, [0u8, 0, 8, 1, 0, 0, 0, 5, 1, 2]).unwrap();
        let err = read_idx_labels(&lbl).unwrap_err().to_string();
        assert!(err.contains("byte offset 10"), "got: {}", err);
    }

    #[test]
    fn digit_fixture_loads_and_is_deterministic() {
        let ds: Dataset<f64> = load_idx(&fixture_dir()).unwrap();
        assert_eq!(ds.n_features(), 64);
        assert_eq!(ds.image_side(), Some(8));
        assert_eq!(ds.n_classes(), 10);
        assert_eq!(ds.train_idx().len(), 1437);
        assert_eq!(ds.test_idx().len(), 360);
        assert!(ds.features().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again: Dataset<f64> = load_idx(&fixture_dir()).unwrap();
        assert_eq!(ds.features().as_slice(), again.features().as_slice());
        assert_eq!(ds.labels(), again.labels());
    }

    #[test]
    fn downsample_identity_and_pooling() {
        let constant = vec![0.7f64; 16];
        assert_eq!(downsample_image(&constant, 4, 4).unwrap(), constant);
        // 4x4 checkerboard pooled 2x2 averages to one half everywhere.
        let checker: Vec<f64> = (0..16).map(|i| (((i / 4) + (i % 4)) % 2) as f64).collect();
        assert_eq!(downsample_image(&checker, 4, 2).unwrap(), vec![0.5; 4]);
        // Constant image stays constant through the crop path too.
        assert!(downsample_image(&vec![0.3f64; 28 * 28], 28, 8)
            .unwrap()
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn downsample_28_to_8_crops_then_pools() {
        // Pixel value (r·28 + c)/1000: after the center crop to 24 (start 2)
        // and 3x3 pooling, out[y][x] = ((3y+3)·28 + (3x+3))/1000.
        let img: Vec<f64> = (0..28 * 28).map(|i| i as f64 / 1000.0).collect();
        let out = downsample_image(&img, 28, 8).unwrap();
        assert_eq!(out.len(), 64);
        for y in 0..8 {
            for x in 0..8 {
                let expected = ((3 * y + 3) * 28 + (3 * x + 3)) as f64 / 1000.0;
                assert!(
                    (out[y * 8 + x] - expected).abs() < 1e-12,
                    "({}, {}): {} vs {}",
                    y,
                    x,
                    out[y * 8 + x],
                    expected
                );
            }
        }
    }

    #[test]
    fn downsample_28_to_16_pads_then_pools() {
        let ones = vec![1.0f64; 28 * 28];
        let out = downsample_image(&ones, 28, 16).unwrap();
        assert_eq!(out.len(), 256);
        // The zero border occupies the outermost output ring.
        assert_eq!(out[5], 0.0); // row 0
        assert_eq!(out[5 * 16], 0.0); // col 0
        assert_eq!(out[15 * 16 + 7], 0.0); // row 15
        assert_eq!(out[3 * 16 + 3], 1.0); // interior
    }

    #[test]
    fn downsample_28_to_14_pools_directly() {
        // 28 is divisible by 14, so no padding and no cropping: an all-ones
        // image must stay all ones.
        let ones = vec![1.0f64; 28 * 28];
        let out = downsample_image(&ones, 28, 14).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsample_rejects_impossible_factors() {
        assert!(downsample_image(&vec![0.0f64; 16], 4, 8).is_err());
        assert!(downsample_image(&vec![0.0f64; 16], 4, 0).is_err());
        assert!(downsample_image(&vec![0.0f64; 15], 4, 2).is_err());
    }

    #[test]
    fn dataset_downsample_preserves_labels_and_split() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte"),
            &[&[255u8; 16], &[0u8; 16]],
            4,
            4,
        );
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 0]);
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &[&[255u8; 16]], 4, 4);
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[1]);
        let ds: Dataset<f64> = load_idx(dir.path()).unwrap();
        let small = downsample(&ds, 2).unwrap();
        assert_eq!(small.n_features(), 4);
        assert_eq!(small.labels(), ds.labels());
        assert_eq!(small.train_idx(), ds.train_idx());
        assert_eq!(small.features()[(0, 0)], 1.0);
        assert_eq!(small.features()[(1, 0)], 0.0);
    }

    #[test]
    fn csv_loads_scales_and_maps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "a,b,label").unwrap();
        writeln!(f, "1.0, 2.0, x").unwrap();
        writeln!(f, "3.0, 2.0, y").unwrap();
        writeln!(f, "2.0, 2.0, x").unwrap();
        drop(f);
        let schema = CsvSchema { label_column: "label".into() };
        let ds: Dataset<f64> = load_csv(&path, &schema).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.n_classes(), 2);
        // Column a min-max scales to {0, 1, 0.5}; constant column b → 0.
        assert_eq!(ds.features()[(0, 0)], 0.0);
        assert_eq!(ds.features()[(1, 0)], 1.0);
        assert_eq!(ds.features()[(2, 0)], 0.5);
        assert!(ds.features().as_slice().chunks(2).all(|r| r[1] == 0.0));
        // Sorted distinct labels: x → 0, y → 1.
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.test_idx().len(), 0);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b,label\n1.0,zzz,x\n").unwrap();
        let schema = CsvSchema { label_column: "label".into() };
        let err = load_csv::<f64>(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("'b'"), "got: {}", err);

        fs::write(&path, "a,b,label\n1.0,2.0,x\n1.0,2.0\n").unwrap();
        let err = load_csv::<f64>(&path, &schema).unwrap_err().to_string();
        assert!(err.to_lowercase().contains("line"), "got: {}", err);

        fs::write(&path, "a,b,label\n1.0,2.0,x\n").unwrap();
        let missing = CsvSchema { label_column: "target".into() };
        let err = load_csv::<f64>(&path, &missing).unwrap_err().to_string();
        assert!(err.contains("target") && err.contains("label"), "got: {}", err);
    }

    #[test]
    fn synthetic_clusters_shape_and_range() {
        let ds: Dataset<f64> = synthetic_clusters(10, 3, 5, 0.05, 7).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.n_features(), 5);
        assert_eq!(ds.n_classes(), 3);
        assert!(ds.features().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again: Dataset<f64> = synthetic_clusters(10, 3, 5, 0.05, 7).unwrap();
        assert_eq!(ds.features().as_slice(), again.features().as_slice());
        assert!(synthetic_clusters::<f64>(10, 1, 5, 0.05, 7).is_err());
    }

    #[test]
    fn split_is_disjoint_covering_and_deterministic() {
        let mut ds: Dataset<f64> = synthetic_clusters(20, 2, 3, 0.05, 1).unwrap();
        ds.split(0.25, 9).unwrap();
        assert_eq!(ds.test_idx().len(), 10);
        assert_eq!(ds.train_idx().len(), 30);
        let mut all: Vec<usize> = ds.train_idx().iter().chain(ds.test_idx()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let mut ds2: Dataset<f64> = synthetic_clusters(20, 2, 3, 0.05, 1).unwrap();
        ds2.split(0.25, 9).unwrap();
        assert_eq!(ds.test_idx(), ds2.test_idx());
        assert!(ds2.split(1.5, 0).is_err());
    }

    #[test]
    fn batches_gather_the_right_rows() {
        let ds: Dataset<f64> = synthetic_clusters(5, 2, 3, 0.0, 2).unwrap();
        let batch = ds.make_batch(&[0, 7]).unwrap();
        assert_eq!(batch.inputs.row(0), ds.features().row(0));
        assert_eq!(batch.inputs.row(1), ds.features().row(7));
        assert_eq!(batch.labels, vec![ds.labels()[0], ds.labels()[7]]);
        assert!(ds.make_batch(&[99]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = ds.sample_batch(4, &mut rng).unwrap();
        assert_eq!(sampled.len(), 4);
        let big = ds.sample_batch(1000, &mut rng).unwrap();
        assert_eq!(big.len(), ds.train_idx().len());
    }

    #[test]
    fn pretraining_solves_a_separable_toy() {
        let ds: Dataset<f64> = synthetic_clusters(20, 2, 4, 0.02, 1).unwrap();
        let model = pretrain_mlp(&ds, &[4, 8, 2], 200, 0.1, 0).unwrap();
        let batch = ds.make_batch(ds.train_idx()).unwrap();
        let acc = model.accuracy(&batch.inputs, &batch.labels).unwrap();
        assert_eq!(acc, 1.0, "separable clusters must be fully fit, got {}", acc);
    }

    #[test]
    fn pretraining_with_zero_learning_rate_keeps_the_init() {
        let ds: Dataset<f64> = synthetic_clusters(10, 2, 4, 0.05, 3).unwrap();
        let trained = pretrain_mlp(&ds, &[4, 6, 2], 5, 0.0, 42).unwrap();
        let init = pretrain_mlp(&ds, &[4, 6, 2], 0, 0.5, 42).unwrap();
        for (a, b) in trained.weights().iter().zip(init.weights()) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn pretraining_is_deterministic_per_seed() {
        let ds: Dataset<f64> = synthetic_clusters(10, 2, 4, 0.05, 3).unwrap();
        let a = pretrain_mlp(&ds, &[4, 6, 2], 3, 0.05, 7).unwrap();
        let b = pretrain_mlp(&ds, &[4, 6, 2], 3, 0.05, 7).unwrap();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert_eq!(wa.as_slice(), wb.as_slice());
        }
        let c = pretrain_mlp(&ds, &[4, 6, 2], 3, 0.05, 8).unwrap();
        assert_ne!(a.weights()[0].as_slice(), c.weights()[0].as_slice());
    }

    #[test]
    fn pretraining_validates_the_architecture() {
        let ds: Dataset<f64> = synthetic_clusters(5, 2, 4, 0.05, 3).unwrap();
        assert!(pretrain_mlp(&ds, &[5, 6, 2], 1, 0.1, 0).is_err()); // wrong input width
        assert!(pretrain_mlp(&ds, &[4, 6, 3], 1, 0.1, 0).is_err()); // wrong class count
        assert!(pretrain_mlp(&ds, &[4], 1, 0.1, 0).is_err());
    }

    #[test]
    fn model_file_round_trips_bitwise() {
        let ds: Dataset<f64> = synthetic_clusters(10, 2, 4, 0.05, 3).unwrap();
        let model = pretrain_mlp(&ds, &[4, 6, 2], 2, 0.05, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = PretrainedModel::<f64>::load(&path).unwrap();
        assert_eq!(loaded.arch(), model.arch());
        assert_eq!(loaded.arch_string(), "4-6-2");
        for (a, b) in model.weights().iter().zip(loaded.weights()) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        // Corrupt the magic.
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        let err = PretrainedModel::<f64>::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "got: {}", err);
        // Truncate the weights.
        bytes[0] ^= 0xFF;
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        let err = PretrainedModel::<f64>::load(&path).unwrap_err().to_string();
        assert!(err.contains("byte offset"), "got: {}", err);
    }

    #[test]
    fn deploying_an_identity_weight_gives_known_phases() {
        let pre = PretrainedModel::from_weights(vec![Mat::<f64>::identity(2)]).unwrap();
        let spec = NoiseSpec::new(0.0, 0.0).unwrap();
        let d = deploy(&pre, 3.0, &spec, 1.0, 0, 0).unwrap();
        assert_eq!(d.clamp_count, 0);
        let layer = &d.model.layers()[0];
        let expected = (1.0f64 / 3.0).acos();
        for &phi in layer.phi_s() {
            assert!((phi - expected).abs() < 1e-12);
        }
        assert_eq!(layer.phi_u(), &[0.0]);
        assert_eq!(layer.phi_v(), &[0.0]);
        assert_eq!(layer.d_u(), &[1.0, 1.0]);
        assert_eq!(layer.d_v(), &[1.0, 1.0]);
        assert!(d.fidelity_error < 1e-9);
    }

    #[test]
    fn zero_noise_deployment_matches_dense_accuracy_exactly() {
        let mut ds: Dataset<f64> = synthetic_clusters(15, 3, 6, 0.08, 4).unwrap();
        ds.split(0.2, 5).unwrap();
        let pre = pretrain_mlp(&ds, &[6, 5, 3], 30, 0.05, 2).unwrap();
        let spec = NoiseSpec::new(0.0, 0.0).unwrap();
        let mut d = deploy(&pre, 3.0, &spec, 0.5, 11, 12).unwrap();
        assert_eq!(d.clamp_count, 0, "pretrained weights should fit under the bound");
        assert!(d.fidelity_error <= 1e-6);
        let batch = ds.make_batch(ds.test_idx()).unwrap();
        let dense_acc = pre.accuracy(&batch.inputs, &batch.labels).unwrap();
        let mut ledger = PowerLedger::new();
        let mesh_acc = d.model.accuracy(&batch.inputs, &batch.labels, &d.noise, &mut ledger).unwrap();
        assert_eq!(mesh_acc, dense_acc, "zero-noise deployment must not change any argmax");
    }

    #[test]
    fn oversized_singular_values_are_clamped_and_counted() {
        let w = Mat::<f64>::from_rows(&[&[5.0, 0.0], &[0.0, 0.5]]);
        let pre = PretrainedModel::from_weights(vec![w]).unwrap();
        let spec = NoiseSpec::new(0.0, 0.0).unwrap();
        let d = deploy(&pre, 3.0, &spec, 1.0, 0, 0).unwrap();
        assert_eq!(d.clamp_count, 1);
        // The 5.0 stretch is truncated to just under the bound, so the probe
        // logits drift far beyond the clamp-free fidelity budget.
        assert!(d.fidelity_error > 1e-6);
        let sigmas = d.model.layers()[0].sigmas();
        assert!((sigmas[0] - 3.0).abs() < 1e-3);
        assert!((sigmas[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn deployment_seeds_are_independent() {
        let ds: Dataset<f64> = synthetic_clusters(10, 2, 4, 0.05, 3).unwrap();
        let pre = pretrain_mlp(&ds, &[4, 6, 2], 5, 0.05, 7).unwrap();
        let spec = NoiseSpec::new(2e-3, 2e-3).unwrap();
        let a = deploy(&pre, 3.0, &spec, 0.3, 1, 2).unwrap();
        let b = deploy(&pre, 3.0, &spec, 0.3, 1, 2).unwrap();
        assert_eq!(a.mask.active_list(), b.mask.active_list());
        assert_eq!(a.noise.gamma(), b.noise.gamma());
        let c = deploy(&pre, 3.0, &spec, 0.3, 3, 2).unwrap();
        assert_ne!(a.mask.active_list(), c.mask.active_list());
    }
}
