//! Training sets that satisfy the separation assumption: every feature has
//! unit norm and distinct features are at least `delta` apart.
//!
//! Two sources: synthetic points on the sphere, and small subsets of
//! IDX-format image files (MNIST layout).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;
use crate::scalar::Real;
use crate::tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Total candidate draws allowed when placing separated points.
pub const REJECTION_BUDGET: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    features: Vec<Vec<T>>,
    targets: Vec<Vec<T>>,
    delta: f64,
    min_distance: f64,
}

fn unit_tolerance<T: Real>() -> f64 {
    (16.0 * T::epsilon().as_f64()).max(1e-12)
}

/// Smallest pairwise distance, by exhaustive comparison. `∞` for `n < 2`.
pub fn min_pairwise_distance<T: Real>(features: &[Vec<T>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            best = best.min(tensor::distance(&features[i], &features[j]).as_f64());
        }
    }
    best
}

impl<T: Real> Dataset<T> {
    /// Certifies unit norms and pairwise separation.
    ///
    /// With `delta = None` the certified delta is the measured minimum
    /// distance (`∞` for a single sample).
    pub fn new(features: Vec<Vec<T>>, targets: Vec<Vec<T>>, delta: Option<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        if features.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset targets",
                expected: features.len(),
                got: targets.len(),
            });
        }
        let p = features[0].len();
        let d = targets[0].len();
        if p == 0 || d == 0 {
            return Err(Error::InvalidArgument("feature and target dims must be >= 1".into()));
        }
        let tol = unit_tolerance::<T>();
        for (i, (x, y)) in features.iter().zip(&targets).enumerate() {
            if x.len() != p || y.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "dataset row",
                    expected: p,
                    got: x.len(),
                });
            }
            let n = tensor::norm(x).as_f64();
            if (n - 1.0).abs() > tol {
                return Err(Error::AssumptionViolated(format!(
                    "feature {i} has norm {n}, expected 1"
                )));
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("target {i} is not finite")));
            }
        }
        let min_distance = min_pairwise_distance(&features);
        if features.len() > 1 && min_distance <= 0.0 {
            return Err(Error::AssumptionViolated("duplicate features (delta = 0)".into()));
        }
        let delta = match delta {
            Some(dl) if min_distance < dl => {
                return Err(Error::AssumptionViolated(format!(
                    "min pairwise distance {min_distance} < delta {dl}"
                )))
            }
            Some(dl) => dl,
            None => min_distance,
        };
        Ok(Self {
            features,
            targets,
            delta,
            min_distance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets[0].len()
    }

    pub fn features(&self) -> &[Vec<T>] {
        &self.features
    }

    pub fn targets(&self) -> &[Vec<T>] {
        &self.targets
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    /// True when the separation certificate is vacuous (one sample).
    pub fn delta_is_vacuous(&self) -> bool {
        !self.delta.is_finite()
    }

    /// Replace the targets; features and certificate are kept.
    pub fn with_targets(&self, targets: Vec<Vec<T>>) -> Result<Self> {
        Self::new(self.features.clone(), targets, Some(self.delta))
    }

    /// Samples `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let f = idx.iter().map(|&i| self.features[i].clone()).collect();
        let t = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Self::new(f, t, Some(self.delta))
    }

    /// One row per sample: features then targets, with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((0..self.output_dim()).map(|j| format!("y{j}")))
            .collect();
        w.write_record(&header)?;
        for (x, y) in self.features.iter().zip(&self.targets) {
            w.write_record(x.iter().chain(y).map(|v| v.as_f64().to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform unit features with pairwise distance at least `delta`, and
/// Gaussian targets of standard deviation `target_scale`.
///
/// Candidates are drawn one at a time and rejected when they come closer
/// than `delta` to an accepted point.
pub fn gen_separated_dataset<T: Real>(
    n: usize,
    p: usize,
    d: usize,
    delta: f64,
    target_scale: f64,
    seed: &SeedSpec,
) -> Result<Dataset<T>> {
    if n == 0 || p == 0 || d == 0 {
        return Err(Error::InvalidArgument("n, p and d must be >= 1".into()));
    }
    if !(0.0..=2.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in [0, 2] for unit vectors, got {delta}"
        )));
    }
    if !(target_scale >= 0.0 && target_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad target scale {target_scale}")));
    }
    let feature_seed = seed.child(0);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while accepted.len() < n {
        if attempts == REJECTION_BUDGET {
            return Err(Error::Infeasible {
                attempts,
                placed: accepted.len(),
                wanted: n,
                violating_pairs: 0,
            });
        }
        let cand: Vec<f64> = tensor::random_unit_vector(p, &feature_seed.child(attempts as u64));
        attempts += 1;
        let violating = accepted
            .iter()
            .filter(|x| tensor::distance(x.as_slice(), &cand) < delta)
            .count();
        if violating == 0 {
            accepted.push(cand);
        } else if attempts == REJECTION_BUDGET {
            return Err(Error::Infeasible {
                attempts,
                placed: accepted.len(),
                wanted: n,
                violating_pairs: violating,
            });
        }
    }
    let target_seed = seed.child(1);
    let targets = (0..n)
        .map(|i| {
            tensor::gaussian_vector::<f64>(d, &target_seed.child(i as u64))
                .into_iter()
                .map(|v| T::of(v * target_scale))
                .collect()
        })
        .collect();
    let features = accepted
        .into_iter()
        .map(|x| x.into_iter().map(T::of).collect())
        .collect();
    Dataset::new(features, targets, Some(delta))
}

/// Images and labels as read from a pair of IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        what,
        need: offset + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Parses an image file: magic, count, rows, cols, then `count·rows·cols` bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let size = rows * cols;
    let need = 16 + count * size;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "image payload",
            need,
            have: bytes.len(),
        });
    }
    let images = bytes[16..need].chunks_exact(size.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = be_u32(bytes, 4, "label header")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "label payload",
            need,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..need].to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (rows, cols, images) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(RawDataset {
        rows,
        cols,
        images,
        labels,
    })
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Column-standardize then rescale every row to unit norm.
///
/// Returns the normalized rows and the indices of dropped zero-variance
/// columns. A single row has no column statistics and is only rescaled.
pub fn standardize_rows(rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to normalize".into()));
    }
    let p = rows[0].len();
    let (standardized, dropped) = if n == 1 {
        (rows.to_vec(), Vec::new())
    } else {
        let nf = n as f64;
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        let mut stats = Vec::new();
        for j in 0..p {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / nf;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / nf;
            if var > 0.0 {
                keep.push(j);
                stats.push((mean, var.sqrt()));
            } else {
                dropped.push(j);
            }
        }
        let out = rows
            .iter()
            .map(|r| keep.iter().zip(&stats).map(|(&j, &(mu, sd))| (r[j] - mu) / sd).collect())
            .collect();
        (out, dropped)
    };
    let mut out = Vec::with_capacity(n);
    for (i, mut r) in standardized.into_iter().enumerate() {
        let nrm = tensor::norm(&r);
        if !(nrm > 0.0) {
            return Err(Error::AssumptionViolated(format!("sample {i} has zero norm after standardization")));
        }
        tensor::scale_in_place(1.0 / nrm, &mut r);
        out.push(r);
    }
    Ok((out, dropped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDataset<T> {
    pub dataset: Dataset<T>,
    pub dropped_columns: Vec<usize>,
}

/// Standardized unit-norm features with one-hot targets of dimension `d`.
/// The certified delta is the measured minimum pairwise distance.
pub fn normalize_features<T: Real>(raw: &RawDataset, d: usize) -> Result<NormalizedDataset<T>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty raw dataset".into()));
    }
    if let Some(&bad) = raw.labels.iter().find(|&&l| l as usize >= d) {
        return Err(Error::InvalidArgument(format!("label {bad} does not fit one-hot dim {d}")));
    }
    let rows: Vec<Vec<f64>> = raw
        .images
        .iter()
        .map(|img| img.iter().map(|&b| f64::from(b)).collect())
        .collect();
    let (feats, dropped_columns) = standardize_rows(&rows)?;
    let features = feats.into_iter().map(|r| r.into_iter().map(T::of).collect()).collect();
    let targets = raw
        .labels
        .iter()
        .map(|&l| (0..d).map(|k| if k == l as usize { T::one() } else { T::zero() }).collect())
        .collect();
    Ok(NormalizedDataset {
        dataset: Dataset::new(features, targets, None)?,
        dropped_columns,
    })
}
