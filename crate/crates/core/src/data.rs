//! Dataset loading (CSV, IDX), synthetic benchmark data, and centroid-file
//! persistence.
//!
//! Centroid files are JSON with floats written in their shortest
//! round-trippable decimal form, so `read(write(cs))` is bit-exact and the
//! files stay diffable. The IDX loader handles the big-endian MNIST-family
//! container with unsigned-byte payloads.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::metrics::Pair;
use crate::numeric::{Matrix, Rng};

/// Which split a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

/// Labeled inputs: an `n x d_in` matrix with one class index per row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }
}

/// Per-column standardization statistics (population moments of the split
/// they were computed on).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Column normalization applied at load time.
#[derive(Debug, Clone)]
pub enum Normalization {
    None,
    /// Standardize with stats computed on this split.
    Standardize,
    /// Standardize with stats carried over from another split.
    WithStats(FeatureStats),
}

/// Dataset plus the stats actually applied (when standardizing), so an eval
/// split can reuse a train split's statistics.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: LabeledDataset,
    pub stats: Option<FeatureStats>,
}

/// Load a CSV with a header row; `label_column` names the integer class
/// column, every other column is a feature. Row order follows the file.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    normalization: Normalization,
    split: SplitTag,
) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| csv_error(e))?;

    let headers = reader.headers().map_err(|e| csv_error(e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("label column '{label_column}' not found in header"),
        })?;
    let d = headers.len() - 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e))?;
        let line = record
            .position()
            .map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        let mut feat = Vec::with_capacity(d);
        for (idx, field) in record.iter().enumerate() {
            if idx == label_idx {
                let label: i64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label cell '{field}' is not an integer"),
                })?;
                if label < 0 {
                    return Err(Error::LabelRange { label, line });
                }
                labels.push(label as usize);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("feature cell '{field}' is not a number"),
                })?;
                feat.push(v);
            }
        }
        rows.push(feat);
    }

    let mut inputs = Matrix::from_rows(&rows)?;
    let stats = match normalization {
        Normalization::None => None,
        Normalization::Standardize => {
            let stats = column_stats(&inputs);
            apply_stats(&mut inputs, &stats)?;
            Some(stats)
        }
        Normalization::WithStats(stats) => {
            apply_stats(&mut inputs, &stats)?;
            Some(stats)
        }
    };

    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(LoadedCsv {
        dataset: LabeledDataset {
            inputs,
            labels,
            num_classes,
            split,
        },
        stats,
    })
}

fn csv_error(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line() as usize,
        None => 0,
    };
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn column_stats(m: &Matrix) -> FeatureStats {
    let (n, d) = (m.rows(), m.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (s, &v) in mean.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    FeatureStats { mean, std }
}

fn apply_stats(m: &mut Matrix, stats: &FeatureStats) -> Result<()> {
    if stats.mean.len() != m.cols() || stats.std.len() != m.cols() {
        return Err(Error::DimensionMismatch {
            context: "standardization stats",
            lhs: format!("{} columns", m.cols()),
            rhs: format!("{} stats", stats.mean.len()),
        });
    }
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        for ((v, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            // Constant columns standardize to zero.
            let inv = if *sd < 1e-30 { 0.0 } else { 1.0 / sd };
            *v = (*v - mu) * inv;
        }
    }
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST-family container): pixels
/// are scaled to `[0, 1]` and flattened row-major; `limit` keeps only the
/// first records.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
    split: SplitTag,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let mut cur = Cursor::new(&image_bytes);
    let magic = read_u32(&mut cur, images_path, &image_bytes)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n_images = read_u32(&mut cur, images_path, &image_bytes)? as usize;
    let height = read_u32(&mut cur, images_path, &image_bytes)? as usize;
    let width = read_u32(&mut cur, images_path, &image_bytes)? as usize;

    let mut lcur = Cursor::new(&label_bytes);
    let lmagic = read_u32(&mut lcur, labels_path, &label_bytes)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = read_u32(&mut lcur, labels_path, &label_bytes)? as usize;

    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let take = limit.unwrap_or(n_images).min(n_images);
    let pixels_per_image = height * width;

    let image_payload = &image_bytes[16..];
    let needed = n_images * pixels_per_image;
    if image_payload.len() < needed {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            needed: needed + 16,
            have: image_bytes.len(),
        });
    }
    let label_payload = &label_bytes[8..];
    if label_payload.len() < n_labels {
        return Err(Error::Truncated {
            path: labels_path.display().to_string(),
            needed: n_labels + 8,
            have: label_bytes.len(),
        });
    }

    let mut data = Vec::with_capacity(take * pixels_per_image);
    for &b in &image_payload[..take * pixels_per_image] {
        data.push(b as f64 / 255.0);
    }
    let labels: Vec<usize> = label_payload[..take].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    Ok(LabeledDataset {
        inputs: Matrix::from_vec(take, pixels_per_image, data)?,
        labels,
        num_classes,
        split,
    })
}

fn read_u32(cur: &mut Cursor<&Vec<u8>>, path: &Path, bytes: &[u8]) -> Result<u32> {
    cur.read_u32::<BigEndian>().map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        needed: cur.position() as usize + 4,
        have: bytes.len(),
    })
}

/// Gaussian class blobs: centers drawn once at `center_scale`, samples are
/// `center + noise_sigma * N(0, I)`, grouped by class.
pub fn synth_blobs(
    rng: &mut Rng,
    num_classes: usize,
    per_class: usize,
    d_in: usize,
    center_scale: f64,
    noise_sigma: f64,
    split: SplitTag,
) -> Result<LabeledDataset> {
    let (ds, _) = synth_blobs_split(
        rng,
        num_classes,
        per_class,
        0,
        d_in,
        center_scale,
        noise_sigma,
    )?;
    Ok(LabeledDataset { split, ..ds })
}

/// Train and eval blobs drawn around the *same* class centers.
pub fn synth_blobs_split(
    rng: &mut Rng,
    num_classes: usize,
    train_per_class: usize,
    eval_per_class: usize,
    d_in: usize,
    center_scale: f64,
    noise_sigma: f64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes == 0 || train_per_class == 0 || d_in == 0 {
        return Err(Error::Config(
            "synth_blobs requires num_classes, per_class and d_in >= 1".into(),
        ));
    }
    let centers = crate::numeric::gaussian_matrix(rng, num_classes, d_in)?.scale(center_scale);

    let mut draw = |per_class: usize, split: SplitTag| -> Result<LabeledDataset> {
        let n = num_classes * per_class;
        let mut data = Vec::with_capacity(n * d_in);
        let mut labels = Vec::with_capacity(n);
        for class in 0..num_classes {
            let center = centers.row(class);
            for _ in 0..per_class {
                for &c in center {
                    data.push(c + noise_sigma * rng.next_gaussian());
                }
                labels.push(class);
            }
        }
        Ok(LabeledDataset {
            inputs: Matrix::from_vec(n, d_in, data)?,
            labels,
            num_classes,
            split,
        })
    };

    let train = draw(train_per_class, SplitTag::Train)?;
    let eval = if eval_per_class > 0 {
        draw(eval_per_class, SplitTag::Eval)?
    } else {
        LabeledDataset {
            inputs: Matrix::zeros(0, d_in),
            labels: Vec::new(),
            num_classes,
            split: SplitTag::Eval,
        }
    };
    Ok((train, eval))
}

pub const CENTROID_FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct CentroidFile {
    format_version: u64,
    num_classes: usize,
    dim: usize,
    seed: u64,
    force_exponent: f64,
    final_energy: f64,
    iterations_run: usize,
    converged: bool,
    centers: Vec<Vec<f64>>,
}

/// Serialize a centroid set to its JSON document.
pub fn centroids_to_json(cs: &CentroidSet) -> String {
    let file = CentroidFile {
        format_version: CENTROID_FORMAT_VERSION,
        num_classes: cs.num_classes,
        dim: cs.dim,
        seed: cs.seed,
        force_exponent: cs.force_exponent,
        final_energy: cs.final_energy,
        iterations_run: cs.iterations_run,
        converged: cs.converged,
        centers: cs.centers.iter_rows().map(|r| r.to_vec()).collect(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("centroid serialization");
    out.push('\n');
    out
}

pub fn write_centroids(cs: &CentroidSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, centroids_to_json(cs))?;
    Ok(())
}

/// Parse a centroid JSON document, enforcing the format version and every
/// centroid-set invariant (unit rows, distinct rows).
pub fn centroids_from_json(text: &str) -> Result<CentroidSet> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema("missing format_version".into()))?;
    if version != CENTROID_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: CENTROID_FORMAT_VERSION,
        });
    }
    let file: CentroidFile =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    if file.centers.len() != file.num_classes {
        return Err(Error::Schema(format!(
            "centers has {} rows but num_classes is {}",
            file.centers.len(),
            file.num_classes
        )));
    }
    if file.centers.iter().any(|r| r.len() != file.dim) {
        return Err(Error::Schema("center row length does not match dim".into()));
    }
    let centers = Matrix::from_rows(&file.centers)?;
    CentroidSet::from_parts(
        centers,
        file.seed,
        file.force_exponent,
        file.final_energy,
        file.iterations_run,
        file.converged,
    )
}

pub fn read_centroids(path: impl AsRef<Path>) -> Result<CentroidSet> {
    let text = fs::read_to_string(path)?;
    centroids_from_json(&text)
}

/// Read verification pairs from a CSV with header `index_a,index_b,same`;
/// `same` accepts 0/1 or true/false.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| csv_error(e))?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 3 {
            return Err(Error::Parse {
                line,
                message: "pair rows need index_a,index_b,same".into(),
            });
        }
        let parse_idx = |field: &str| -> Result<usize> {
            field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{field}' is not a valid index"),
            })
        };
        let same = match record[2].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("'{other}' is not a valid same flag"),
                })
            }
        };
        pairs.push(Pair {
            index_a: parse_idx(&record[0])?,
            index_b: parse_idx(&record[1])?,
            same_class: same,
        });
    }
    Ok(pairs)
}
