//! Feature-space quality metrics: within/between-class scatter traces,
//! nearest-centroid classification, cosine statistics, and pair-verification
//! accuracy with a swept threshold.

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::loss::FeatureBatch;
use crate::numeric::{dot, norm, Matrix, ZERO_ROW_NORM};

/// Summary of how compact and separated a labeled feature set is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub within_class_scatter_trace: f64,
    pub between_class_scatter_trace: f64,
    /// between / within; large means well separated relative to spread.
    pub separability_ratio: f64,
    pub nearest_centroid_accuracy: f64,
    pub mean_cos_to_own_centroid: f64,
    pub per_class_mean_cos: Vec<f64>,
}

/// A verification pair: two sample indices and whether they share a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub index_a: usize,
    pub index_b: usize,
    pub same_class: bool,
}

/// Pairs plus the verdict of a threshold sweep over their similarities.
#[derive(Debug, Clone)]
pub struct PairVerdictSet {
    pub pairs: Vec<Pair>,
    pub threshold: f64,
    pub accuracy: f64,
}

/// Within- and between-class scatter traces.
///
/// `between = sum_i P_i |mu_i - mu|^2` and
/// `within = sum_i P_i E_i[|x - mu_i|^2]` with `mu = sum_i P_i mu_i`;
/// priors default to empirical class frequencies, in which case the two
/// traces decompose the total variance exactly.
pub fn scatter_metrics(
    batch: &FeatureBatch,
    class_priors: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let n = batch.len();
    let d = batch.features.cols();
    let c = match class_priors {
        Some(p) => p.len(),
        None => batch.labels.iter().max().map_or(0, |m| m + 1),
    };
    if let Some(p) = class_priors {
        if let Some(&max_label) = batch.labels.iter().max() {
            if max_label >= p.len() {
                return Err(Error::DimensionMismatch {
                    context: "class_priors",
                    lhs: format!("label {max_label}"),
                    rhs: format!("{} priors", p.len()),
                });
            }
        }
        if p.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("class priors must be non-negative".into()));
        }
    }

    let mut counts = vec![0usize; c];
    let mut means = Matrix::zeros(c, d);
    for i in 0..n {
        let y = batch.labels[i];
        counts[y] += 1;
        let row = means.row_mut(y);
        for (m, &v) in row.iter_mut().zip(batch.features.row(i)) {
            *m += v;
        }
    }
    for y in 0..c {
        if counts[y] == 0 {
            return Err(Error::EmptyClass { class: y });
        }
        let inv = 1.0 / counts[y] as f64;
        for m in means.row_mut(y) {
            *m *= inv;
        }
    }

    let priors: Vec<f64> = match class_priors {
        Some(p) => p.to_vec(),
        None => counts.iter().map(|&k| k as f64 / n as f64).collect(),
    };

    let mut global = vec![0.0; d];
    for y in 0..c {
        for (g, &m) in global.iter_mut().zip(means.row(y)) {
            *g += priors[y] * m;
        }
    }

    let mut between = 0.0;
    for y in 0..c {
        let diff_sq: f64 = means
            .row(y)
            .iter()
            .zip(&global)
            .map(|(m, g)| (m - g) * (m - g))
            .sum();
        between += priors[y] * diff_sq;
    }

    let mut within_sums = vec![0.0; c];
    for i in 0..n {
        let y = batch.labels[i];
        within_sums[y] += batch
            .features
            .row(i)
            .iter()
            .zip(means.row(y))
            .map(|(x, m)| (x - m) * (x - m))
            .sum::<f64>();
    }
    let within = (0..c)
        .map(|y| priors[y] * within_sums[y] / counts[y] as f64)
        .sum();

    Ok((within, between))
}

/// Fraction of samples whose highest-cosine centroid matches their label;
/// ties break toward the lowest class index.
pub fn nearest_centroid_accuracy(batch: &FeatureBatch, centroids: &CentroidSet) -> Result<f64> {
    if batch.features.cols() != centroids.dim {
        return Err(Error::DimensionMismatch {
            context: "nearest_centroid_accuracy",
            lhs: format!("{} feature dims", batch.features.cols()),
            rhs: format!("{} centroid dims", centroids.dim),
        });
    }
    let mut hits = 0usize;
    for i in 0..batch.len() {
        let pred = nearest_centroid(batch.features.row(i), &centroids.centers)?;
        if pred == batch.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Index of the centroid row with the largest cosine to `feature`.
pub fn nearest_centroid(feature: &[f64], centers: &Matrix) -> Result<usize> {
    let n = norm(feature);
    if n < ZERO_ROW_NORM {
        return Err(Error::ZeroRow { row: 0, norm: n });
    }
    let mut best = 0usize;
    let mut best_cos = f64::NEG_INFINITY;
    for j in 0..centers.rows() {
        let cj = centers.row(j);
        let cos = dot(feature, cj) / (n * norm(cj));
        if cos > best_cos {
            best_cos = cos;
            best = j;
        }
    }
    Ok(best)
}

/// Mean cosine between each feature and its own centroid row, plus per-class
/// means.
pub fn cos_to_own_centroid(batch: &FeatureBatch, centers: &Matrix) -> Result<(f64, Vec<f64>)> {
    let c = centers.rows();
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let x = batch.features.row(i);
        let n = norm(x);
        if n < ZERO_ROW_NORM {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        let y = batch.labels[i];
        let p = centers.row(y);
        let cos = dot(x, p) / (n * norm(p));
        sums[y] += cos;
        counts[y] += 1;
        total += cos;
    }
    let per_class = (0..c)
        .map(|y| {
            if counts[y] == 0 {
                0.0
            } else {
                sums[y] / counts[y] as f64
            }
        })
        .collect();
    Ok((total / batch.len() as f64, per_class))
}

/// Full evaluation report for labeled features against a centroid set.
pub fn evaluate(batch: &FeatureBatch, centroids: &CentroidSet) -> Result<EvalReport> {
    let (within, between) = scatter_metrics(batch, None)?;
    let accuracy = nearest_centroid_accuracy(batch, centroids)?;
    let (mean_cos, per_class) = cos_to_own_centroid(batch, &centroids.centers)?;
    Ok(EvalReport {
        within_class_scatter_trace: within,
        between_class_scatter_trace: between,
        separability_ratio: between / within.max(f64::MIN_POSITIVE),
        nearest_centroid_accuracy: accuracy,
        mean_cos_to_own_centroid: mean_cos,
        per_class_mean_cos: per_class,
    })
}

/// Cosine similarity per pair, then a threshold sweep over all midpoints of
/// the sorted similarities (plus sentinels below and above); returns the
/// accuracy at the best threshold. Predictions are `same` when
/// `similarity >= threshold`.
pub fn pair_verification(features: &Matrix, pairs: &[Pair]) -> Result<PairVerdictSet> {
    if pairs.is_empty() {
        return Err(Error::Config("pair list must be non-empty".into()));
    }
    for p in pairs {
        if p.index_a >= features.rows() || p.index_b >= features.rows() {
            return Err(Error::Config(format!(
                "pair ({}, {}) out of range for {} samples",
                p.index_a,
                p.index_b,
                features.rows()
            )));
        }
    }

    let sims: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let a = features.row(p.index_a);
            let b = features.row(p.index_b);
            let na = norm(a).max(ZERO_ROW_NORM);
            let nb = norm(b).max(ZERO_ROW_NORM);
            dot(a, b) / (na * nb)
        })
        .collect();

    let mut sorted = sims.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates = vec![sorted[0] - 1.0];
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            candidates.push(0.5 * (w[0] + w[1]));
        }
    }
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let mut best_threshold = candidates[0];
    let mut best_hits = 0usize;
    for &t in &candidates {
        let hits = pairs
            .iter()
            .zip(&sims)
            .filter(|(p, &s)| (s >= t) == p.same_class)
            .count();
        if hits > best_hits {
            best_hits = hits;
            best_threshold = t;
        }
    }

    Ok(PairVerdictSet {
        pairs: pairs.to_vec(),
        threshold: best_threshold,
        accuracy: best_hits as f64 / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::{generate, GenConfig};
    use crate::numeric::{gaussian_matrix, Rng};

    fn batch(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureBatch {
        FeatureBatch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn scatter_zero_within_when_samples_at_means() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]],
            vec![0, 0, 1],
        );
        let (within, between) = scatter_metrics(&b, None).unwrap();
        assert_eq!(within, 0.0);
        assert!(between > 0.0);
    }

    #[test]
    fn scatter_zero_between_when_means_equal() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![0, 0, 1, 1],
        );
        let (within, between) = scatter_metrics(&b, None).unwrap();
        assert!(between.abs() < 1e-15);
        assert!(within > 0.0);
    }

    #[test]
    fn scatter_two_point_hand_value() {
        // Classes at (+1, 0) and (-1, 0), one sample each: global mean is the
        // origin, between trace 1, within trace 0.
        let b = batch(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0, 1]);
        let (within, between) = scatter_metrics(&b, None).unwrap();
        assert!((between - 1.0).abs() < 1e-15);
        assert_eq!(within, 0.0);
    }

    #[test]
    fn scatter_decomposes_total_variance() {
        let mut rng = Rng::new(40);
        let features = gaussian_matrix(&mut rng, 30, 4).unwrap();
        let labels = (0..30).map(|_| rng.next_below(3)).collect();
        let b = FeatureBatch::new(features, labels).unwrap();
        let (within, between) = scatter_metrics(&b, None).unwrap();

        // Independent total-variance computation.
        let n = b.len() as f64;
        let d = b.features.cols();
        let mut mean = vec![0.0; d];
        for i in 0..b.len() {
            for (m, &v) in mean.iter_mut().zip(b.features.row(i)) {
                *m += v / n;
            }
        }
        let total: f64 = (0..b.len())
            .map(|i| {
                b.features
                    .row(i)
                    .iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        assert!((within + between - total).abs() < 1e-9);
    }

    #[test]
    fn scatter_rejects_empty_class() {
        let b = batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 2]);
        assert!(matches!(
            scatter_metrics(&b, None),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    fn test_centroids(c: usize, d: usize) -> CentroidSet {
        generate(c, d, 77, &GenConfig::default()).unwrap()
    }

    #[test]
    fn nca_identity_and_derangement() {
        let cs = test_centroids(3, 4);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| cs.centers.row(i).to_vec()).collect();
        let aligned = batch(rows.clone(), vec![0, 1, 2]);
        assert_eq!(nearest_centroid_accuracy(&aligned, &cs).unwrap(), 1.0);

        let deranged = batch(rows, vec![1, 2, 0]);
        assert_eq!(nearest_centroid_accuracy(&deranged, &cs).unwrap(), 0.0);
    }

    #[test]
    fn nca_invariant_to_feature_scaling() {
        let mut rng = Rng::new(41);
        let cs = test_centroids(4, 5);
        let features = gaussian_matrix(&mut rng, 10, 5).unwrap();
        let labels: Vec<usize> = (0..10).map(|_| rng.next_below(4)).collect();
        let b = FeatureBatch::new(features.clone(), labels.clone()).unwrap();
        let base = nearest_centroid_accuracy(&b, &cs).unwrap();

        let scaled_rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let lambda = 0.1 + rng.next_f64() * 20.0;
                features.row(i).iter().map(|v| v * lambda).collect()
            })
            .collect();
        let scaled = batch(scaled_rows, labels);
        assert_eq!(nearest_centroid_accuracy(&scaled, &cs).unwrap(), base);
    }

    #[test]
    fn nca_rejects_zero_feature() {
        let cs = test_centroids(2, 3);
        let b = FeatureBatch::new(Matrix::zeros(1, 3), vec![0]).unwrap();
        assert!(matches!(
            nearest_centroid_accuracy(&b, &cs),
            Err(Error::ZeroRow { .. })
        ));
    }

    #[test]
    fn pairs_perfectly_separated() {
        // Same-class pairs identical, different-class pairs antipodal:
        // accuracy 1 at any interior threshold.
        let features = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let pairs = vec![
            Pair { index_a: 0, index_b: 1, same_class: true },
            Pair { index_a: 0, index_b: 2, same_class: false },
            Pair { index_a: 1, index_b: 2, same_class: false },
        ];
        let verdict = pair_verification(&features, &pairs).unwrap();
        assert_eq!(verdict.accuracy, 1.0);
        assert!(verdict.threshold > -1.0 && verdict.threshold < 1.0);
    }

    #[test]
    fn pairs_all_equal_similarities() {
        // Every similarity identical: the sweep can only call everything
        // same or everything different, so accuracy is the majority verdict.
        let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]])
            .unwrap();
        let pairs = vec![
            Pair { index_a: 0, index_b: 1, same_class: true },
            Pair { index_a: 0, index_b: 2, same_class: true },
            Pair { index_a: 1, index_b: 2, same_class: false },
        ];
        let verdict = pair_verification(&features, &pairs).unwrap();
        assert!((verdict.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pairs_shuffled_labels_near_chance() {
        let mut rng = Rng::new(42);
        let features = gaussian_matrix(&mut rng, 60, 6).unwrap();
        // Random verdicts, balanced 50/50.
        let pairs: Vec<Pair> = (0..400)
            .map(|k| Pair {
                index_a: rng.next_below(60),
                index_b: rng.next_below(60),
                same_class: k % 2 == 0,
            })
            .collect();
        let verdict = pair_verification(&features, &pairs).unwrap();
        assert!(
            (verdict.accuracy - 0.5).abs() < 0.05 + 0.05,
            "accuracy {} not near the 0.5 balance",
            verdict.accuracy
        );
    }

    #[test]
    fn pairs_invariant_to_monotone_transform_of_scores() {
        // The sweep is rank-based, so scaling all features per-row (which
        // preserves cosine ranks) must not change accuracy.
        let mut rng = Rng::new(43);
        let features = gaussian_matrix(&mut rng, 20, 4).unwrap();
        let pairs: Vec<Pair> = (0..50)
            .map(|k| Pair {
                index_a: rng.next_below(20),
                index_b: rng.next_below(20),
                same_class: k % 3 == 0,
            })
            .collect();
        let base = pair_verification(&features, &pairs).unwrap();
        let scaled_rows: Vec<Vec<f64>> = (0..20)
            .map(|i| features.row(i).iter().map(|v| v * 3.5).collect())
            .collect();
        let scaled = Matrix::from_rows(&scaled_rows).unwrap();
        let again = pair_verification(&scaled, &pairs).unwrap();
        assert_eq!(base.accuracy, again.accuracy);
    }

    #[test]
    fn evaluate_builds_full_report() {
        let cs = test_centroids(3, 4);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| cs.centers.row(i).to_vec()).collect();
        let b = batch(rows, vec![0, 1, 2]);
        let report = evaluate(&b, &cs).unwrap();
        assert_eq!(report.nearest_centroid_accuracy, 1.0);
        assert!((report.mean_cos_to_own_centroid - 1.0).abs() < 1e-12);
        assert_eq!(report.per_class_mean_cos.len(), 3);
        assert_eq!(report.within_class_scatter_trace, 0.0);
    }
}
