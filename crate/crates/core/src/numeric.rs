//! Deterministic linear-algebra and random-number substrate.
//!
//! Everything downstream (centroid generation, losses, training) is built on
//! [`Matrix`] and [`Rng`]. Both are deliberately plain: row-major `f64`
//! storage with finiteness enforced at construction, and a self-contained
//! SplitMix64 generator so identical seeds reproduce identical streams on any
//! platform or language.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats. Every stored value is finite;
/// non-finite data is rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data, rejecting shape mismatches and non-finite
    /// values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        for (idx, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: if cols == 0 { 0 } else { idx / cols },
                    col: if cols == 0 { 0 } else { idx % cols },
                    value: v,
                });
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::BadShape {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// `self * other^T`: (n x d) * (c x d)^T -> n x c.
    pub fn times_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "times_transpose",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot(a, other.row(j)));
            }
        }
        Ok(out)
    }

    /// `self^T * other`: (n x c)^T * (n x d) -> c x d.
    pub fn transpose_times(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                context: "transpose_times",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for i in 0..self.cols {
                let ai = a[i];
                if ai == 0.0 {
                    continue;
                }
                let dst = out.row_mut(i);
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Matrix, scale: f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "add_scaled",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Threshold below which a row is considered degenerate (zero vector).
pub const ZERO_ROW_NORM: f64 = 1e-30;

/// Scale every row to Euclidean norm 1, preserving direction.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n < ZERO_ROW_NORM {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        let inv = 1.0 / n;
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Cosine of the angle between every pair of rows. The result is exactly
/// symmetric: each unordered pair is computed once and mirrored.
pub fn pairwise_cosines(m: &Matrix) -> Result<Matrix> {
    let unit = l2_normalize_rows(m)?;
    let c = unit.rows();
    let mut out = Matrix::zeros(c, c);
    for i in 0..c {
        out.set(i, i, dot(unit.row(i), unit.row(i)));
        for j in (i + 1)..c {
            let cos = dot(unit.row(i), unit.row(j));
            out.set(i, j, cos);
            out.set(j, i, cos);
        }
    }
    Ok(out)
}

/// Deterministic pseudo-random generator.
///
/// The stream is SplitMix64 (Steele, Lea & Flood 2014): on each draw the
/// state advances by the constant `0x9E3779B97F4A7C15` and the new state is
/// scrambled by two xor-shift-multiply rounds (`0xBF58476D1CE4E5B9`,
/// `0x94D049BB133111EB`) and a final 31-bit xor-shift. Uniform doubles take
/// the top 53 bits; Gaussians come from Box-Muller over that stream with the
/// second variate cached. Any implementation of the same recipe reproduces
/// the streams bit for bit.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
    cached_gauss: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            seed,
            state: seed,
            cached_gauss: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound), rejection-sampled to avoid modulo bias.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below requires bound > 0");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; consumes two uniforms per pair and
    /// caches the second variate.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_gauss.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Derive an independent generator; the child stream is seeded from the
    /// parent's next output.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. standard normal entries, deterministic per seed.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "gaussian_matrix requires rows >= 1 and cols >= 1, got {rows}x{cols}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.next_gaussian()).collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_and_nan() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::BadShape { .. })
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { col: 1, .. })
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]),
            Err(Error::NonFinite { col: 0, .. })
        ));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_identity_case() {
        let m = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_ones_row() {
        // 1/sqrt(2), by hand.
        let expected = 0.7071067811865475_f64;
        let m = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - expected).abs() < 1e-15);
        assert!((n.get(0, 1) - expected).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize_rows(&m),
            Err(Error::ZeroRow { row: 1, .. })
        ));
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = Matrix::from_vec(2, 3, vec![3.0, -1.0, 2.0, 0.5, 0.5, 0.5]).unwrap();
        let once = l2_normalize_rows(&m).unwrap();
        let twice = l2_normalize_rows(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosines_orthogonal_and_antipodal() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = pairwise_cosines(&m).unwrap();
        assert!(c.get(0, 1).abs() < 1e-15);

        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let c = pairwise_cosines(&m).unwrap();
        assert!((c.get(0, 1) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosines_forty_five_degrees() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let c = pairwise_cosines(&m).unwrap();
        // cos 45 degrees, by hand: 1/sqrt(2).
        assert!((c.get(0, 1) - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosines_symmetric_with_unit_diagonal() {
        let mut rng = Rng::new(7);
        let m = gaussian_matrix(&mut rng, 5, 4).unwrap();
        let c = pairwise_cosines(&m).unwrap();
        for i in 0..5 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..5 {
                assert_eq!(c.get(i, j), c.get(j, i));
                assert!(c.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn splitmix64_reference_stream() {
        // Frozen from the published SplitMix64 recipe (independently computed).
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(rng.next_u64(), 0x6e789e6aa1b965f4);
        assert_eq!(rng.next_u64(), 0x06c45d188009454f);

        let mut rng = Rng::new(42);
        assert_eq!(rng.next_u64(), 0xbdd732262feb6e95);
        assert_eq!(rng.next_u64(), 0x28efe333b266f103);
    }

    #[test]
    fn gaussian_reference_values() {
        // Frozen from an independent Box-Muller evaluation over the same
        // SplitMix64 stream, seed 42.
        let mut rng = Rng::new(42);
        let expected = [
            0.8822489062222688,
            1.388473285287707,
            -0.4508498757188601,
            0.6707164409024291,
        ];
        for e in expected {
            assert!((rng.next_gaussian() - e).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_matrix_deterministic() {
        let a = gaussian_matrix(&mut Rng::new(42), 2, 2).unwrap();
        let b = gaussian_matrix(&mut Rng::new(42), 2, 2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gaussian_matrix_mean_near_zero() {
        let m = gaussian_matrix(&mut Rng::new(7), 1000, 1).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.1, "mean = {mean}");
    }

    #[test]
    fn gaussian_matrix_rejects_zero_rows() {
        assert!(gaussian_matrix(&mut Rng::new(1), 0, 3).is_err());
    }

    #[test]
    fn split_streams_diverge_deterministically() {
        let mut a = Rng::new(9);
        let mut child_a = a.split();
        let mut b = Rng::new(9);
        let mut child_b = b.split();
        assert_eq!(child_a.next_u64(), child_b.next_u64());
        assert_ne!(child_a.next_u64(), a.next_u64());
    }

    #[test]
    fn matmul_shapes_and_values() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let ab = a.times_transpose(&b).unwrap();
        assert_eq!((ab.rows(), ab.cols()), (2, 2));
        assert_eq!(ab.row(0), &[1.0, 2.0]);
        assert_eq!(ab.row(1), &[4.0, 5.0]);

        let atb = a.transpose_times(&a).unwrap();
        assert_eq!((atb.rows(), atb.cols()), (3, 3));
        assert_eq!(atb.get(0, 0), 17.0); // 1 + 16
        assert_eq!(atb.get(0, 1), 22.0); // 2 + 20
    }
}
