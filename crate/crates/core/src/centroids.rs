//! Evenly-distributed class centroids on the unit hypersphere.
//!
//! `c` mutually repulsive charges are constrained to the sphere and relaxed
//! until equilibrium: each iteration moves every point along the tangential
//! component of the net repulsive force, re-projects to the sphere, and
//! accepts the step only if the Riesz energy does not increase (backtracking
//! halves the step otherwise). For `c <= d + 1` the equilibrium is the
//! regular simplex with all pairwise cosines at `-1/(c-1)`, which the tests
//! use as an analytic oracle. Solutions are unique only up to orthogonal
//! transforms, so everything downstream asserts angle spectra rather than
//! coordinates.

use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian_matrix, l2_normalize_rows, norm, pairwise_cosines, Matrix, Rng};

/// Parameters of the repulsion simulation.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    /// Multiplier applied to the step after every accepted iteration.
    pub step_decay: f64,
    /// Energy exponent k: pairwise energy is distance^(-k), so the force
    /// magnitude falls off as distance^(-k-1).
    pub force_exponent: f64,
    /// Stop once the largest per-point displacement in one iteration falls
    /// below this.
    pub convergence_tol: f64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            max_iterations: 20_000,
            step_size: 0.05,
            step_decay: 1.0,
            force_exponent: 1.0,
            convergence_tol: 1e-7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::Config("step_decay must be in (0, 1]".into()));
        }
        if !(self.force_exponent > 0.0) {
            return Err(Error::Config("force_exponent must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        if self.convergence_tol >= self.step_size {
            return Err(Error::Config(
                "convergence_tol must be smaller than step_size".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed class centers: a `c x d` matrix of unit rows plus generation
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centers: Matrix,
    pub num_classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub force_exponent: f64,
    pub final_energy: f64,
    pub iterations_run: usize,
    /// True when the run stopped on the displacement tolerance rather than
    /// the iteration cap.
    pub converged: bool,
    pub min_pairwise_angle_deg: f64,
}

pub const ROW_NORM_TOL: f64 = 1e-9;

impl CentroidSet {
    /// Assemble and validate a centroid set; `min_pairwise_angle_deg` is
    /// always recomputed from the rows.
    pub fn from_parts(
        centers: Matrix,
        seed: u64,
        force_exponent: f64,
        final_energy: f64,
        iterations_run: usize,
        converged: bool,
    ) -> Result<CentroidSet> {
        let c = centers.rows();
        let d = centers.cols();
        if c < 2 || d < 2 {
            return Err(Error::Config(format!(
                "centroid set requires c >= 2 and d >= 2, got c={c}, d={d}"
            )));
        }
        for i in 0..c {
            let n = norm(centers.row(i));
            if (n - 1.0).abs() > ROW_NORM_TOL {
                return Err(Error::Schema(format!(
                    "centroid row {i} has norm {n} outside 1 +- {ROW_NORM_TOL:e}"
                )));
            }
        }
        let min_angle = min_pairwise_angle_deg(&centers)?;
        if min_angle <= 0.0 {
            return Err(Error::Schema(
                "centroid rows must be pairwise distinct".into(),
            ));
        }
        Ok(CentroidSet {
            num_classes: c,
            dim: d,
            centers,
            seed,
            force_exponent,
            final_energy,
            iterations_run,
            converged,
            min_pairwise_angle_deg: min_angle,
        })
    }
}

/// Minimum pairwise angle between rows, in degrees.
pub fn min_pairwise_angle_deg(centers: &Matrix) -> Result<f64> {
    let cos = pairwise_cosines(centers)?;
    let mut max_cos = -1.0_f64;
    for i in 0..cos.rows() {
        for j in (i + 1)..cos.rows() {
            max_cos = max_cos.max(cos.get(i, j));
        }
    }
    Ok(max_cos.clamp(-1.0, 1.0).acos().to_degrees())
}

const MIN_PAIR_DISTANCE: f64 = 1e-12;

/// Riesz energy `sum_{i<j} |p_i - p_j|^(-k)` over unit-norm rows.
pub fn energy(points: &Matrix, k: f64) -> Result<f64> {
    let c = points.rows();
    let mut total = 0.0;
    for i in 0..c {
        for j in (i + 1)..c {
            let d = distance(points.row(i), points.row(j));
            if d < MIN_PAIR_DISTANCE {
                return Err(Error::CoincidentPoints {
                    a: i,
                    b: j,
                    distance: d,
                });
            }
            total += d.powf(-k);
        }
    }
    Ok(total)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Net repulsive force on every point: the negative energy gradient,
/// `f_i = sum_{j != i} k |p_i - p_j|^(-k-2) (p_i - p_j)`.
fn repulsive_forces(points: &Matrix, k: f64) -> Result<Matrix> {
    let (c, d) = (points.rows(), points.cols());
    let mut forces = Matrix::zeros(c, d);
    for i in 0..c {
        for j in (i + 1)..c {
            let dist = distance(points.row(i), points.row(j));
            if dist < MIN_PAIR_DISTANCE {
                return Err(Error::CoincidentPoints {
                    a: i,
                    b: j,
                    distance: dist,
                });
            }
            let w = k * dist.powf(-k - 2.0);
            for l in 0..d {
                let diff = points.get(i, l) - points.get(j, l);
                forces.set(i, l, forces.get(i, l) + w * diff);
                forces.set(j, l, forces.get(j, l) - w * diff);
            }
        }
    }
    Ok(forces)
}

/// Project each force onto the tangent plane of its point:
/// `f - (f . p) p`.
fn tangential(points: &Matrix, forces: &Matrix) -> Matrix {
    let mut out = forces.clone();
    for i in 0..points.rows() {
        let p = points.row(i);
        let radial = dot(out.row(i), p);
        for (v, &pi) in out.row_mut(i).iter_mut().zip(p) {
            *v -= radial * pi;
        }
    }
    out
}

fn step_points(points: &Matrix, tangent: &Matrix, step: f64) -> Result<Matrix> {
    let moved = points.add_scaled(tangent, step)?;
    l2_normalize_rows(&moved)
}

fn max_row_displacement(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows())
        .map(|i| distance(a.row(i), b.row(i)))
        .fold(0.0, f64::max)
}

/// One unguarded relaxation step: move along the tangential force component
/// scaled by `cfg.step_size`, then re-project to the sphere.
pub fn repulsion_step(points: &Matrix, cfg: &GenConfig) -> Result<Matrix> {
    if cfg.step_size == 0.0 {
        return Ok(points.clone());
    }
    let forces = repulsive_forces(points, cfg.force_exponent)?;
    let tangent = tangential(points, &forces);
    step_points(points, &tangent, cfg.step_size)
}

/// Per-iteration progress report passed to generation observers.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    pub max_displacement: f64,
    pub step: f64,
}

/// Generate `c` evenly-distributed unit vectors in `d` dimensions.
pub fn generate(c: usize, d: usize, seed: u64, cfg: &GenConfig) -> Result<CentroidSet> {
    generate_observed(c, d, seed, cfg, |_, _| {})
}

/// [`generate`] with an observer invoked after every accepted iteration,
/// receiving the record and the current point matrix.
pub fn generate_observed(
    c: usize,
    d: usize,
    seed: u64,
    cfg: &GenConfig,
    mut observer: impl FnMut(&IterationRecord, &Matrix),
) -> Result<CentroidSet> {
    if c < 2 || d < 2 {
        return Err(Error::Config(format!(
            "generate requires c >= 2 and d >= 2, got c={c}, d={d}"
        )));
    }
    cfg.validate()?;

    let mut rng = Rng::new(seed);
    let mut points = initial_points(&mut rng, c, d)?;
    let k = cfg.force_exponent;

    let mut current_energy = energy(&points, k)?;
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut converged = false;

    // A step so small that no energy improvement is representable means we
    // are at equilibrium to machine precision.
    const STEP_FLOOR: f64 = 1e-17;

    'outer: for iter in 0..cfg.max_iterations {
        let forces = repulsive_forces(&points, k)?;
        let tangent = tangential(&points, &forces);

        let (candidate, candidate_energy) = loop {
            let candidate = step_points(&points, &tangent, step)?;
            let e = energy(&candidate, k)?;
            if e <= current_energy {
                break (candidate, e);
            }
            step *= 0.5;
            if step < STEP_FLOOR {
                converged = true;
                break 'outer;
            }
        };

        let displacement = max_row_displacement(&points, &candidate);
        iterations = iter + 1;
        let record = IterationRecord {
            iteration: iterations,
            energy_before: current_energy,
            energy_after: candidate_energy,
            max_displacement: displacement,
            step,
        };
        points = candidate;
        current_energy = candidate_energy;
        observer(&record, &points);

        // Let the step recover after backtracking, then apply decay.
        step = (step * 2.0).min(cfg.step_size) * cfg.step_decay;

        if displacement < cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    CentroidSet::from_parts(points, seed, k, current_energy, iterations, converged)
}

/// Gaussian rows projected to the sphere, re-drawing any row that lands
/// degenerate or closer than 1e-6 to an earlier one (near-coincident starts
/// would produce unbounded forces).
fn initial_points(rng: &mut Rng, c: usize, d: usize) -> Result<Matrix> {
    const COINCIDENCE: f64 = 1e-6;
    const MAX_ATTEMPTS: usize = 1000;

    let mut points = Matrix::zeros(c, d);
    for i in 0..c {
        let mut attempts = 0;
        loop {
            let draw = gaussian_matrix(rng, 1, d)?;
            let n = norm(draw.row(0));
            if n >= 1e-6 {
                for (dst, &v) in points.row_mut(i).iter_mut().zip(draw.row(0)) {
                    *dst = v / n;
                }
                let too_close =
                    (0..i).any(|j| distance(points.row(i), points.row(j)) < COINCIDENCE);
                if !too_close {
                    break;
                }
            }
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Config(
                    "could not draw non-coincident initial points".into(),
                ));
            }
        }
    }
    Ok(points)
}

/// Angle and norm statistics for a generated set.
#[derive(Debug, Clone)]
pub struct CentroidSummary {
    pub min_angle_deg: f64,
    pub mean_angle_deg: f64,
    pub max_angle_deg: f64,
    pub energy: f64,
    pub row_norms: Vec<f64>,
}

pub fn inspect(cs: &CentroidSet) -> Result<CentroidSummary> {
    let cos = pairwise_cosines(&cs.centers)?;
    let c = cos.rows();
    let mut min = f64::MAX;
    let mut max = f64::MIN;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..c {
        for j in (i + 1)..c {
            let angle = cos.get(i, j).clamp(-1.0, 1.0).acos().to_degrees();
            min = min.min(angle);
            max = max.max(angle);
            sum += angle;
            count += 1;
        }
    }
    Ok(CentroidSummary {
        min_angle_deg: min,
        mean_angle_deg: sum / count as f64,
        max_angle_deg: max,
        energy: energy(&cs.centers, cs.force_exponent)?,
        row_norms: (0..c).map(|i| norm(cs.centers.row(i))).collect(),
    })
}

impl std::fmt::Display for CentroidSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "pairwise angles (deg): min {:.4}  mean {:.4}  max {:.4}",
            self.min_angle_deg, self.mean_angle_deg, self.max_angle_deg
        )?;
        writeln!(f, "energy: {:.12}", self.energy)?;
        let worst = self
            .row_norms
            .iter()
            .map(|n| (n - 1.0).abs())
            .fold(0.0, f64::max);
        write!(f, "row norms: 1 +- {worst:.3e}")
    }
}
