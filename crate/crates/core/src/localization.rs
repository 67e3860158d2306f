//! Target localization from per-link delay and Doppler measurements.
//!
//! Each bistatic link's excess delay pins the target to an ellipsoid with
//! the transmitter and receiver at the foci; position comes from
//! intersecting several such surfaces, velocity from the linear system the
//! per-link Doppler projections form once position is known. Solvers carry
//! measurement variances through to parameter covariances so downstream
//! consumers can compare achieved scatter against predicted error.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::scene::{
    bistatic_doppler_hz, excess_delay_s, BistaticLink, Scenario, SceneError, SolveDimension,
    TargetState, Vec3,
};

/// One excess-delay measurement on one link.
#[derive(Clone, Debug)]
pub struct DelayObservation {
    pub link: BistaticLink,
    /// Measured delay excess over the line of sight, seconds.
    pub excess_delay_s: f64,
    /// Variance of that measurement, seconds^2.
    pub variance_s2: f64,
    /// When the frame that produced this measurement was captured.
    /// Observations far older than the newest one can be excluded via
    /// [`SolverOptions::epoch_window_s`].
    pub epoch_s: f64,
}

impl DelayObservation {
    pub fn new(link: BistaticLink, excess_delay_s: f64, variance_s2: f64) -> Self {
        DelayObservation { link, excess_delay_s, variance_s2, epoch_s: 0.0 }
    }
}

/// One excess-Doppler measurement on one link.
#[derive(Clone, Debug)]
pub struct DopplerObservation {
    pub link: BistaticLink,
    pub doppler_hz: f64,
    pub variance_hz2: f64,
}

/// Knobs of the position solver.
#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub dim: SolveDimension,
    /// Starting point; `None` derives one from the measurement geometry.
    pub initial_m: Option<Vec3>,
    pub max_iterations: usize,
    /// Step-size convergence threshold, meters.
    pub tolerance_m: f64,
    /// Only observations within this window behind the newest epoch
    /// participate; default infinite keeps everything.
    pub epoch_window_s: f64,
}

impl SolverOptions {
    pub fn new(dim: SolveDimension) -> Self {
        SolverOptions {
            dim,
            initial_m: None,
            max_iterations: 60,
            tolerance_m: 1e-9,
            epoch_window_s: f64::INFINITY,
        }
    }

    pub fn planar(z_m: f64) -> Self {
        SolverOptions::new(SolveDimension::Planar { z_m })
    }

    pub fn three_d() -> Self {
        SolverOptions::new(SolveDimension::ThreeD)
    }
}

/// Output of the position solver.
#[derive(Clone, Debug)]
pub struct PositionSolution {
    pub position_m: Vec3,
    /// Position covariance, meters^2, from the linearized weighted normal
    /// equations at the solution. Planar solves embed their 2x2 covariance
    /// in the x/y block and leave the z row and column zero.
    pub covariance_m2: [[f64; 3]; 3],
    /// Weighted RMS of the delay residuals, seconds.
    pub residual_rms_s: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PositionSolution {
    /// Predicted standard deviation of the position estimate, meters:
    /// square root of the covariance trace.
    pub fn predicted_std_m(&self) -> f64 {
        (self.covariance_m2[0][0] + self.covariance_m2[1][1] + self.covariance_m2[2][2]).sqrt()
    }
}

/// Output of the velocity solver.
#[derive(Clone, Debug)]
pub struct VelocitySolution {
    pub velocity_m_per_s: Vec3,
    /// Velocity covariance, (m/s)^2, planar solves embedded as above.
    pub covariance_m2_per_s2: [[f64; 3]; 3],
    /// Weighted RMS of the Doppler residuals, Hz.
    pub residual_rms_hz: f64,
}

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("solving {needed} coordinates needs at least {needed} usable links, got {got}")]
    TooFewLinks { needed: usize, got: usize },
    #[error("the delay ellipsoid misses the solve plane by {gap_m:.3} m")]
    PlaneMiss { gap_m: f64 },
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("measurement geometry is rank deficient along {null_direction:?}")]
    RankDeficient { null_direction: [f64; 3] },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

// ─── 1. Iso-delay ellipses ──────────────────────────────────────────────

/// Samples the locus of positions consistent with one excess-delay
/// measurement, cut by the horizontal plane `z = plane_z_m`.
///
/// The locus in 3D is a prolate spheroid with the link's nodes at the
/// foci (a sphere for a monostatic link); its plane section is computed
/// exactly from the quadric, so every returned vertex satisfies the
/// two-leg range equation to machine precision. The polyline is closed:
/// the last point repeats the first. A zero excess degenerates the
/// spheroid to the baseline segment and the cut to the part of it in the
/// plane.
pub fn ellipse_points(
    scenario: &Scenario,
    link: &BistaticLink,
    excess_delay_s: f64,
    plane_z_m: f64,
    n_points: usize,
) -> Result<Vec<Vec3>, LocalizationError> {
    if !(excess_delay_s.is_finite() && excess_delay_s >= 0.0) {
        return Err(LocalizationError::InvalidObservation(format!(
            "excess delay must be finite and non-negative, got {excess_delay_s}"
        )));
    }
    if n_points < 3 {
        return Err(LocalizationError::InvalidObservation(
            "an ellipse polyline needs at least 3 points".into(),
        ));
    }
    let (tx, rx) = scenario.resolve_link(link)?;
    let f1 = tx.position_m;
    let f2 = rx.position_m;
    let c = scenario.speed_of_light_m_per_s;
    let baseline = f1.distance(f2);
    let total = baseline + c * excess_delay_s;
    let center = (f1 + f2) * 0.5;
    let a = total * 0.5;
    let b_sq = a * a - baseline * baseline * 0.25;
    let scale = 1.0 + a + plane_z_m.abs();

    if b_sq <= scale * scale * 1e-24 {
        // Zero excess: the locus collapses onto the baseline segment.
        let tol = scale * 1e-9;
        let dz = f2.z - f1.z;
        if (f1.z - plane_z_m).abs() <= tol && (f2.z - plane_z_m).abs() <= tol {
            return Ok(vec![f1, f2, f1]);
        }
        if dz.abs() > tol {
            let s = (plane_z_m - f1.z) / dz;
            if (-1e-12..=1.0 + 1e-12).contains(&s) {
                let p = f1 + (f2 - f1) * s.clamp(0.0, 1.0);
                return Ok(vec![p, p]);
            }
        }
        let gap = (f1.z - plane_z_m).abs().min((f2.z - plane_z_m).abs());
        return Err(LocalizationError::PlaneMiss { gap_m: gap });
    }

    // Quadric of the spheroid: (X - center)^T M (X - center) = 1 with
    // M = u u^T / a^2 + (I - u u^T) / b^2 along the focal axis u.
    let m = if baseline > 0.0 {
        let u = (f2 - f1) / baseline;
        let uv = Vector3::new(u.x, u.y, u.z);
        let outer = uv * uv.transpose();
        outer / (a * a) + (Matrix3::identity() - outer) / b_sq
    } else {
        Matrix3::identity() / (a * a)
    };

    // Substitute z = plane_z_m and complete the square in (x, y).
    let wz = plane_z_m - center.z;
    let a2 = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let bv = Vector2::new(m[(0, 2)], m[(1, 2)]);
    let a2_inv = a2.try_inverse().expect("plane section of a positive quadric is positive");
    let w0 = -(a2_inv * bv) * wz;
    let rho = 1.0 - wz * wz * (m[(2, 2)] - bv.dot(&(a2_inv * bv)));
    if rho < 0.0 {
        // How far past the spheroid the plane sits, along z.
        let half_height = (1.0 / m[(2, 2)]).sqrt();
        let gap = (wz.abs() - half_height).max(0.0);
        return Err(LocalizationError::PlaneMiss { gap_m: gap });
    }

    let eig = nalgebra::SymmetricEigen::new(a2);
    let r0 = (rho / eig.eigenvalues[0]).max(0.0).sqrt();
    let r1 = (rho / eig.eigenvalues[1]).max(0.0).sqrt();
    let v0 = eig.eigenvectors.column(0);
    let v1 = eig.eigenvectors.column(1);
    let mut points = Vec::with_capacity(n_points + 1);
    for j in 0..n_points {
        let theta = std::f64::consts::TAU * j as f64 / n_points as f64;
        let p = w0 + v0 * (r0 * theta.cos()) + v1 * (r1 * theta.sin());
        points.push(Vec3::new(center.x + p.x, center.y + p.y, plane_z_m));
    }
    points.push(points[0]);
    Ok(points)
}

// ─── 2. Position solving ────────────────────────────────────────────────

fn prepare<'a>(
    scenario: &Scenario,
    observations: &'a [DelayObservation],
    options: &SolverOptions,
) -> Result<Vec<&'a DelayObservation>, LocalizationError> {
    if !(options.epoch_window_s >= 0.0) {
        return Err(LocalizationError::InvalidObservation(
            "epoch window must be non-negative".into(),
        ));
    }
    for o in observations {
        scenario.resolve_link(&o.link)?;
        if !(o.variance_s2.is_finite() && o.variance_s2 > 0.0) {
            return Err(LocalizationError::InvalidObservation(format!(
                "variance must be positive and finite, got {}",
                o.variance_s2
            )));
        }
        if !o.excess_delay_s.is_finite() || o.excess_delay_s < 0.0 {
            return Err(LocalizationError::InvalidObservation(format!(
                "excess delay must be finite and non-negative, got {}",
                o.excess_delay_s
            )));
        }
    }
    let newest = observations.iter().map(|o| o.epoch_s).fold(f64::NEG_INFINITY, f64::max);
    let obs: Vec<&DelayObservation> = observations
        .iter()
        .filter(|o| newest - o.epoch_s <= options.epoch_window_s)
        .collect();
    let needed = options.dim.dof();
    if obs.len() < needed {
        return Err(LocalizationError::TooFewLinks { needed, got: obs.len() });
    }
    Ok(obs)
}

/// Geometry-driven starting point: on each link's iso-delay ellipse take
/// the point nearest the centroid of the participating nodes, then blend
/// those points weighted by measurement precision.
fn default_initial(
    scenario: &Scenario,
    obs: &[&DelayObservation],
    plane_z: f64,
) -> Result<Vec3, LocalizationError> {
    let mut centroid = Vec3::ZERO;
    let mut n_nodes = 0.0;
    for o in obs {
        let (tx, rx) = scenario.resolve_link(&o.link)?;
        centroid = centroid + tx.position_m + rx.position_m;
        n_nodes += 2.0;
    }
    centroid = centroid / n_nodes;

    let mut acc = Vec3::ZERO;
    let mut weight_sum = 0.0;
    for o in obs {
        let ring = match ellipse_points(scenario, &o.link, o.excess_delay_s, plane_z, 64) {
            Ok(points) => points,
            Err(LocalizationError::PlaneMiss { .. }) => continue,
            Err(e) => return Err(e),
        };
        let ring = &ring[..ring.len() - 1];
        let (mut best, mut best_d) = (0usize, f64::INFINITY);
        for (j, p) in ring.iter().enumerate() {
            let d = p.distance(centroid);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        // One parabolic step through the neighbors sharpens the sample.
        let n = ring.len();
        let point = if n >= 3 {
            let dm = ring[(best + n - 1) % n].distance(centroid);
            let dp = ring[(best + 1) % n].distance(centroid);
            let denom = dm - 2.0 * best_d + dp;
            let offset = if denom.abs() > 1e-300 { (0.5 * (dm - dp) / denom).clamp(-1.0, 1.0) } else { 0.0 };
            let neighbor = if offset >= 0.0 { ring[(best + 1) % n] } else { ring[(best + n - 1) % n] };
            ring[best] + (neighbor - ring[best]) * offset.abs()
        } else {
            ring[best]
        };
        let w = 1.0 / o.variance_s2;
        acc = acc + point * w;
        weight_sum += w;
    }
    if weight_sum > 0.0 {
        Ok(acc / weight_sum)
    } else {
        Ok(centroid)
    }
}

/// Weighted Gauss-Newton multilateration over the iso-delay ellipses,
/// with Levenberg damping for far starting points.
///
/// Residuals are in delay seconds, weighted by inverse measurement
/// variance; the reported covariance is `(J^T W J)^-1` of the linearized
/// problem at the solution.
pub fn solve_position(
    scenario: &Scenario,
    observations: &[DelayObservation],
    options: &SolverOptions,
) -> Result<PositionSolution, LocalizationError> {
    let obs = prepare(scenario, observations, options)?;
    let dof = options.dim.dof();
    let plane_z = match options.dim {
        SolveDimension::Planar { z_m } => z_m,
        SolveDimension::ThreeD => {
            // Plane through the node centroid, for initialization only.
            let mut z = 0.0;
            let mut n = 0.0;
            for o in obs.iter() {
                let (tx, rx) = scenario.resolve_link(&o.link)?;
                z += tx.position_m.z + rx.position_m.z;
                n += 2.0;
            }
            z / n
        }
    };
    let mut x = match options.initial_m {
        Some(p) => p,
        None => default_initial(scenario, &obs, plane_z)?,
    };
    if let SolveDimension::Planar { z_m } = options.dim {
        x.z = z_m;
    }

    let weights: Vec<f64> = obs.iter().map(|o| 1.0 / o.variance_s2).collect();
    let cost_at = |p: Vec3| -> Result<f64, LocalizationError> {
        let mut c = 0.0;
        for (o, &w) in obs.iter().zip(&weights) {
            let r = o.excess_delay_s - excess_delay_s(scenario, &o.link, p)?;
            c += w * r * r;
        }
        Ok(c)
    };

    let c_light = scenario.speed_of_light_m_per_s;
    let mut lambda = 1e-4;
    let mut cost = cost_at(x)?;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..options.max_iterations {
        iterations += 1;
        // Jacobian of predicted excess delay and current residuals.
        let mut jt_w_j = DMatrix::<f64>::zeros(dof, dof);
        let mut jt_w_r = DVector::<f64>::zeros(dof);
        for (o, &w) in obs.iter().zip(&weights) {
            let (tx, rx) = scenario.resolve_link(&o.link)?;
            let u1 = (x - tx.position_m).normalized().ok_or_else(|| {
                SceneError::DegenerateGeometry(format!("solution hit node `{}`", tx.id))
            })?;
            let u2 = (x - rx.position_m).normalized().ok_or_else(|| {
                SceneError::DegenerateGeometry(format!("solution hit node `{}`", rx.id))
            })?;
            let g = (u1 + u2) / c_light;
            let grad = [g.x, g.y, g.z];
            let r = o.excess_delay_s - excess_delay_s(scenario, &o.link, x)?;
            for i in 0..dof {
                jt_w_r[i] += w * grad[i] * r;
                for j in 0..dof {
                    jt_w_j[(i, j)] += w * grad[i] * grad[j];
                }
            }
        }

        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = jt_w_j.clone();
            for i in 0..dof {
                damped[(i, i)] *= 1.0 + lambda;
            }
            let Some(step) = damped.lu().solve(&jt_w_r) else {
                lambda *= 10.0;
                continue;
            };
            let mut candidate = x;
            candidate.x += step[0];
            candidate.y += step[1];
            if dof == 3 {
                candidate.z += step[2];
            }
            let candidate_cost = cost_at(candidate)?;
            if candidate_cost <= cost {
                let step_norm = step.norm();
                x = candidate;
                cost = candidate_cost;
                lambda = (lambda * 0.25).max(1e-12);
                accepted = true;
                if step_norm < options.tolerance_m {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            break;
        }
    }

    // Covariance and residuals at the solution (undamped).
    let mut jt_w_j = DMatrix::<f64>::zeros(dof, dof);
    let mut rss = 0.0;
    let mut w_sum = 0.0;
    for (o, &w) in obs.iter().zip(&weights) {
        let (tx, rx) = scenario.resolve_link(&o.link)?;
        let u1 = (x - tx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("solution hit node `{}`", tx.id))
        })?;
        let u2 = (x - rx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("solution hit node `{}`", rx.id))
        })?;
        let g = (u1 + u2) / c_light;
        let grad = [g.x, g.y, g.z];
        for i in 0..dof {
            for j in 0..dof {
                jt_w_j[(i, j)] += w * grad[i] * grad[j];
            }
        }
        let r = o.excess_delay_s - excess_delay_s(scenario, &o.link, x)?;
        rss += w * r * r;
        w_sum += w;
    }
    let eig = jt_w_j.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_idx = (0..dof)
        .min_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap())
        .unwrap();
    if eig.eigenvalues[min_idx] <= max_eig * 1e-12 || max_eig <= 0.0 {
        let v = eig.eigenvectors.column(min_idx);
        let mut null = [0.0; 3];
        for i in 0..dof {
            null[i] = v[i];
        }
        return Err(LocalizationError::RankDeficient { null_direction: null });
    }
    let cov_small = jt_w_j.try_inverse().expect("positive definite normal matrix");
    let mut covariance = [[0.0; 3]; 3];
    for i in 0..dof {
        for j in 0..dof {
            covariance[i][j] = cov_small[(i, j)];
        }
    }

    Ok(PositionSolution {
        position_m: x,
        covariance_m2: covariance,
        residual_rms_s: (rss / w_sum).sqrt(),
        iterations,
        converged,
    })
}

// ─── 3. Velocity solving ────────────────────────────────────────────────

/// Weighted linear least squares for target velocity at a known position.
///
/// Per-link Doppler is affine in the target velocity: the slope is the
/// projection onto the bisector direction `u_tx + u_rx` scaled by
/// `-f_c / c`, and the intercept is the Doppler a motionless target would
/// show (node motion only). Geometry where every link projects onto the
/// same direction cannot be inverted and reports the blind direction.
pub fn solve_velocity(
    scenario: &Scenario,
    position_m: Vec3,
    observations: &[DopplerObservation],
    dim: SolveDimension,
) -> Result<VelocitySolution, LocalizationError> {
    let dof = dim.dof();
    if observations.len() < dof {
        return Err(LocalizationError::TooFewLinks { needed: dof, got: observations.len() });
    }
    let mut rows = Vec::with_capacity(observations.len());
    let mut rhs = Vec::with_capacity(observations.len());
    let mut weights = Vec::with_capacity(observations.len());
    for o in observations {
        if !(o.variance_hz2.is_finite() && o.variance_hz2 > 0.0) {
            return Err(LocalizationError::InvalidObservation(format!(
                "Doppler variance must be positive and finite, got {}",
                o.variance_hz2
            )));
        }
        let (tx, rx) = scenario.resolve_link(&o.link)?;
        let u1 = (position_m - tx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("target coincides with node `{}`", tx.id))
        })?;
        let u2 = (position_m - rx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("target coincides with node `{}`", rx.id))
        })?;
        let slope = (u1 + u2) * (-tx.carrier_frequency_hz / scenario.speed_of_light_m_per_s);
        // Doppler of a motionless target at this position: node motion only.
        let still = TargetState {
            position_m,
            velocity_m_per_s: Vec3::ZERO,
            mean_reflectivity_m2: 0.0,
        };
        let intercept = bistatic_doppler_hz(scenario, &o.link, &still)?;
        rows.push(slope);
        rhs.push(o.doppler_hz - intercept);
        weights.push(1.0 / o.variance_hz2);
    }

    let mut normal = DMatrix::<f64>::zeros(dof, dof);
    let mut moment = DVector::<f64>::zeros(dof);
    for ((row, &b), &w) in rows.iter().zip(&rhs).zip(&weights) {
        let a = [row.x, row.y, row.z];
        for i in 0..dof {
            moment[i] += w * a[i] * b;
            for j in 0..dof {
                normal[(i, j)] += w * a[i] * a[j];
            }
        }
    }
    let eig = normal.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_idx = (0..dof)
        .min_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap())
        .unwrap();
    if max_eig <= 0.0 || eig.eigenvalues[min_idx] <= max_eig * 1e-12 {
        let v = eig.eigenvectors.column(min_idx);
        let mut null = [0.0; 3];
        for i in 0..dof {
            null[i] = v[i];
        }
        return Err(LocalizationError::RankDeficient { null_direction: null });
    }
    let cov_small = normal.try_inverse().expect("positive definite normal matrix");
    let sol = &cov_small * moment;
    let velocity = match dim {
        SolveDimension::Planar { .. } => Vec3::new(sol[0], sol[1], 0.0),
        SolveDimension::ThreeD => Vec3::new(sol[0], sol[1], sol[2]),
    };
    let mut covariance = [[0.0; 3]; 3];
    for i in 0..dof {
        for j in 0..dof {
            covariance[i][j] = cov_small[(i, j)];
        }
    }
    let mut rss = 0.0;
    let mut w_sum = 0.0;
    for ((row, &b), &w) in rows.iter().zip(&rhs).zip(&weights) {
        let r = b - row.dot(velocity);
        rss += w * r * r;
        w_sum += w;
    }
    Ok(VelocitySolution {
        velocity_m_per_s: velocity,
        covariance_m2_per_s2: covariance,
        residual_rms_hz: (rss / w_sum).sqrt(),
    })
}

// ─── 4. Outlier rejection ───────────────────────────────────────────────

/// Result of iterative outlier screening.
#[derive(Clone, Debug)]
pub struct OutlierReport {
    pub solution: PositionSolution,
    /// Indices into the input slice that survived.
    pub kept_indices: Vec<usize>,
    /// Indices rejected, in rejection order.
    pub rejected_indices: Vec<usize>,
}

/// Iteratively re-solves and drops the worst measurement while its
/// standardized residual exceeds `threshold_sigma`, keeping at least
/// three measurements (or the solve dimension, whichever is larger).
pub fn reject_outliers(
    scenario: &Scenario,
    observations: &[DelayObservation],
    options: &SolverOptions,
    threshold_sigma: f64,
) -> Result<OutlierReport, LocalizationError> {
    if !(threshold_sigma.is_finite() && threshold_sigma > 0.0) {
        return Err(LocalizationError::InvalidObservation(
            "outlier threshold must be positive".into(),
        ));
    }
    let floor = options.dim.dof().max(3);
    let mut kept: Vec<usize> = (0..observations.len()).collect();
    let mut rejected = Vec::new();
    loop {
        let subset: Vec<DelayObservation> =
            kept.iter().map(|&i| observations[i].clone()).collect();
        let solution = solve_position(scenario, &subset, options)?;
        if kept.len() <= floor {
            return Ok(OutlierReport { solution, kept_indices: kept, rejected_indices: rejected });
        }
        let mut worst: Option<(usize, f64)> = None;
        for (pos, o) in subset.iter().enumerate() {
            let predicted = excess_delay_s(scenario, &o.link, solution.position_m)?;
            let z = (o.excess_delay_s - predicted).abs() / o.variance_s2.sqrt();
            if worst.map_or(true, |(_, wz)| z > wz) {
                worst = Some((pos, z));
            }
        }
        match worst {
            Some((pos, z)) if z > threshold_sigma => {
                rejected.push(kept.remove(pos));
            }
            _ => {
                return Ok(OutlierReport {
                    solution,
                    kept_indices: kept,
                    rejected_indices: rejected,
                });
            }
        }
    }
}

// ─── Tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gdop, NodeRole, NodeState};
    use approx::assert_relative_eq;

    const C: f64 = 299_792_458.0;

    fn node(id: &str, pos: Vec3, vel: Vec3, role: NodeRole) -> NodeState {
        NodeState {
            id: id.into(),
            position_m: pos,
            velocity_m_per_s: vel,
            role,
            carrier_frequency_hz: 5.2e9,
        }
    }

    fn three_rx_scene() -> (Scenario, Vec<BistaticLink>) {
        let scenario = Scenario::new(
            vec![
                node("tx", Vec3::ZERO, Vec3::ZERO, NodeRole::TxOnly),
                node("rx1", Vec3::new(60.0, 0.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
                node("rx2", Vec3::new(0.0, 80.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
                node("rx3", Vec3::new(-50.0, 40.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
            ],
            vec![],
            vec![],
        );
        let links = vec![
            BistaticLink::new("tx", "rx1"),
            BistaticLink::new("tx", "rx2"),
            BistaticLink::new("tx", "rx3"),
        ];
        (scenario, links)
    }

    fn exact_observations(
        scenario: &Scenario,
        links: &[BistaticLink],
        target: Vec3,
        sigma: f64,
    ) -> Vec<DelayObservation> {
        links
            .iter()
            .map(|link| {
                DelayObservation::new(
                    link.clone(),
                    excess_delay_s(scenario, link, target).unwrap(),
                    sigma * sigma,
                )
            })
            .collect()
    }

    #[test]
    fn ellipse_vertices_satisfy_the_range_equation() {
        let (scenario, links) = three_rx_scene();
        let excess = 100e-9;
        let points = ellipse_points(&scenario, &links[0], excess, 0.0, 64).unwrap();
        assert_eq!(points.len(), 65);
        assert_eq!(points[0], points[64]);
        let total = 60.0 + C * excess;
        for p in &points {
            let two_leg = p.distance(Vec3::ZERO) + p.distance(Vec3::new(60.0, 0.0, 0.0));
            assert!((two_leg - total).abs() < 1e-9, "range violation: {}", two_leg - total);
            assert_eq!(p.z, 0.0);
        }
    }

    #[test]
    fn offset_plane_cut_still_satisfies_the_range_equation() {
        let (scenario, links) = three_rx_scene();
        let excess = 100e-9;
        let points = ellipse_points(&scenario, &links[0], excess, 10.0, 32).unwrap();
        let total = 60.0 + C * excess;
        for p in &points {
            let two_leg = p.distance(Vec3::ZERO) + p.distance(Vec3::new(60.0, 0.0, 0.0));
            assert!((two_leg - total).abs() < 1e-9);
            assert_eq!(p.z, 10.0);
        }
    }

    #[test]
    fn plane_beyond_the_spheroid_is_a_miss() {
        let (scenario, links) = three_rx_scene();
        // Semi-minor axis is ~33.5 m here; z = 40 cannot intersect.
        let err = ellipse_points(&scenario, &links[0], 100e-9, 40.0, 32);
        match err {
            Err(LocalizationError::PlaneMiss { gap_m }) => assert!(gap_m > 0.0),
            other => panic!("expected plane miss, got {other:?}"),
        }
    }

    #[test]
    fn monostatic_locus_is_a_circle() {
        let scenario = Scenario::new(
            vec![node("radar", Vec3::new(5.0, -3.0, 0.0), Vec3::ZERO, NodeRole::TxRx)],
            vec![],
            vec![],
        );
        let link = BistaticLink::new("radar", "radar");
        let excess = 200e-9;
        let points = ellipse_points(&scenario, &link, excess, 0.0, 48).unwrap();
        let radius = C * excess / 2.0;
        for p in &points {
            assert_relative_eq!(
                p.distance(Vec3::new(5.0, -3.0, 0.0)),
                radius,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn zero_excess_degenerates_to_the_baseline() {
        let (scenario, links) = three_rx_scene();
        let points = ellipse_points(&scenario, &links[0], 0.0, 0.0, 16).unwrap();
        assert_eq!(points, vec![Vec3::ZERO, Vec3::new(60.0, 0.0, 0.0), Vec3::ZERO]);
    }

    #[test]
    fn planar_multilateration_recovers_an_exact_target() {
        let (scenario, links) = three_rx_scene();
        let truth = Vec3::new(25.0, 30.0, 0.0);
        let obs = exact_observations(&scenario, &links[..2], truth, 1e-9);
        let solution = solve_position(&scenario, &obs, &SolverOptions::planar(0.0)).unwrap();
        assert!(solution.converged);
        assert!(solution.position_m.distance(truth) < 1e-6, "err {}", solution.position_m.distance(truth));
        assert!(solution.residual_rms_s < 1e-15);
        // Covariance must be symmetric positive.
        for i in 0..2 {
            assert!(solution.covariance_m2[i][i] > 0.0);
            for j in 0..2 {
                assert_relative_eq!(
                    solution.covariance_m2[i][j],
                    solution.covariance_m2[j][i],
                    max_relative = 1e-9
                );
            }
        }
        assert_eq!(solution.covariance_m2[2][2], 0.0);
    }

    #[test]
    fn three_d_solve_needs_out_of_plane_geometry() {
        let scenario = Scenario::new(
            vec![
                node("tx", Vec3::ZERO, Vec3::ZERO, NodeRole::TxOnly),
                node("rx1", Vec3::new(60.0, 0.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
                node("rx2", Vec3::new(0.0, 80.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
                node("rx3", Vec3::new(30.0, 40.0, 50.0), Vec3::ZERO, NodeRole::RxOnly),
            ],
            vec![],
            vec![],
        );
        let links = vec![
            BistaticLink::new("tx", "rx1"),
            BistaticLink::new("tx", "rx2"),
            BistaticLink::new("tx", "rx3"),
        ];
        let truth = Vec3::new(22.0, 28.0, 6.0);
        let obs = exact_observations(&scenario, &links, truth, 1e-9);
        let mut options = SolverOptions::three_d();
        options.initial_m = Some(Vec3::new(10.0, 10.0, 0.0));
        let solution = solve_position(&scenario, &obs, &options).unwrap();
        assert!(solution.position_m.distance(truth) < 1e-5, "err {}", solution.position_m.distance(truth));
    }

    #[test]
    fn solver_covariance_agrees_with_dilution_of_precision() {
        let (scenario, links) = three_rx_scene();
        let truth = Vec3::new(25.0, 30.0, 0.0);
        let sigma = 2e-9;
        let obs = exact_observations(&scenario, &links, truth, sigma);
        let dim = SolveDimension::Planar { z_m: 0.0 };
        let solution = solve_position(&scenario, &obs, &SolverOptions::new(dim)).unwrap();
        let dilution = gdop(&scenario, &links, truth, dim).unwrap();
        assert_relative_eq!(
            solution.predicted_std_m(),
            dilution.value * C * sigma,
            max_relative = 1e-6
        );
    }

    #[test]
    fn default_initialization_converges_without_a_hint() {
        let (scenario, links) = three_rx_scene();
        let truth = Vec3::new(-10.0, 55.0, 0.0);
        let obs = exact_observations(&scenario, &links, truth, 1e-9);
        let solution = solve_position(&scenario, &obs, &SolverOptions::planar(0.0)).unwrap();
        assert!(solution.position_m.distance(truth) < 1e-6);
    }

    #[test]
    fn epoch_window_drops_stale_measurements() {
        let (scenario, links) = three_rx_scene();
        let truth = Vec3::new(25.0, 30.0, 0.0);
        let mut obs = exact_observations(&scenario, &links, truth, 1e-9);
        obs[0].epoch_s = 0.0;
        obs[1].epoch_s = 0.0;
        obs[2].epoch_s = 10.0;
        let mut options = SolverOptions::planar(0.0);
        options.epoch_window_s = 5.0;
        match solve_position(&scenario, &obs, &options) {
            Err(LocalizationError::TooFewLinks { needed: 2, got: 1 }) => {}
            other => panic!("expected a too-few-links error, got {other:?}"),
        }
        options.epoch_window_s = f64::INFINITY;
        assert!(solve_position(&scenario, &obs, &options).is_ok());
    }

    #[test]
    fn velocity_recovery_with_moving_nodes_is_exact() {
        let scenario = Scenario::new(
            vec![
                node("tx", Vec3::ZERO, Vec3::new(1.5, -0.5, 0.0), NodeRole::TxOnly),
                node("rx1", Vec3::new(60.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), NodeRole::RxOnly),
                node("rx2", Vec3::new(0.0, 80.0, 0.0), Vec3::ZERO, NodeRole::RxOnly),
            ],
            vec![],
            vec![],
        );
        let links = [BistaticLink::new("tx", "rx1"), BistaticLink::new("tx", "rx2")];
        let position = Vec3::new(25.0, 30.0, 0.0);
        let truth_v = Vec3::new(4.0, -7.0, 0.0);
        let target = TargetState {
            position_m: position,
            velocity_m_per_s: truth_v,
            mean_reflectivity_m2: 1.0,
        };
        let obs: Vec<DopplerObservation> = links
            .iter()
            .map(|link| DopplerObservation {
                link: link.clone(),
                doppler_hz: bistatic_doppler_hz(&scenario, link, &target).unwrap(),
                variance_hz2: 1.0,
            })
            .collect();
        let solution =
            solve_velocity(&scenario, position, &obs, SolveDimension::Planar { z_m: 0.0 }).unwrap();
        assert!(solution.velocity_m_per_s.distance(truth_v) < 1e-8);
        assert!(solution.residual_rms_hz < 1e-9);
    }

    #[test]
    fn parallel_projections_cannot_resolve_velocity() {
        // Two monostatic radars at the same spot see the same projection.
        let scenario = Scenario::new(
            vec![
                node("r1", Vec3::ZERO, Vec3::ZERO, NodeRole::TxRx),
                node("r2", Vec3::ZERO, Vec3::ZERO, NodeRole::TxRx),
            ],
            vec![],
            vec![],
        );
        let obs = vec![
            DopplerObservation {
                link: BistaticLink::new("r1", "r1"),
                doppler_hz: 10.0,
                variance_hz2: 1.0,
            },
            DopplerObservation {
                link: BistaticLink::new("r2", "r2"),
                doppler_hz: 10.0,
                variance_hz2: 1.0,
            },
        ];
        let position = Vec3::new(40.0, 0.0, 0.0);
        match solve_velocity(&scenario, position, &obs, SolveDimension::Planar { z_m: 0.0 }) {
            Err(LocalizationError::RankDeficient { null_direction }) => {
                // Blind along y: perpendicular to the shared look direction.
                assert!(null_direction[0].abs() < 1e-9);
                assert!(null_direction[1].abs() > 0.99);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_link_is_identified_and_rejected() {
        let (scenario, mut links) = three_rx_scene();
        links.push(BistaticLink::new("tx", "rx1"));
        links.push(BistaticLink::new("tx", "rx2"));
        let truth = Vec3::new(25.0, 30.0, 0.0);
        let mut obs = exact_observations(&scenario, &links, truth, 1e-9);
        obs[1].excess_delay_s += 500e-9;
        let report =
            reject_outliers(&scenario, &obs, &SolverOptions::planar(0.0), 3.0).unwrap();
        assert_eq!(report.rejected_indices, vec![1]);
        assert_eq!(report.kept_indices, vec![0, 2, 3, 4]);
        assert!(report.solution.position_m.distance(truth) < 1e-6);
    }

    #[test]
    fn too_few_links_is_an_error() {
        let (scenario, links) = three_rx_scene();
        let obs = exact_observations(&scenario, &links[..1], Vec3::new(25.0, 30.0, 0.0), 1e-9);
        match solve_position(&scenario, &obs, &SolverOptions::planar(0.0)) {
            Err(LocalizationError::TooFewLinks { needed: 2, got: 1 }) => {}
            other => panic!("expected too-few-links, got {other:?}"),
        }
    }
}
