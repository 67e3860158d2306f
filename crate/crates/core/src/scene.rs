//! Scene geometry: nodes, targets, clutter, and the bistatic observables
//! they induce.
//!
//! All positions are meters in a shared Cartesian frame, velocities are
//! meters per second, and time derivatives assume straight-line constant
//! velocity motion evaluated at the scene epoch. A sensing link is a
//! transmitter/receiver node pair; the observables exposed here are the
//! bistatic (two-leg) range, the excess delay relative to the line of
//! sight, the excess Doppler induced by target motion, the bistatic angle,
//! the Cassini-oval echo attenuation, and the geometric dilution of
//! precision of a link set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;

/// Default propagation speed, meters per second.
pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;

// ─── Vectors ────────────────────────────────────────────────────────────

/// Cartesian 3-vector, serialized as a `[x, y, z]` array.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    /// Unit vector in this direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Serialize for Vec3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y, self.z].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(x, y, z))
    }
}

// ─── Scene elements ─────────────────────────────────────────────────────

/// What a node's hardware permits it to do on a link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    TxOnly,
    RxOnly,
    TxRx,
}

impl NodeRole {
    pub fn can_transmit(self) -> bool {
        matches!(self, NodeRole::TxOnly | NodeRole::TxRx)
    }

    pub fn can_receive(self) -> bool {
        matches!(self, NodeRole::RxOnly | NodeRole::TxRx)
    }
}

/// A radio node participating in the sensing network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeState {
    pub id: String,
    pub position_m: Vec3,
    pub velocity_m_per_s: Vec3,
    pub role: NodeRole,
    pub carrier_frequency_hz: f64,
}

/// A point target with a mean echo power scale.
///
/// `mean_reflectivity_m2` is the normalized cross-section sigma/(4 pi): a
/// value of 1 m^2 makes the echo at equal leg products as strong as the
/// direct transmission over the same baseline (see
/// [`cassini_excess_attenuation_db`]).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TargetState {
    pub position_m: Vec3,
    pub velocity_m_per_s: Vec3,
    pub mean_reflectivity_m2: f64,
}

/// A static scatterer contributing a clutter path.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClutterPoint {
    pub position_m: Vec3,
    /// Complex amplitude scale playing the role of a root cross-section,
    /// in the same 1 m reference normalization as target reflectivity.
    pub amplitude_re: f64,
    pub amplitude_im: f64,
}

/// A transmitter/receiver node pairing, by node id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BistaticLink {
    pub tx: String,
    pub rx: String,
}

impl BistaticLink {
    pub fn new(tx: impl Into<String>, rx: impl Into<String>) -> Self {
        BistaticLink { tx: tx.into(), rx: rx.into() }
    }

    /// Stable label used in artifact names and seed derivation.
    pub fn label(&self) -> String {
        format!("{}->{}", self.tx, self.rx)
    }
}

/// The full scene: nodes, targets, clutter, and the propagation speed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub nodes: Vec<NodeState>,
    pub targets: Vec<TargetState>,
    pub clutter: Vec<ClutterPoint>,
    pub speed_of_light_m_per_s: f64,
}

impl Scenario {
    pub fn new(nodes: Vec<NodeState>, targets: Vec<TargetState>, clutter: Vec<ClutterPoint>) -> Self {
        Scenario { nodes, targets, clutter, speed_of_light_m_per_s: SPEED_OF_LIGHT_M_PER_S }
    }

    pub fn node(&self, id: &str) -> Result<&NodeState, SceneError> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| SceneError::UnknownNode(id.to_string()))
    }

    /// Resolves a link to its endpoint nodes, checking ids and roles.
    pub fn resolve_link(&self, link: &BistaticLink) -> Result<(&NodeState, &NodeState), SceneError> {
        let tx = self.node(&link.tx)?;
        let rx = self.node(&link.rx)?;
        if !tx.role.can_transmit() {
            return Err(SceneError::RoleMismatch { id: tx.id.clone(), wanted: "transmit" });
        }
        if !rx.role.can_receive() {
            return Err(SceneError::RoleMismatch { id: rx.id.clone(), wanted: "receive" });
        }
        Ok((tx, rx))
    }

    /// Structural checks: unique node ids, physical constants, finite fields.
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.speed_of_light_m_per_s.is_finite() && self.speed_of_light_m_per_s > 0.0) {
            return Err(SceneError::InvalidScenario("speed of light must be positive and finite".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|m| m.id == n.id) {
                return Err(SceneError::DuplicateNodeId(n.id.clone()));
            }
            if !(n.position_m.is_finite() && n.velocity_m_per_s.is_finite()) {
                return Err(SceneError::InvalidScenario(format!("node `{}` has non-finite state", n.id)));
            }
            if !(n.carrier_frequency_hz.is_finite() && n.carrier_frequency_hz > 0.0) {
                return Err(SceneError::InvalidScenario(format!("node `{}` carrier frequency must be positive", n.id)));
            }
        }
        for t in &self.targets {
            if !(t.position_m.is_finite() && t.velocity_m_per_s.is_finite()) {
                return Err(SceneError::InvalidScenario("target has non-finite state".into()));
            }
            if !(t.mean_reflectivity_m2.is_finite() && t.mean_reflectivity_m2 >= 0.0) {
                return Err(SceneError::InvalidScenario("target reflectivity must be non-negative".into()));
            }
        }
        for c in &self.clutter {
            if !(c.position_m.is_finite() && c.amplitude_re.is_finite() && c.amplitude_im.is_finite()) {
                return Err(SceneError::InvalidScenario("clutter point has non-finite state".into()));
            }
        }
        Ok(())
    }
}

/// Dimensionality of a position-domain solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SolveDimension {
    /// Target constrained to the horizontal plane `z = z_m`.
    Planar { z_m: f64 },
    /// Unconstrained 3D solve.
    ThreeD,
}

impl SolveDimension {
    pub fn dof(self) -> usize {
        match self {
            SolveDimension::Planar { .. } => 2,
            SolveDimension::ThreeD => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("node `{id}` cannot {wanted} on this link")]
    RoleMismatch { id: String, wanted: &'static str },
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("dilution of precision needs at least {needed} links, got {got}")]
    TooFewLinks { needed: usize, got: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

// ─── Range and delay observables ────────────────────────────────────────

/// Line-of-sight range of a link, meters. Zero for a monostatic link.
pub fn los_range_m(scenario: &Scenario, link: &BistaticLink) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    Ok(tx.position_m.distance(rx.position_m))
}

/// Two-leg range transmitter -> point -> receiver, meters.
///
/// Defined for every point; it degenerates to the line-of-sight range when
/// the point sits on the baseline segment.
pub fn bistatic_range_m(scenario: &Scenario, link: &BistaticLink, position_m: Vec3) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    Ok(tx.position_m.distance(position_m) + rx.position_m.distance(position_m))
}

/// Delay excess of the echo path over the line of sight, seconds.
///
/// This is the observable a receiver can measure without clock sharing: at
/// the scene epoch both the direct wave and the echo leave the transmitter
/// together, so their arrival difference survives unknown clock offsets.
/// Non-negative by the triangle inequality.
pub fn excess_delay_s(scenario: &Scenario, link: &BistaticLink, position_m: Vec3) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    let echo = tx.position_m.distance(position_m) + rx.position_m.distance(position_m);
    let los = tx.position_m.distance(rx.position_m);
    Ok((echo - los) / scenario.speed_of_light_m_per_s)
}

/// d/dt of `||a - b||` for two points in constant-velocity motion.
/// Returns 0 for coincident points (a body has no range rate to itself).
fn range_rate(a_pos: Vec3, a_vel: Vec3, b_pos: Vec3, b_vel: Vec3) -> f64 {
    let d = a_pos - b_pos;
    let r = d.norm();
    if r == 0.0 {
        0.0
    } else {
        d.dot(a_vel - b_vel) / r
    }
}

/// Rate of change of the two-leg range for a point mover, m/s.
pub fn bistatic_range_rate_mps(
    scenario: &Scenario,
    link: &BistaticLink,
    position_m: Vec3,
    velocity_m_per_s: Vec3,
) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    for node in [tx, rx] {
        if node.position_m.distance(position_m) == 0.0 {
            return Err(SceneError::DegenerateGeometry(format!(
                "point coincides with node `{}`",
                node.id
            )));
        }
    }
    Ok(range_rate(tx.position_m, tx.velocity_m_per_s, position_m, velocity_m_per_s)
        + range_rate(rx.position_m, rx.velocity_m_per_s, position_m, velocity_m_per_s))
}

/// Rate of change of the line-of-sight range, m/s. Zero for monostatic.
pub fn los_range_rate_mps(scenario: &Scenario, link: &BistaticLink) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    Ok(range_rate(tx.position_m, tx.velocity_m_per_s, rx.position_m, rx.velocity_m_per_s))
}

/// Excess Doppler of a target echo relative to the line of sight, Hz.
///
/// Physical range-rate convention:
/// `doppler = -(f_c / c) * d/dt (bistatic range - LOS range)`,
/// evaluated at the scene epoch with the transmitter's carrier. A target
/// whose echo path shortens relative to the LOS produces positive Doppler.
pub fn bistatic_doppler_hz(
    scenario: &Scenario,
    link: &BistaticLink,
    target: &TargetState,
) -> Result<f64, SceneError> {
    let (tx, _) = scenario.resolve_link(link)?;
    let carrier = tx.carrier_frequency_hz;
    let echo_rate =
        bistatic_range_rate_mps(scenario, link, target.position_m, target.velocity_m_per_s)?;
    let los_rate = los_range_rate_mps(scenario, link)?;
    Ok(-(carrier / scenario.speed_of_light_m_per_s) * (echo_rate - los_rate))
}

/// Bistatic angle at the target: the angle subtended by the two nodes as
/// seen from the target position, radians in `[0, pi]`. Zero for a
/// monostatic link.
pub fn bistatic_angle_rad(
    scenario: &Scenario,
    link: &BistaticLink,
    position_m: Vec3,
) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    let to_tx = (tx.position_m - position_m)
        .normalized()
        .ok_or_else(|| SceneError::DegenerateGeometry(format!("point coincides with node `{}`", tx.id)))?;
    let to_rx = (rx.position_m - position_m)
        .normalized()
        .ok_or_else(|| SceneError::DegenerateGeometry(format!("point coincides with node `{}`", rx.id)))?;
    Ok(to_tx.dot(to_rx).clamp(-1.0, 1.0).acos())
}

/// Echo-to-direct power ratio in dB for a unit-reflectivity point.
///
/// Bistatic radar and Friis spreading give
/// `ratio = sigma_norm * R_los^2 / (R_tx * R_rx)^2` with the cross-section
/// normalization `sigma_norm = sigma / (4 pi) = 1 m^2`, so 0 dB means the
/// echo arrives as strong as the direct transmission. Contours of constant
/// value are Cassini ovals around the two nodes.
pub fn cassini_excess_attenuation_db(
    scenario: &Scenario,
    link: &BistaticLink,
    position_m: Vec3,
) -> Result<f64, SceneError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    let r1 = tx.position_m.distance(position_m);
    let r2 = rx.position_m.distance(position_m);
    let rlos = tx.position_m.distance(rx.position_m);
    Ok(10.0 * ((rlos * rlos) / (r1 * r1 * r2 * r2)).log10())
}

// ─── Dilution of precision ──────────────────────────────────────────────

/// Result of a dilution-of-precision evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GdopEstimate {
    /// Dimensionless dilution: predicted position standard deviation is
    /// `value * c * sigma_tau` for homogeneous delay noise `sigma_tau`.
    /// `f64::INFINITY` when the geometry is rank deficient.
    pub value: f64,
    /// Numerical rank of the excess-range direction Gram matrix.
    pub rank: usize,
}

/// Geometric dilution of precision of a link set at a target position.
///
/// Rows of the design matrix are gradients of per-link excess range with
/// respect to target position (the ellipse normals `u_tx + u_rx`). The
/// dilution is `sqrt(trace((J^T J)^-1))` over the solve dimensions:
/// 3 principal directions for [`SolveDimension::ThreeD`], the 2
/// best-determined ones for [`SolveDimension::Planar`] (which makes the
/// value invariant under rigid motions of the whole scene). Rank-deficient
/// geometries yield the `+inf` sentinel rather than an error.
pub fn gdop(
    scenario: &Scenario,
    links: &[BistaticLink],
    position_m: Vec3,
    dim: SolveDimension,
) -> Result<GdopEstimate, SceneError> {
    let needed = dim.dof();
    if links.len() < needed {
        return Err(SceneError::TooFewLinks { needed, got: links.len() });
    }
    let mut gram = nalgebra::Matrix3::<f64>::zeros();
    for link in links {
        let (tx, rx) = scenario.resolve_link(link)?;
        let to_tx = (position_m - tx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("target coincides with node `{}`", tx.id))
        })?;
        let to_rx = (position_m - rx.position_m).normalized().ok_or_else(|| {
            SceneError::DegenerateGeometry(format!("target coincides with node `{}`", rx.id))
        })?;
        let g = to_tx + to_rx;
        let gv = nalgebra::Vector3::new(g.x, g.y, g.z);
        gram += gv * gv.transpose();
    }
    let eigen = nalgebra::SymmetricEigen::new(gram);
    let mut lambdas: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tol = lambdas[0].max(0.0) * 1e-12;
    let rank = lambdas.iter().filter(|&&l| l > tol).count();
    if rank < needed || lambdas[0] <= 0.0 {
        return Ok(GdopEstimate { value: f64::INFINITY, rank });
    }
    let value = lambdas[..needed].iter().map(|l| 1.0 / l).sum::<f64>().sqrt();
    Ok(GdopEstimate { value, rank })
}

// ─── Coverage rasters ───────────────────────────────────────────────────

/// Sampling grid for a horizontal-plane raster.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RasterGrid {
    pub x_start_m: f64,
    pub x_step_m: f64,
    pub nx: usize,
    pub y_start_m: f64,
    pub y_step_m: f64,
    pub ny: usize,
    pub plane_z_m: f64,
}

impl RasterGrid {
    pub fn point(&self, ix: usize, iy: usize) -> Vec3 {
        Vec3::new(
            self.x_start_m + self.x_step_m * ix as f64,
            self.y_start_m + self.y_step_m * iy as f64,
            self.plane_z_m,
        )
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A scalar field sampled on a [`RasterGrid`], row-major with y as the
/// outer index.
#[derive(Clone, Debug)]
pub struct PlanarRaster {
    pub grid: RasterGrid,
    pub values: Vec<f64>,
}

fn raster_of(
    grid: &RasterGrid,
    f: impl Fn(Vec3) -> f64 + Sync + Send,
) -> PlanarRaster {
    let nx = grid.nx;
    let values = parallel::map_indexed(grid.len(), |i| f(grid.point(i % nx, i / nx)));
    PlanarRaster { grid: *grid, values }
}

/// Cassini excess-attenuation raster (dB) of a link over a plane.
pub fn cassini_raster(
    scenario: &Scenario,
    link: &BistaticLink,
    grid: &RasterGrid,
) -> Result<PlanarRaster, SceneError> {
    scenario.resolve_link(link)?;
    Ok(raster_of(grid, |p| {
        cassini_excess_attenuation_db(scenario, link, p).unwrap_or(f64::INFINITY)
    }))
}

/// Dilution-of-precision raster of a link set over a plane. Degenerate
/// points carry the `+inf` sentinel.
pub fn gdop_raster(
    scenario: &Scenario,
    links: &[BistaticLink],
    grid: &RasterGrid,
    dim: SolveDimension,
) -> Result<PlanarRaster, SceneError> {
    for link in links {
        scenario.resolve_link(link)?;
    }
    if links.len() < dim.dof() {
        return Err(SceneError::TooFewLinks { needed: dim.dof(), got: links.len() });
    }
    Ok(raster_of(grid, |p| match gdop(scenario, links, p, dim) {
        Ok(est) => est.value,
        Err(_) => f64::INFINITY,
    }))
}

// ─── Tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn node(id: &str, pos: Vec3, vel: Vec3, role: NodeRole) -> NodeState {
        NodeState {
            id: id.into(),
            position_m: pos,
            velocity_m_per_s: vel,
            role,
            carrier_frequency_hz: 5.2e9,
        }
    }

    fn two_node_scene(tx_pos: Vec3, rx_pos: Vec3) -> (Scenario, BistaticLink) {
        let scenario = Scenario::new(
            vec![
                node("tx", tx_pos, Vec3::ZERO, NodeRole::TxOnly),
                node("rx", rx_pos, Vec3::ZERO, NodeRole::RxOnly),
            ],
            vec![],
            vec![],
        );
        (scenario, BistaticLink::new("tx", "rx"))
    }

    /// Independent derivative check: displace every mover by +-dt along its
    /// velocity and difference the excess delay. Used instead of trusting
    /// the analytic projection formula.
    fn doppler_by_finite_difference(
        scenario: &Scenario,
        link: &BistaticLink,
        target: &TargetState,
        dt: f64,
    ) -> f64 {
        let excess_at = |sign: f64| {
            let mut shifted = scenario.clone();
            for n in &mut shifted.nodes {
                n.position_m = n.position_m + n.velocity_m_per_s * (sign * dt);
            }
            let pos = target.position_m + target.velocity_m_per_s * (sign * dt);
            excess_delay_s(&shifted, link, pos).unwrap()
        };
        let (tx, _) = scenario.resolve_link(link).unwrap();
        let rate = (excess_at(1.0) - excess_at(-1.0)) / (2.0 * dt);
        -tx.carrier_frequency_hz * rate
    }

    #[test]
    fn bistatic_range_symmetric_midline_point() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let r = bistatic_range_m(&scenario, &link, Vec3::new(50.0, 40.0, 0.0)).unwrap();
        assert_relative_eq!(r, 128.06248474865697, max_relative = 1e-14);
    }

    #[test]
    fn excess_delay_of_midline_point() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let tau = excess_delay_s(&scenario, &link, Vec3::new(50.0, 40.0, 0.0)).unwrap();
        assert_relative_eq!(tau, 9.360637334197703e-8, max_relative = 1e-14);
    }

    #[test]
    fn monostatic_receding_target_doppler() {
        let scenario = Scenario::new(
            vec![node("radar", Vec3::ZERO, Vec3::ZERO, NodeRole::TxRx)],
            vec![],
            vec![],
        );
        let link = BistaticLink::new("radar", "radar");
        let target = TargetState {
            position_m: Vec3::new(50.0, 0.0, 0.0),
            velocity_m_per_s: Vec3::new(10.0, 0.0, 0.0),
            mean_reflectivity_m2: 1.0,
        };
        let analytic = bistatic_doppler_hz(&scenario, &link, &target).unwrap();
        // Receding target, both legs stretch: two-way Doppler is negative.
        assert_relative_eq!(analytic, -346.90665900607814, max_relative = 1e-12);
        let fd = doppler_by_finite_difference(&scenario, &link, &target, 1e-6);
        assert_relative_eq!(analytic, fd, max_relative = 1e-6);
    }

    #[test]
    fn doppler_matches_finite_difference_with_moving_nodes() {
        let scenario = Scenario::new(
            vec![
                node("tx", Vec3::new(-40.0, 10.0, 2.0), Vec3::new(3.0, -1.0, 0.5), NodeRole::TxOnly),
                node("rx", Vec3::new(55.0, -25.0, 0.0), Vec3::new(-2.0, 4.0, 0.0), NodeRole::RxOnly),
            ],
            vec![],
            vec![],
        );
        let link = BistaticLink::new("tx", "rx");
        let target = TargetState {
            position_m: Vec3::new(10.0, 30.0, 5.0),
            velocity_m_per_s: Vec3::new(-8.0, 12.0, 1.0),
            mean_reflectivity_m2: 1.0,
        };
        let analytic = bistatic_doppler_hz(&scenario, &link, &target).unwrap();
        let fd = doppler_by_finite_difference(&scenario, &link, &target, 1e-6);
        assert_relative_eq!(analytic, fd, max_relative = 1e-6);
    }

    #[test]
    fn velocity_tangent_to_iso_delay_ellipse_gives_zero_doppler() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let pos = Vec3::new(50.0, 40.0, 0.0);
        let to_tx = (Vec3::ZERO - pos).normalized().unwrap();
        let to_rx = (Vec3::new(100.0, 0.0, 0.0) - pos).normalized().unwrap();
        let normal = to_tx + to_rx;
        // In-plane direction perpendicular to the ellipse normal.
        let tangent = Vec3::new(-normal.y, normal.x, 0.0).normalized().unwrap();
        let target = TargetState {
            position_m: pos,
            velocity_m_per_s: tangent * 10.0,
            mean_reflectivity_m2: 1.0,
        };
        let doppler = bistatic_doppler_hz(&scenario, &link, &target).unwrap();
        assert_abs_diff_eq!(doppler, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn right_angle_over_baseline_midpoint() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let beta = bistatic_angle_rad(&scenario, &link, Vec3::new(50.0, 50.0, 0.0)).unwrap();
        assert_relative_eq!(beta, std::f64::consts::FRAC_PI_2, max_relative = 1e-12);
    }

    #[test]
    fn cassini_attenuation_at_baseline_midpoint() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let att = cassini_excess_attenuation_db(&scenario, &link, Vec3::new(50.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(att, -27.95880017344075, max_relative = 1e-12);
    }

    #[test]
    fn cassini_zero_db_on_unit_product_oval() {
        // Point where R1 * R2 = R_los: with the unit cross-section
        // normalization the echo is exactly as strong as the direct path.
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0));
        // Bisector point (1, 1): R1 = R2 = sqrt(2), product = 2 = R_los.
        let att = cassini_excess_attenuation_db(&scenario, &link, Vec3::new(1.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(att, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gdop_duplicate_links_are_rank_deficient() {
        let (mut scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        scenario.nodes[0].role = NodeRole::TxRx;
        let links = vec![link.clone(), link.clone()];
        let est = gdop(&scenario, &links, Vec3::new(50.0, 40.0, 0.0), SolveDimension::Planar { z_m: 0.0 })
            .unwrap();
        assert!(est.value.is_infinite());
        assert_eq!(est.rank, 1);
    }

    #[test]
    fn orthogonal_links_beat_grazing_links() {
        // Two monostatic observers with orthogonal look directions versus
        // two separated by only 10 degrees.
        let target = Vec3::new(0.0, 0.0, 0.0);
        let mk = |angles: &[f64]| -> (Scenario, Vec<BistaticLink>) {
            let nodes = angles
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    node(
                        &format!("n{i}"),
                        Vec3::new(100.0 * a.cos(), 100.0 * a.sin(), 0.0),
                        Vec3::ZERO,
                        NodeRole::TxRx,
                    )
                })
                .collect();
            let links = (0..angles.len())
                .map(|i| BistaticLink::new(format!("n{i}"), format!("n{i}")))
                .collect();
            (Scenario::new(nodes, vec![], vec![]), links)
        };
        let planar = SolveDimension::Planar { z_m: 0.0 };
        let (s_orth, l_orth) = mk(&[0.0, std::f64::consts::FRAC_PI_2]);
        let (s_graze, l_graze) = mk(&[0.0, 10.0f64.to_radians()]);
        let g_orth = gdop(&s_orth, &l_orth, target, planar).unwrap().value;
        let g_graze = gdop(&s_graze, &l_graze, target, planar).unwrap().value;
        assert!(g_orth.is_finite() && g_graze.is_finite());
        assert!(g_graze / g_orth > 3.0, "ratio {}", g_graze / g_orth);
    }

    #[test]
    fn symmetric_triangle_gdop_is_rotation_invariant() {
        let planar = SolveDimension::Planar { z_m: 0.0 };
        let build = |rot: f64, shift: Vec3| -> (Scenario, Vec<BistaticLink>) {
            let nodes: Vec<NodeState> = (0..3)
                .map(|i| {
                    let a = rot + 2.0 * std::f64::consts::PI * i as f64 / 3.0;
                    node(
                        &format!("n{i}"),
                        Vec3::new(80.0 * a.cos(), 80.0 * a.sin(), 0.0) + shift,
                        Vec3::ZERO,
                        NodeRole::TxRx,
                    )
                })
                .collect();
            let links = (0..3)
                .map(|i| BistaticLink::new(format!("n{i}"), format!("n{i}")))
                .collect();
            (Scenario::new(nodes, vec![], vec![]), links)
        };
        let (s0, l0) = build(0.0, Vec3::ZERO);
        let g0 = gdop(&s0, &l0, Vec3::ZERO, planar).unwrap().value;
        assert!(g0.is_finite());
        let shift = Vec3::new(-31.0, 7.5, 2.0);
        let (s1, l1) = build(0.7, shift);
        let g1 = gdop(&s1, &l1, shift, planar).unwrap().value;
        assert_relative_eq!(g0, g1, max_relative = 1e-9);
    }

    #[test]
    fn link_validation_rejects_bad_ids_and_roles() {
        let (scenario, _) = two_node_scene(Vec3::ZERO, Vec3::new(10.0, 0.0, 0.0));
        assert!(matches!(
            scenario.resolve_link(&BistaticLink::new("tx", "ghost")),
            Err(SceneError::UnknownNode(_))
        ));
        assert!(matches!(
            scenario.resolve_link(&BistaticLink::new("rx", "tx")),
            Err(SceneError::RoleMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_node_ids_rejected() {
        let scenario = Scenario::new(
            vec![
                node("a", Vec3::ZERO, Vec3::ZERO, NodeRole::TxRx),
                node("a", Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO, NodeRole::TxRx),
            ],
            vec![],
            vec![],
        );
        assert!(matches!(scenario.validate(), Err(SceneError::DuplicateNodeId(_))));
    }

    #[test]
    fn monostatic_excess_equals_two_way_range() {
        let scenario = Scenario::new(
            vec![node("radar", Vec3::ZERO, Vec3::ZERO, NodeRole::TxRx)],
            vec![],
            vec![],
        );
        let link = BistaticLink::new("radar", "radar");
        let p = Vec3::new(30.0, 0.0, 0.0);
        assert_eq!(los_range_m(&scenario, &link).unwrap(), 0.0);
        let tau = excess_delay_s(&scenario, &link, p).unwrap();
        assert_relative_eq!(tau, 60.0 / SPEED_OF_LIGHT_M_PER_S, max_relative = 1e-14);
    }

    #[test]
    fn raster_layout_and_values() {
        let (scenario, link) = two_node_scene(Vec3::ZERO, Vec3::new(100.0, 0.0, 0.0));
        let grid = RasterGrid {
            x_start_m: 0.0,
            x_step_m: 50.0,
            nx: 3,
            y_start_m: -50.0,
            y_step_m: 50.0,
            ny: 3,
            plane_z_m: 0.0,
        };
        let raster = cassini_raster(&scenario, &link, &grid).unwrap();
        assert_eq!(raster.values.len(), 9);
        // Row-major with y outer: index 4 is (x=50, y=0), the midpoint.
        assert_relative_eq!(raster.values[4], -27.95880017344075, max_relative = 1e-12);
    }
}
