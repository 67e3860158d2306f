//! Bistatic multipath channels over sparse OFDM frames.
//!
//! Geometry turns into a small set of discrete paths (`propagate`), each
//! with an excess delay, a Doppler shift, and a complex weight. The
//! receiver is assumed to lock its clock and oscillator to the line of
//! sight, so every delay here is the clock-offset-free excess over the
//! direct path and the LOS itself sits at zero delay and zero Doppler;
//! monostatic links share one clock and use the plain two-way delay.
//!
//! `sample_frf` renders the paths onto allocated resource elements,
//! `apply_channel` adds receiver noise, and `inverse_filter` divides the
//! known transmit symbols back out, yielding weighted channel samples for
//! the estimators. The bottom of the module holds the square-law
//! detection machinery used for multistatic diversity experiments.

use num_complex::Complex64;
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;
use crate::scene::{self, BistaticLink, Scenario, SceneError, TargetState};
use crate::waveform::{FrameSymbols, Numerology, ReMask, WaveformError};

/// Per-resource-element excision threshold of the inverse filter, as a
/// multiple of the noise power.
pub const DEFAULT_EXCISION_FACTOR: f64 = 6.0;

// ─── Path sets ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    /// Direct transmitter-to-receiver path (at most one per set).
    LineOfSight,
    /// Echo off scenario target `index`.
    Target { index: usize },
    /// Echo off scenario clutter point `index`.
    Clutter { index: usize },
}

/// One discrete propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    /// Excess delay over the line of sight, seconds.
    pub delay_s: f64,
    /// Doppler shift relative to the LOS-locked reference, Hz.
    pub doppler_hz: f64,
    /// Complex amplitude, carrier phase included.
    pub weight: Complex64,
    pub kind: PathKind,
}

/// All discrete paths of one bistatic link.
#[derive(Clone, Debug)]
pub struct PathSet {
    pub link: BistaticLink,
    /// Carrier frequency of the transmitting node, Hz.
    pub carrier_hz: f64,
    paths: Vec<PathComponent>,
}

impl PathSet {
    pub fn new(
        link: BistaticLink,
        carrier_hz: f64,
        paths: Vec<PathComponent>,
    ) -> Result<Self, ChannelError> {
        if !(carrier_hz.is_finite() && carrier_hz > 0.0) {
            return Err(ChannelError::InvalidParameter("carrier_hz must be positive".into()));
        }
        let mut los_seen = false;
        for p in &paths {
            if !(p.delay_s.is_finite() && p.doppler_hz.is_finite() && p.weight.is_finite()) {
                return Err(ChannelError::InvalidParameter("path parameters must be finite".into()));
            }
            if p.kind == PathKind::LineOfSight {
                if los_seen {
                    return Err(ChannelError::InvalidParameter(
                        "a path set can hold at most one line-of-sight path".into(),
                    ));
                }
                los_seen = true;
            }
        }
        Ok(PathSet { link, carrier_hz, paths })
    }

    pub fn paths(&self) -> &[PathComponent] {
        &self.paths
    }

    /// Copy containing only paths for which `keep` returns true.
    pub fn filtered(&self, keep: impl Fn(&PathComponent) -> bool) -> PathSet {
        PathSet {
            link: self.link.clone(),
            carrier_hz: self.carrier_hz,
            paths: self.paths.iter().copied().filter(keep).collect(),
        }
    }

    /// First target path, if any.
    pub fn first_target(&self) -> Option<&PathComponent> {
        self.paths.iter().find(|p| matches!(p.kind, PathKind::Target { .. }))
    }
}

/// Builds the path set of one link from scenario geometry.
///
/// Weights use a unit-reference free-space scaling: the LOS weight is
/// `1 / R_los` and an echo off a scatterer of RCS-like strength `a`
/// (amplitude, units of meters) is `a / (R1 * R2)`, both times the
/// carrier phase `exp(-j 2 pi f_c tau)` of the path's excess delay.
/// Target amplitudes are `sqrt(mean_reflectivity_m2)`; `fluctuate_targets`
/// replaces them with random draws. Monostatic links (tx == rx) have no
/// LOS path and `include_los` is ignored for them.
pub fn propagate(
    scenario: &Scenario,
    link: &BistaticLink,
    include_los: bool,
) -> Result<PathSet, ChannelError> {
    let (tx, rx) = scenario.resolve_link(link)?;
    let monostatic = tx.id == rx.id;
    let carrier = tx.carrier_frequency_hz;
    let (tx_pos, rx_pos) = (tx.position_m, rx.position_m);
    let mut paths = Vec::new();
    if include_los && !monostatic {
        let los = scene::los_range_m(scenario, link)?;
        paths.push(PathComponent {
            delay_s: 0.0,
            doppler_hz: 0.0,
            weight: Complex64::new(1.0 / los, 0.0),
            kind: PathKind::LineOfSight,
        });
    }
    for (index, target) in scenario.targets.iter().enumerate() {
        let delay = scene::excess_delay_s(scenario, link, target.position_m)?;
        let doppler = scene::bistatic_doppler_hz(scenario, link, target)?;
        let r1 = tx_pos.distance(target.position_m);
        let r2 = rx_pos.distance(target.position_m);
        let amp = target.mean_reflectivity_m2.sqrt() / (r1 * r2);
        let phase = -std::f64::consts::TAU * carrier * delay;
        paths.push(PathComponent {
            delay_s: delay,
            doppler_hz: doppler,
            weight: Complex64::from_polar(amp, phase),
            kind: PathKind::Target { index },
        });
    }
    for (index, point) in scenario.clutter.iter().enumerate() {
        let delay = scene::excess_delay_s(scenario, link, point.position_m)?;
        let still = TargetState {
            position_m: point.position_m,
            velocity_m_per_s: scene::Vec3::ZERO,
            mean_reflectivity_m2: 0.0,
        };
        let doppler = scene::bistatic_doppler_hz(scenario, link, &still)?;
        let r1 = tx_pos.distance(point.position_m);
        let r2 = rx_pos.distance(point.position_m);
        let amplitude = Complex64::new(point.amplitude_re, point.amplitude_im) / (r1 * r2);
        let phase = Complex64::from_polar(1.0, -std::f64::consts::TAU * carrier * delay);
        paths.push(PathComponent {
            delay_s: delay,
            doppler_hz: doppler,
            weight: amplitude * phase,
            kind: PathKind::Clutter { index },
        });
    }
    PathSet::new(link.clone(), carrier, paths)
}

// ─── Target fluctuation ─────────────────────────────────────────────────

/// Statistical model of a target's reflectivity across captures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ReflectivityModel {
    /// Fixed amplitude `sqrt(mean)`.
    Deterministic,
    /// Zero-mean complex Gaussian amplitude with mean power `mean`
    /// (Swerling-style power fluctuation).
    RayleighPower,
    /// Fixed dominant component plus diffuse remainder; `k_factor` is the
    /// dominant-to-diffuse power ratio.
    RicianPower { k_factor: f64 },
}

/// Draws one complex reflection amplitude with mean power `mean_power`.
pub fn draw_reflectivity(
    model: ReflectivityModel,
    mean_power: f64,
    rng: &mut impl Rng,
) -> Complex64 {
    match model {
        ReflectivityModel::Deterministic => Complex64::new(mean_power.sqrt(), 0.0),
        ReflectivityModel::RayleighPower => {
            let s = (mean_power / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * s, im * s)
        }
        ReflectivityModel::RicianPower { k_factor } => {
            let fixed = (k_factor / (k_factor + 1.0) * mean_power).sqrt();
            let s = (mean_power / (k_factor + 1.0) / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(fixed + re * s, im * s)
        }
    }
}

/// Redraws the reflection amplitude of every target path in place. The
/// deterministic geometry factors (spreading loss, carrier phase) stay;
/// only the reflectivity amplitude `sqrt(mean)` is replaced by a random
/// draw, so the weight's mean power is unchanged for every model.
pub fn fluctuate_targets(
    path_set: &mut PathSet,
    scenario: &Scenario,
    model: ReflectivityModel,
    rng: &mut impl Rng,
) -> Result<(), ChannelError> {
    for path in &mut path_set.paths {
        if let PathKind::Target { index } = path.kind {
            let target = scenario.targets.get(index).ok_or_else(|| {
                ChannelError::InvalidParameter(format!("path references missing target {index}"))
            })?;
            let mean = target.mean_reflectivity_m2;
            let draw = draw_reflectivity(model, mean, rng);
            path.weight *= draw / mean.sqrt();
        }
    }
    Ok(())
}

// ─── Frequency response sampling ────────────────────────────────────────

/// Samples the channel frequency response on the active REs of a mask:
///
/// `H[k, m] = sum_p w_p exp(-j 2 pi f_k tau_p) exp(+j 2 pi t_m alpha_p)`
///
/// Returned full-grid carrier-major, zero off the mask.
pub fn sample_frf(path_set: &PathSet, numerology: &Numerology, mask: &ReMask) -> Vec<Complex64> {
    let n_symbols = numerology.n_symbols;
    let active = mask.as_slice();
    parallel::map_indexed(numerology.n_res(), |i| {
        if !active[i] {
            return Complex64::new(0.0, 0.0);
        }
        let (k, m) = (i / n_symbols, i % n_symbols);
        let f = numerology.carrier_offset_hz(k);
        let t = numerology.symbol_time_s(m);
        let mut acc = Complex64::new(0.0, 0.0);
        for p in &path_set.paths {
            let phase = std::f64::consts::TAU * (t * p.doppler_hz - f * p.delay_s);
            acc += p.weight * Complex64::from_polar(1.0, phase);
        }
        acc
    })
}

/// Over a frame, a path's delay drifts by `(alpha / f_c) * T_frame`
/// seconds. Returns true when any path drifts by more than one delay
/// resolution cell, i.e. when the stationarity assumption of a single
/// frame-long coherent integration starts to break.
pub fn range_migration_exceeded(path_set: &PathSet, numerology: &Numerology) -> bool {
    let cell = 1.0 / numerology.bandwidth_hz();
    let frame = numerology.frame_duration_s();
    path_set
        .paths
        .iter()
        .any(|p| (p.doppler_hz.abs() / path_set.carrier_hz) * frame > cell)
}

// ─── Capture and inverse filtering ──────────────────────────────────────

/// Raw received REs of one frame: `Y = X * H + noise`.
#[derive(Clone, Debug)]
pub struct ReceivedFrame {
    pub numerology: Numerology,
    pub mask: ReMask,
    pub values: Vec<Complex64>,
    pub noise_power: f64,
}

/// Passes a frame through a path-set channel and adds complex white
/// Gaussian noise of power `noise_power` on every active RE.
pub fn apply_channel(
    frame: &FrameSymbols,
    path_set: &PathSet,
    noise_power: f64,
    rng: &mut impl Rng,
) -> Result<ReceivedFrame, ChannelError> {
    if !(noise_power.is_finite() && noise_power >= 0.0) {
        return Err(ChannelError::InvalidParameter("noise_power must be non-negative".into()));
    }
    let h = sample_frf(path_set, &frame.numerology, &frame.mask);
    let mut values = vec![Complex64::new(0.0, 0.0); h.len()];
    let s = (noise_power / 2.0).sqrt();
    for (k, m) in frame.mask.iter_active() {
        let i = frame.mask.index(k, m);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        values[i] = frame.values[i] * h[i] + Complex64::new(re * s, im * s);
    }
    Ok(ReceivedFrame {
        numerology: frame.numerology,
        mask: frame.mask.clone(),
        values,
        noise_power,
    })
}

/// Weighted channel samples: the estimator's view of one capture.
#[derive(Clone, Debug)]
pub struct ChannelSamples {
    pub numerology: Numerology,
    /// REs that survived excision.
    pub mask: ReMask,
    /// Channel estimates `H_hat`, full grid, zero off the mask.
    pub values: Vec<Complex64>,
    /// Reliability weights, full grid: `1 / Var(H_hat)` per RE (relative
    /// `|X|^2` in the noiseless case).
    pub weights: Vec<f64>,
    pub noise_power: f64,
    /// Set when the generating path set drifted through delay cells
    /// within the frame; estimates are then biased.
    pub range_migration_warning: bool,
}

impl ChannelSamples {
    pub fn count_active(&self) -> usize {
        self.mask.count_active()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Divides known transmit symbols out of a received frame.
///
/// REs whose symbol energy falls at or below `excision_factor *
/// noise_power` are dropped: dividing by a weak symbol amplifies noise
/// without bound, so those REs hurt more than help. Surviving REs carry
/// `H_hat = Y / X` with reliability weight `|X|^2 / noise_power` (the
/// inverse variance of `H_hat`); with zero noise the weights are the
/// relative `|X|^2`.
pub fn inverse_filter(
    received: &ReceivedFrame,
    frame: &FrameSymbols,
    excision_factor: f64,
) -> Result<ChannelSamples, ChannelError> {
    if received.mask != frame.mask {
        return Err(ChannelError::MaskMismatch);
    }
    let n_res = received.numerology.n_res();
    let mut active = vec![false; n_res];
    let mut values = vec![Complex64::new(0.0, 0.0); n_res];
    let mut weights = vec![0.0; n_res];
    let floor = excision_factor * received.noise_power;
    for (k, m) in frame.mask.iter_active() {
        let i = frame.mask.index(k, m);
        let energy = frame.values[i].norm_sqr();
        if energy > floor && energy > 0.0 {
            active[i] = true;
            values[i] = received.values[i] / frame.values[i];
            weights[i] = if received.noise_power > 0.0 {
                energy / received.noise_power
            } else {
                energy
            };
        }
    }
    if !active.iter().any(|&a| a) {
        return Err(ChannelError::EmptyChannelEstimate);
    }
    Ok(ChannelSamples {
        numerology: received.numerology,
        mask: ReMask::new(received.mask.n_carriers, received.mask.n_symbols, active)?,
        values,
        weights,
        noise_power: received.noise_power,
        range_migration_warning: false,
    })
}

/// Full capture chain: render the channel, add noise, inverse filter,
/// and flag range migration from the ground-truth paths.
pub fn capture(
    frame: &FrameSymbols,
    path_set: &PathSet,
    noise_power: f64,
    excision_factor: f64,
    rng: &mut impl Rng,
) -> Result<ChannelSamples, ChannelError> {
    let received = apply_channel(frame, path_set, noise_power, rng)?;
    let mut samples = inverse_filter(&received, frame, excision_factor)?;
    samples.range_migration_warning = range_migration_exceeded(path_set, &frame.numerology);
    Ok(samples)
}

// ─── Square-law detection ───────────────────────────────────────────────

/// Matched square-law statistic at a hypothesized delay-Doppler cell.
///
/// `T = |sum_re w_re H_hat_re s_re^*|^2 / sum_re w_re` with the steering
/// atom `s = exp(-j 2 pi f_k tau) exp(+j 2 pi t_m alpha)`. Under noise
/// only, `T` is exponential with unit mean regardless of the power
/// loading; with a target of weight `gamma` in the cell its mean grows by
/// `|gamma|^2 * sum w`.
pub fn matched_test_statistic(samples: &ChannelSamples, delay_s: f64, doppler_hz: f64) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut weight_sum = 0.0;
    for (k, m) in samples.mask.iter_active() {
        let i = samples.mask.index(k, m);
        let f = samples.numerology.carrier_offset_hz(k);
        let t = samples.numerology.symbol_time_s(m);
        let atom = Complex64::from_polar(
            1.0,
            std::f64::consts::TAU * (t * doppler_hz - f * delay_s),
        );
        acc += samples.weights[i] * samples.values[i] * atom.conj();
        weight_sum += samples.weights[i];
    }
    if weight_sum <= 0.0 {
        return 0.0;
    }
    acc.norm_sqr() / weight_sum
}

/// Regularized upper incomplete gamma `Q(n, x)` for integer shape:
/// the false-alarm probability of a sum of `n` unit-mean exponential
/// statistics tested against threshold `x`.
pub fn gamma_upper_q(n: usize, x: f64) -> f64 {
    assert!(n >= 1, "shape must be at least 1");
    if x <= 0.0 {
        return 1.0;
    }
    let mut term: f64 = 1.0;
    let mut sum: f64 = 1.0;
    for k in 1..n {
        term *= x / k as f64;
        sum += term;
    }
    (sum.ln() - x).exp()
}

/// Threshold `x` with `Q(n, x) = pfa`: bisection bracketing followed by
/// Newton polish on the log tail.
pub fn gamma_tail_threshold(n: usize, pfa: f64) -> Result<f64, ChannelError> {
    if !(pfa > 0.0 && pfa < 1.0) {
        return Err(ChannelError::InvalidParameter("pfa must lie in (0, 1)".into()));
    }
    let mut lo = 0.0_f64;
    let mut hi = -pfa.ln() + 10.0 * n as f64 + 50.0;
    debug_assert!(gamma_upper_q(n, hi) < pfa);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_upper_q(n, mid) > pfa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    // Newton polish on f(x) = ln Q(n, x) - ln pfa, using
    // dQ/dx = -x^(n-1) e^(-x) / (n-1)!.
    for _ in 0..4 {
        let q = gamma_upper_q(n, x);
        let mut ln_density = -x;
        for k in 1..n {
            ln_density += x.ln() - (k as f64).ln();
        }
        let derivative = -ln_density.exp() / q;
        let next = x - (q.ln() - pfa.ln()) / derivative;
        if next.is_finite() && next > 0.0 {
            x = next;
        }
    }
    Ok(x)
}

/// One link of a detection experiment: its probing frame and the
/// ground-truth paths (background already removed, so the set should
/// contain the fluctuating target paths only).
pub struct DetectionLink<'a> {
    pub frame: &'a FrameSymbols,
    pub path_set: &'a PathSet,
    pub noise_power: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectionSummary {
    pub pfa_target: f64,
    pub n_trials: usize,
    pub threshold_single: f64,
    pub threshold_fused: f64,
    /// Detection rate of each link alone.
    pub pd_per_link: Vec<f64>,
    /// Detection rate of the fused (summed) statistic.
    pub pd_fused: f64,
    /// Measured false-alarm rate of each link alone.
    pub pfa_per_link: Vec<f64>,
    /// Measured false-alarm rate of the fused statistic.
    pub pfa_fused: f64,
    /// Mean matched SNR per link (weight power times integrated weight).
    pub mean_snr_per_link: Vec<f64>,
    /// Closed-form single-link detection probability for a Rayleigh
    /// target, `pfa^(1 / (1 + snr))`, for comparison.
    pub theory_pd_per_link: Vec<f64>,
}

/// Monte-Carlo square-law detection across multiple bistatic links.
///
/// Per trial and link, the target reflectivity is redrawn, the frame is
/// captured in noise, and the matched statistic is evaluated at the true
/// target cell; an H0 twin capture without the target measures the false
/// alarm rate at the same thresholds. Fusion sums the per-link statistics
/// and tests against the matching gamma tail threshold, so each link
/// contributes one diversity branch.
pub fn detection_experiment(
    scenario: &Scenario,
    links: &[DetectionLink<'_>],
    model: ReflectivityModel,
    pfa: f64,
    n_trials: usize,
    master_seed: u64,
) -> Result<DetectionSummary, ChannelError> {
    if links.is_empty() {
        return Err(ChannelError::InvalidParameter("need at least one link".into()));
    }
    if n_trials == 0 {
        return Err(ChannelError::InvalidParameter("need at least one trial".into()));
    }
    for link in links {
        if link.path_set.first_target().is_none() {
            return Err(ChannelError::NoTargetPath);
        }
        if link.noise_power <= 0.0 {
            return Err(ChannelError::InvalidParameter(
                "detection needs positive noise power".into(),
            ));
        }
    }
    let threshold_single = gamma_tail_threshold(1, pfa)?;
    let threshold_fused = gamma_tail_threshold(links.len(), pfa)?;

    // Per-trial statistics: (per-link H1, per-link H0).
    let trials = parallel::map_indexed(n_trials, |trial| {
        let mut rng = crate::seeding::rng_for(master_seed, "detection-trial", trial as u64);
        let mut h1 = Vec::with_capacity(links.len());
        let mut h0 = Vec::with_capacity(links.len());
        for link in links {
            let mut paths = link.path_set.clone();
            fluctuate_targets(&mut paths, scenario, model, &mut rng)
                .expect("path set validated above");
            let cell = *paths.first_target().expect("target presence checked above");
            let samples = capture(link.frame, &paths, link.noise_power, 0.0, &mut rng)
                .expect("capture of a validated frame cannot fail");
            h1.push(matched_test_statistic(&samples, cell.delay_s, cell.doppler_hz));
            let empty = paths.filtered(|p| !matches!(p.kind, PathKind::Target { .. }));
            let noise_only = capture(link.frame, &empty, link.noise_power, 0.0, &mut rng)
                .expect("capture of a validated frame cannot fail");
            h0.push(matched_test_statistic(&noise_only, cell.delay_s, cell.doppler_hz));
        }
        (h1, h0)
    });

    let l = links.len();
    let mut hits = vec![0usize; l];
    let mut false_alarms = vec![0usize; l];
    let mut fused_hits = 0usize;
    let mut fused_false_alarms = 0usize;
    for (h1, h0) in &trials {
        for i in 0..l {
            if h1[i] > threshold_single {
                hits[i] += 1;
            }
            if h0[i] > threshold_single {
                false_alarms[i] += 1;
            }
        }
        if h1.iter().sum::<f64>() > threshold_fused {
            fused_hits += 1;
        }
        if h0.iter().sum::<f64>() > threshold_fused {
            fused_false_alarms += 1;
        }
    }

    let nt = n_trials as f64;
    let mut mean_snr = Vec::with_capacity(l);
    let mut theory_pd = Vec::with_capacity(l);
    for link in links {
        let cell = link.path_set.first_target().expect("checked above");
        let integrated: f64 = link
            .frame
            .values
            .iter()
            .map(|v| v.norm_sqr() / link.noise_power)
            .sum();
        let snr = cell.weight.norm_sqr() * integrated;
        mean_snr.push(snr);
        theory_pd.push(pfa.powf(1.0 / (1.0 + snr)));
    }
    Ok(DetectionSummary {
        pfa_target: pfa,
        n_trials,
        threshold_single,
        threshold_fused,
        pd_per_link: hits.iter().map(|&h| h as f64 / nt).collect(),
        pd_fused: fused_hits as f64 / nt,
        pfa_per_link: false_alarms.iter().map(|&h| h as f64 / nt).collect(),
        pfa_fused: fused_false_alarms as f64 / nt,
        mean_snr_per_link: mean_snr,
        theory_pd_per_link: theory_pd,
    })
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
    #[error("received frame and transmit frame use different masks")]
    MaskMismatch,
    #[error("every resource element was excised; no channel estimate remains")]
    EmptyChannelEstimate,
    #[error("path set has no target path")]
    NoTargetPath,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

// ─── Tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ClutterPoint, NodeRole, NodeState, TargetState, Vec3};
    use crate::waveform::{build_allocation, generate_symbols, AllocationScheme, PowerLoading, SymbolSource};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_scenario() -> Scenario {
        Scenario::new(
            vec![
                NodeState {
                    id: "a".into(),
                    position_m: Vec3::ZERO,
                    velocity_m_per_s: Vec3::ZERO,
                    role: NodeRole::TxRx,
                    carrier_frequency_hz: 5.2e9,
                },
                NodeState {
                    id: "b".into(),
                    position_m: Vec3::new(100.0, 0.0, 0.0),
                    velocity_m_per_s: Vec3::ZERO,
                    role: NodeRole::RxOnly,
                    carrier_frequency_hz: 5.2e9,
                },
            ],
            vec![TargetState {
                position_m: Vec3::new(50.0, 40.0, 0.0),
                velocity_m_per_s: Vec3::new(0.0, -5.0, 0.0),
                mean_reflectivity_m2: 4.0,
            }],
            vec![ClutterPoint {
                position_m: Vec3::new(20.0, 10.0, 0.0),
                amplitude_re: 0.5,
                amplitude_im: -0.25,
            }],
        )
    }

    fn numerology() -> Numerology {
        Numerology {
            n_carriers: 32,
            carrier_spacing_hz: 1.25e6,
            n_symbols: 16,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        }
    }

    fn test_frame() -> FrameSymbols {
        let alloc = build_allocation(
            numerology(),
            &AllocationScheme::Full,
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap()
    }

    #[test]
    fn propagate_matches_scene_geometry() {
        let scenario = test_scenario();
        let link = BistaticLink::new("a", "b");
        let set = propagate(&scenario, &link, true).unwrap();
        assert_eq!(set.paths().len(), 3);
        let los = &set.paths()[0];
        assert_eq!(los.kind, PathKind::LineOfSight);
        assert_abs_diff_eq!(los.delay_s, 0.0);
        assert_abs_diff_eq!(los.doppler_hz, 0.0);
        assert_relative_eq!(los.weight.re, 0.01, max_relative = 1e-15);

        let (tx, rx) = scenario.resolve_link(&link).unwrap();
        let target = &scenario.targets[0];
        let tgt_path = set.first_target().unwrap();
        assert_relative_eq!(
            tgt_path.delay_s,
            scene::excess_delay_s(&scenario, &link, target.position_m).unwrap(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            tgt_path.doppler_hz,
            scene::bistatic_doppler_hz(&scenario, &link, target).unwrap(),
            max_relative = 1e-15
        );
        let r1 = tx.position_m.distance(target.position_m);
        let r2 = rx.position_m.distance(target.position_m);
        assert_relative_eq!(tgt_path.weight.norm(), 2.0 / (r1 * r2), max_relative = 1e-12);
        let expected_phase = -std::f64::consts::TAU * 5.2e9 * tgt_path.delay_s;
        let diff = (tgt_path.weight.arg() - expected_phase).rem_euclid(std::f64::consts::TAU);
        assert!(diff < 1e-6 || diff > std::f64::consts::TAU - 1e-6);
    }

    #[test]
    fn propagate_weight_ratio_matches_cassini_attenuation() {
        let mut scenario = test_scenario();
        scenario.targets[0].mean_reflectivity_m2 = 1.0;
        let link = BistaticLink::new("a", "b");
        let set = propagate(&scenario, &link, true).unwrap();
        let los = set.paths()[0].weight.norm();
        let tgt = set.first_target().unwrap().weight.norm();
        let expected =
            scene::cassini_excess_attenuation_db(&scenario, &link, scenario.targets[0].position_m)
                .unwrap();
        assert_relative_eq!(20.0 * (tgt / los).log10(), expected, max_relative = 1e-12);
    }

    #[test]
    fn monostatic_link_has_no_los_and_two_way_delay() {
        let scenario = test_scenario();
        let set = propagate(&scenario, &BistaticLink::new("a", "a"), true).unwrap();
        assert!(set.paths().iter().all(|p| p.kind != PathKind::LineOfSight));
        let tgt = set.first_target().unwrap();
        let two_way = 2.0 * Vec3::new(50.0, 40.0, 0.0).norm() / scenario.speed_of_light_m_per_s;
        assert_relative_eq!(tgt.delay_s, two_way, max_relative = 1e-12);
    }

    #[test]
    fn path_set_rejects_second_los() {
        let link = BistaticLink::new("a", "b");
        let los = PathComponent {
            delay_s: 0.0,
            doppler_hz: 0.0,
            weight: Complex64::new(1.0, 0.0),
            kind: PathKind::LineOfSight,
        };
        let err = PathSet::new(link, 5.2e9, vec![los, los]);
        assert!(matches!(err, Err(ChannelError::InvalidParameter(_))));
    }

    #[test]
    fn sample_frf_matches_hand_formula() {
        let num = numerology();
        let mask = ReMask::full(num.n_carriers, num.n_symbols);
        let link = BistaticLink::new("a", "b");
        let paths = vec![
            PathComponent {
                delay_s: 120e-9,
                doppler_hz: 80.0,
                weight: Complex64::new(0.8, -0.1),
                kind: PathKind::Target { index: 0 },
            },
            PathComponent {
                delay_s: 310e-9,
                doppler_hz: -45.0,
                weight: Complex64::new(-0.2, 0.4),
                kind: PathKind::Clutter { index: 0 },
            },
        ];
        let set = PathSet::new(link, 5.2e9, paths.clone()).unwrap();
        let h = sample_frf(&set, &num, &mask);
        let (k, m) = (3, 2);
        let mut expected = Complex64::new(0.0, 0.0);
        for p in &paths {
            let phase = std::f64::consts::TAU
                * (num.symbol_time_s(m) * p.doppler_hz - num.carrier_offset_hz(k) * p.delay_s);
            expected += p.weight * Complex64::from_polar(1.0, phase);
        }
        assert_relative_eq!(h[mask.index(k, m)].re, expected.re, max_relative = 1e-12);
        assert_relative_eq!(h[mask.index(k, m)].im, expected.im, max_relative = 1e-12);
    }

    #[test]
    fn on_grid_path_transforms_to_unit_peak() {
        let num = numerology();
        let mask = ReMask::full(num.n_carriers, num.n_symbols);
        // Delay of exactly 5 delay bins, Doppler of exactly 3 Doppler bins.
        let tau = 5.0 / (num.n_carriers as f64 * num.carrier_spacing_hz);
        let alpha = 3.0 / (num.n_symbols as f64 * num.symbol_duration_s);
        let set = PathSet::new(
            BistaticLink::new("a", "b"),
            5.2e9,
            vec![PathComponent {
                delay_s: tau,
                doppler_hz: alpha,
                weight: Complex64::new(1.0, 0.0),
                kind: PathKind::Target { index: 0 },
            }],
        )
        .unwrap();
        let h = sample_frf(&set, &num, &mask);
        let out = crate::fft::delay_doppler_transform(
            &h,
            num.n_carriers,
            num.n_symbols,
            num.n_carriers,
            num.n_symbols,
        );
        let scale = 1.0 / (num.n_res()) as f64;
        let peak = out[5 * num.n_symbols + 3] * scale;
        assert_relative_eq!(peak.norm(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn apply_channel_noiseless_is_exact_product() {
        let frame = test_frame();
        let scenario = test_scenario();
        let set = propagate(&scenario, &BistaticLink::new("a", "b"), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let received = apply_channel(&frame, &set, 0.0, &mut rng).unwrap();
        let h = sample_frf(&set, &frame.numerology, &frame.mask);
        for (k, m) in frame.mask.iter_active() {
            let i = frame.mask.index(k, m);
            assert_abs_diff_eq!(
                (received.values[i] - frame.values[i] * h[i]).norm(),
                0.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn apply_channel_noise_is_seeded_and_sized() {
        let frame = test_frame();
        let set = PathSet::new(BistaticLink::new("a", "b"), 5.2e9, vec![]).unwrap();
        let sigma2 = 0.01;
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let a = apply_channel(&frame, &set, sigma2, &mut rng_a).unwrap();
        let b = apply_channel(&frame, &set, sigma2, &mut rng_b).unwrap();
        assert_eq!(a.values, b.values);
        let measured: f64 = a.values.iter().map(|v| v.norm_sqr()).sum::<f64>()
            / frame.mask.count_active() as f64;
        assert_relative_eq!(measured, sigma2, max_relative = 0.15);
    }

    #[test]
    fn inverse_filter_recovers_channel_and_weights() {
        let frame = test_frame();
        let scenario = test_scenario();
        let set = propagate(&scenario, &BistaticLink::new("a", "b"), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let received = apply_channel(&frame, &set, 0.0, &mut rng).unwrap();
        let samples = inverse_filter(&received, &frame, DEFAULT_EXCISION_FACTOR).unwrap();
        assert_eq!(samples.count_active(), frame.mask.count_active());
        let h = sample_frf(&set, &frame.numerology, &frame.mask);
        for (k, m) in samples.mask.iter_active() {
            let i = samples.mask.index(k, m);
            assert!((samples.values[i] - h[i]).norm() < 1e-12);
            assert_relative_eq!(samples.weights[i], frame.values[i].norm_sqr(), max_relative = 1e-12);
        }
    }

    #[test]
    fn inverse_filter_excises_weak_symbols() {
        let num = numerology();
        let mut weights = vec![1.0; num.n_res()];
        // One RE at 1% of the common power: below 6 * noise when noise
        // sits a factor 30 under the common power.
        weights[5] = 0.01;
        let alloc = build_allocation(
            num,
            &AllocationScheme::Full,
            &PowerLoading::Continuous { weights },
            512.0,
        )
        .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        let strong_power = frame.power[0];
        let noise = strong_power / 30.0;
        let set = PathSet::new(BistaticLink::new("a", "b"), 5.2e9, vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let received = apply_channel(&frame, &set, noise, &mut rng).unwrap();
        let samples = inverse_filter(&received, &frame, DEFAULT_EXCISION_FACTOR).unwrap();
        assert_eq!(samples.count_active(), num.n_res() - 1);
        assert!(!samples.mask.as_slice()[5]);

        // With a huge excision factor everything is dropped.
        let err = inverse_filter(&received, &frame, 1e12);
        assert!(matches!(err, Err(ChannelError::EmptyChannelEstimate)));
    }

    #[test]
    fn fluctuation_models_preserve_mean_power() {
        let scenario = test_scenario();
        let base = propagate(&scenario, &BistaticLink::new("a", "b"), false).unwrap();
        let det_weight = base.first_target().unwrap().weight;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut det = base.clone();
        fluctuate_targets(&mut det, &scenario, ReflectivityModel::Deterministic, &mut rng).unwrap();
        assert_abs_diff_eq!(
            (det.first_target().unwrap().weight - det_weight).norm(),
            0.0,
            epsilon = 1e-15
        );

        let n = 4000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut set = base.clone();
            fluctuate_targets(&mut set, &scenario, ReflectivityModel::RayleighPower, &mut rng)
                .unwrap();
            acc += set.first_target().unwrap().weight.norm_sqr();
        }
        assert_relative_eq!(acc / n as f64, det_weight.norm_sqr(), max_relative = 0.1);

        let mut rician = base.clone();
        fluctuate_targets(
            &mut rician,
            &scenario,
            ReflectivityModel::RicianPower { k_factor: 1e9 },
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(
            rician.first_target().unwrap().weight.norm_sqr(),
            det_weight.norm_sqr(),
            max_relative = 1e-3
        );
    }

    #[test]
    fn range_migration_flag_tracks_drift() {
        let num = Numerology {
            n_carriers: 256,
            carrier_spacing_hz: 312.5e3,
            n_symbols: 250,
            symbol_duration_s: 200e-6,
            center_frequency_hz: 5.2e9,
        };
        // 80 MHz -> 12.5 ns cells over a 50 ms frame at 5.2 GHz carrier:
        // drift tau_dot = alpha / f_c exceeds a cell above ~1.3 kHz.
        let slow = PathSet::new(
            BistaticLink::new("a", "b"),
            5.2e9,
            vec![PathComponent {
                delay_s: 100e-9,
                doppler_hz: 400.0,
                weight: Complex64::new(1.0, 0.0),
                kind: PathKind::Target { index: 0 },
            }],
        )
        .unwrap();
        assert!(!range_migration_exceeded(&slow, &num));
        let fast = PathSet::new(
            BistaticLink::new("a", "b"),
            5.2e9,
            vec![PathComponent {
                delay_s: 100e-9,
                doppler_hz: 2000.0,
                weight: Complex64::new(1.0, 0.0),
                kind: PathKind::Target { index: 0 },
            }],
        )
        .unwrap();
        assert!(range_migration_exceeded(&fast, &num));
    }

    #[test]
    fn gamma_tail_threshold_matches_series() {
        let t1 = gamma_tail_threshold(1, 1e-3).unwrap();
        assert_relative_eq!(t1, -(1e-3f64).ln(), max_relative = 1e-10);
        let t3 = gamma_tail_threshold(3, 1e-3).unwrap();
        assert_relative_eq!(gamma_upper_q(3, t3), 1e-3, max_relative = 1e-8);
        assert!(t3 > t1);
        let t2 = gamma_tail_threshold(2, 1e-4).unwrap();
        assert_relative_eq!(gamma_upper_q(2, t2), 1e-4, max_relative = 1e-8);
    }

    #[test]
    fn matched_statistic_is_unit_mean_under_noise() {
        let num = Numerology {
            n_carriers: 8,
            carrier_spacing_hz: 1.25e6,
            n_symbols: 2,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        };
        let alloc =
            build_allocation(num, &AllocationScheme::Full, &PowerLoading::Uniform, 1.0).unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        let empty = PathSet::new(BistaticLink::new("a", "b"), 5.2e9, vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trials = 600;
        let mut mean = 0.0;
        for _ in 0..trials {
            let samples = capture(&frame, &empty, 0.05, 0.0, &mut rng).unwrap();
            mean += matched_test_statistic(&samples, 170e-9, 95.0) / trials as f64;
        }
        assert!((0.85..1.15).contains(&mean), "noise-only mean {mean}");
    }

    #[test]
    fn fusion_beats_single_link_detection() {
        let scenario = Scenario::new(
            vec![
                NodeState {
                    id: "tx".into(),
                    position_m: Vec3::ZERO,
                    velocity_m_per_s: Vec3::ZERO,
                    role: NodeRole::TxOnly,
                    carrier_frequency_hz: 5.2e9,
                },
                NodeState {
                    id: "rx1".into(),
                    position_m: Vec3::new(60.0, 0.0, 0.0),
                    velocity_m_per_s: Vec3::ZERO,
                    role: NodeRole::RxOnly,
                    carrier_frequency_hz: 5.2e9,
                },
                NodeState {
                    id: "rx2".into(),
                    position_m: Vec3::new(0.0, 60.0, 0.0),
                    velocity_m_per_s: Vec3::ZERO,
                    role: NodeRole::RxOnly,
                    carrier_frequency_hz: 5.2e9,
                },
            ],
            vec![TargetState {
                position_m: Vec3::new(30.0, 30.0, 0.0),
                velocity_m_per_s: Vec3::new(4.0, -2.0, 0.0),
                mean_reflectivity_m2: 1.0,
            }],
            vec![],
        );
        let num = Numerology {
            n_carriers: 16,
            carrier_spacing_hz: 1.25e6,
            n_symbols: 8,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        };
        let alloc =
            build_allocation(num, &AllocationScheme::Full, &PowerLoading::Uniform, 1.0).unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        let set_a = propagate(&scenario, &BistaticLink::new("tx", "rx1"), false).unwrap();
        let set_b = propagate(&scenario, &BistaticLink::new("tx", "rx2"), false).unwrap();
        // Pick noise for a 10 dB matched SNR on link A; reuse for B
        // (symmetric geometry gives the same weight magnitude).
        let snr = 10.0;
        let noise = set_a.first_target().unwrap().weight.norm_sqr() / snr;
        let links = [
            DetectionLink { frame: &frame, path_set: &set_a, noise_power: noise },
            DetectionLink { frame: &frame, path_set: &set_b, noise_power: noise },
        ];
        let summary = detection_experiment(
            &scenario,
            &links,
            ReflectivityModel::RayleighPower,
            1e-3,
            2500,
            42,
        )
        .unwrap();
        assert_relative_eq!(summary.mean_snr_per_link[0], 10.0, max_relative = 1e-9);
        // Rayleigh single-link theory at 10 dB / 1e-3.
        assert_relative_eq!(summary.theory_pd_per_link[0], 0.5336699231206312, max_relative = 1e-12);
        assert!(
            (summary.pd_per_link[0] - summary.theory_pd_per_link[0]).abs() < 0.05,
            "single-link pd {} vs theory {}",
            summary.pd_per_link[0],
            summary.theory_pd_per_link[0]
        );
        assert!(
            summary.pd_fused > summary.pd_per_link[0] + 0.05,
            "fusion {} vs single {}",
            summary.pd_fused,
            summary.pd_per_link[0]
        );
        assert!(summary.pfa_fused < 0.01, "fused false alarm rate {}", summary.pfa_fused);
    }
}
