//! Delay-Doppler estimation from weighted channel samples.
//!
//! Two estimators live here. `scattering_function` is the classical
//! inverse-filter periodogram: a two-axis FFT of the channel samples over
//! a fully occupied grid, with `detect_peaks` for readout. It is fast and
//! well understood, but it requires the full grid; on sparse allocations
//! the missing resource elements act as a hard aperture and the sidelobes
//! they create are not noise, so the function refuses to pretend
//! otherwise. `fit_model` is the sparse-aware replacement: an iterative
//! weighted least-squares fit of discrete paths directly to the observed
//! REs, with a noise-calibrated stopping rule.

mod fit;
mod order;

pub use fit::{fit_model, FitConfig, FitResult, FittedPath};

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::channel::ChannelSamples;
use crate::fft;

// ─── Scattering maps ────────────────────────────────────────────────────

/// A sampled delay-Doppler surface, delay-major
/// (`power[i_delay * n_doppler + i_doppler]`).
#[derive(Clone, Debug)]
pub struct ScatteringMap {
    pub delay_axis_s: Vec<f64>,
    pub doppler_axis_hz: Vec<f64>,
    pub power: Vec<f64>,
    /// Complex surface values, when the producing transform has them.
    pub complex_values: Option<Vec<Complex64>>,
}

impl ScatteringMap {
    pub fn n_delay(&self) -> usize {
        self.delay_axis_s.len()
    }

    pub fn n_doppler(&self) -> usize {
        self.doppler_axis_hz.len()
    }

    #[inline]
    pub fn power_at(&self, i_delay: usize, i_doppler: usize) -> f64 {
        self.power[i_delay * self.n_doppler() + i_doppler]
    }

    /// Indices of the strongest cell.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_p = f64::NEG_INFINITY;
        for i in 0..self.n_delay() {
            for j in 0..self.n_doppler() {
                let p = self.power_at(i, j);
                if p > best_p {
                    best_p = p;
                    best = (i, j);
                }
            }
        }
        best
    }
}

/// Doppler frequency of shifted column `j` out of `m`, ascending order
/// with zero at column `m / 2`.
fn shifted_doppler_bin(j: usize, m: usize, symbol_duration_s: f64) -> f64 {
    (j as f64 - (m / 2) as f64) / (m as f64 * symbol_duration_s)
}

fn doppler_shift_reorder(unshifted: &[Complex64], n_delay: usize, m: usize) -> Vec<Complex64> {
    let center = m / 2;
    let mut out = vec![Complex64::new(0.0, 0.0); unshifted.len()];
    for d in 0..n_delay {
        for j in 0..m {
            let u = (j + m - center) % m;
            out[d * m + j] = unshifted[d * m + u];
        }
    }
    out
}

/// Classical delay-Doppler image of fully occupied channel samples:
///
/// `S(tau_d, alpha_u) = (1 / (N M)) sum_{k,m} H_hat[k,m]
///     exp(+j 2 pi f_k tau_d) exp(-j 2 pi t_m alpha_u)`
///
/// A unit-weight path on a grid node maps to unit peak power. The delay
/// axis runs `0 .. (N-1) / (N df)`; the Doppler axis is shift-reordered
/// to ascend through zero. Sparse masks are rejected: their hard aperture
/// turns this transform into a sidelobe generator, use `fit_model`.
pub fn scattering_function(samples: &ChannelSamples) -> Result<ScatteringMap, EstimationError> {
    if !samples.mask.is_full() {
        return Err(EstimationError::SparseMaskUnsupported {
            active: samples.mask.count_active(),
            total: samples.numerology.n_res(),
        });
    }
    scattering_common(samples, 1, samples.numerology.n_res() as f64)
}

/// Same transform with inactive REs zero-filled and normalization by the
/// active count, optionally zero-pad oversampled. This is the "pretend
/// the gaps are zeros" baseline; on sparse masks its aperture sidelobes
/// can bury or displace real paths, which is exactly what it is used to
/// demonstrate.
pub fn scattering_function_zero_filled(
    samples: &ChannelSamples,
    oversample: usize,
) -> Result<ScatteringMap, EstimationError> {
    if oversample == 0 {
        return Err(EstimationError::InvalidConfig("oversample must be at least 1".into()));
    }
    scattering_common(samples, oversample, samples.mask.count_active() as f64)
}

fn scattering_common(
    samples: &ChannelSamples,
    oversample: usize,
    normalization: f64,
) -> Result<ScatteringMap, EstimationError> {
    let num = &samples.numerology;
    let (n, m) = (num.n_carriers, num.n_symbols);
    let (pad_n, pad_m) = (n * oversample, m * oversample);
    let raw = fft::delay_doppler_transform(&samples.values, n, m, pad_n, pad_m);
    let scale = 1.0 / normalization;
    let shifted: Vec<Complex64> = doppler_shift_reorder(&raw, pad_n, pad_m)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let delay_axis: Vec<f64> = (0..pad_n)
        .map(|d| d as f64 / (pad_n as f64 * num.carrier_spacing_hz))
        .collect();
    let doppler_axis: Vec<f64> = (0..pad_m)
        .map(|j| shifted_doppler_bin(j, pad_m, num.symbol_duration_s))
        .collect();
    let power = shifted.iter().map(|v| v.norm_sqr()).collect();
    Ok(ScatteringMap {
        delay_axis_s: delay_axis,
        doppler_axis_hz: doppler_axis,
        power,
        complex_values: Some(shifted),
    })
}

/// Coherently subtracts a target-free reference capture from a capture
/// with targets, cancelling static clutter and the direct path. Masks
/// must match; weights combine as inverse summed variances
/// (`1 / (1/w_a + 1/w_b)`).
pub fn background_subtract(
    with_targets: &ChannelSamples,
    background: &ChannelSamples,
) -> Result<ChannelSamples, EstimationError> {
    if with_targets.mask != background.mask {
        return Err(EstimationError::MaskMismatch);
    }
    let mut values = vec![Complex64::new(0.0, 0.0); with_targets.values.len()];
    let mut weights = vec![0.0; with_targets.weights.len()];
    for (k, m) in with_targets.mask.iter_active() {
        let i = with_targets.mask.index(k, m);
        values[i] = with_targets.values[i] - background.values[i];
        let (wa, wb) = (with_targets.weights[i], background.weights[i]);
        weights[i] = if wa > 0.0 && wb > 0.0 { wa * wb / (wa + wb) } else { 0.0 };
    }
    Ok(ChannelSamples {
        numerology: with_targets.numerology,
        mask: with_targets.mask.clone(),
        values,
        weights,
        noise_power: with_targets.noise_power + background.noise_power,
        range_migration_warning: with_targets.range_migration_warning
            || background.range_migration_warning,
    })
}

// ─── Peak readout ───────────────────────────────────────────────────────

/// One detected local maximum of a scattering map.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PeakEstimate {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub power: f64,
    /// Peak power over the estimated noise floor, dB.
    pub excess_db: f64,
}

/// Finds local maxima at least `min_excess_db` above the noise floor.
///
/// The floor is the map-power median divided by ln 2 (the median of an
/// exponential noise surface), so a handful of strong peaks cannot drag
/// it up; it is clamped to at most 120 dB under the strongest cell so a
/// noiseless map does not report numeric round-off as detections. A cell
/// qualifies when it strictly dominates its Chebyshev
/// neighborhood of radius `max(guard, 1)`; sub-cell positions come from a
/// three-point parabolic fit on log power per axis (clamped to half a
/// cell, skipped at map edges). Peaks return sorted by descending power.
pub fn detect_peaks(map: &ScatteringMap, min_excess_db: f64, guard: usize) -> Vec<PeakEstimate> {
    let (nd, nu) = (map.n_delay(), map.n_doppler());
    if nd == 0 || nu == 0 {
        return Vec::new();
    }
    let mut sorted_power = map.power.clone();
    sorted_power.sort_by(|a, b| a.partial_cmp(b).expect("map power must not be NaN"));
    let median = sorted_power[sorted_power.len() / 2];
    let max_power = sorted_power[sorted_power.len() - 1];
    // The floor never drops more than 120 dB under the strongest cell:
    // a noiseless on-grid map has a median of pure FFT round-off, and
    // without the clamp that round-off would read as a field of peaks.
    let floor = (median / std::f64::consts::LN_2)
        .max(max_power * 1e-12)
        .max(f64::MIN_POSITIVE);
    let threshold = floor * 10f64.powf(min_excess_db / 10.0);
    let radius = guard.max(1) as isize;

    let mut peaks = Vec::new();
    for i in 0..nd {
        for j in 0..nu {
            let p = map.power_at(i, j);
            if p <= threshold {
                continue;
            }
            let mut dominant = true;
            'window: for di in -radius..=radius {
                for dj in -radius..=radius {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= nd as isize || nj >= nu as isize {
                        continue;
                    }
                    if map.power_at(ni as usize, nj as usize) >= p {
                        dominant = false;
                        break 'window;
                    }
                }
            }
            if !dominant {
                continue;
            }
            let delta_i = parabolic_offset(
                (i > 0).then(|| map.power_at(i - 1, j)),
                p,
                (i + 1 < nd).then(|| map.power_at(i + 1, j)),
                floor,
            );
            let delta_j = parabolic_offset(
                (j > 0).then(|| map.power_at(i, j - 1)),
                p,
                (j + 1 < nu).then(|| map.power_at(i, j + 1)),
                floor,
            );
            let delay_step = if nd > 1 { map.delay_axis_s[1] - map.delay_axis_s[0] } else { 0.0 };
            let doppler_step =
                if nu > 1 { map.doppler_axis_hz[1] - map.doppler_axis_hz[0] } else { 0.0 };
            peaks.push(PeakEstimate {
                delay_s: map.delay_axis_s[i] + delta_i * delay_step,
                doppler_hz: map.doppler_axis_hz[j] + delta_j * doppler_step,
                power: p,
                excess_db: 10.0 * (p / floor).log10(),
            });
        }
    }
    peaks.sort_by(|a, b| b.power.partial_cmp(&a.power).expect("peak power must not be NaN"));
    peaks
}

/// Vertex offset of a log-power parabola through three samples, in cells.
/// Neighbors at or under the floor are numeric residue, not mainlobe
/// shape, so the fit is skipped and the cell center stands.
fn parabolic_offset(left: Option<f64>, center: f64, right: Option<f64>, floor: f64) -> f64 {
    let (l, r) = match (left, right) {
        (Some(l), Some(r)) if l > floor && r > floor && center > 0.0 => (l.ln(), r.ln()),
        _ => return 0.0,
    };
    let c = center.ln();
    let denom = l - 2.0 * c + r;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(
        "scattering_function needs a fully occupied grid ({active} of {total} REs active); \
         sparse allocations need fit_model"
    )]
    SparseMaskUnsupported { active: usize, total: usize },
    #[error("channel sample sets use different masks")]
    MaskMismatch,
    #[error("{got} active REs cannot constrain {needed} path parameters")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure in estimator: {0}")]
    NumericalFailure(String),
}

// ─── Tests ──────────────────────────────────────────────────────────────
