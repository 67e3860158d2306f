//! Time-reversal precoding from estimated channel state.
//!
//! A time-reversal transmitter pre-multiplies each RE by the conjugate of
//! the channel it estimated there, so all multipath arrivals re-align at
//! zero excess delay and add coherently at the intended point. The module
//! builds such prefilters, evaluates the resulting delay-domain focusing
//! against the true channel, and traces how the gain degrades when the
//! channel used for the prefilter was sampled somewhere else.

use num_complex::Complex64;
use rustfft::FftDirection;
use thiserror::Error;

use crate::channel::ChannelSamples;
use crate::fft;
use crate::waveform::{Numerology, ReMask};

/// Per-RE transmit prefilter, normalized to unit mean power over the
/// active REs (`sum |g|^2 = count_active`), so prefiltering never smuggles
/// in transmit power.
#[derive(Clone, Debug)]
pub struct Prefilter {
    pub numerology: Numerology,
    pub mask: ReMask,
    /// Full-grid coefficients, zero off the mask.
    pub values: Vec<Complex64>,
}

impl Prefilter {
    /// Builds a prefilter from arbitrary raw coefficients by zeroing
    /// inactive REs and rescaling to the unit power budget.
    pub fn normalized(
        numerology: Numerology,
        mask: ReMask,
        mut values: Vec<Complex64>,
    ) -> Result<Prefilter, PrecodingError> {
        if values.len() != numerology.n_res() {
            return Err(PrecodingError::Invalid(format!(
                "prefilter needs {} coefficients, got {}",
                numerology.n_res(),
                values.len()
            )));
        }
        let mut energy = 0.0;
        let mut active = 0usize;
        for k in 0..numerology.n_carriers {
            for m in 0..numerology.n_symbols {
                let idx = mask.index(k, m);
                if mask.is_active(k, m) {
                    energy += values[idx].norm_sqr();
                    active += 1;
                } else {
                    values[idx] = Complex64::new(0.0, 0.0);
                }
            }
        }
        if !(energy.is_finite() && energy > 0.0) || active == 0 {
            return Err(PrecodingError::EmptyChannel);
        }
        let scale = (active as f64 / energy).sqrt();
        for v in &mut values {
            *v *= scale;
        }
        Ok(Prefilter { numerology, mask, values })
    }
}

/// Matched (time-reversal) prefilter for an estimated channel:
/// `g = c conj(H_hat)` with `c` chosen for the unit power budget.
pub fn tr_prefilter(samples: &ChannelSamples) -> Result<Prefilter, PrecodingError> {
    let conj: Vec<Complex64> = samples.values.iter().map(|v| v.conj()).collect();
    Prefilter::normalized(samples.numerology, samples.mask.clone(), conj)
}

/// Delay-domain response of a prefiltered transmission through a channel.
#[derive(Clone, Debug)]
pub struct TrResponse {
    pub numerology: Numerology,
    pub mask: ReMask,
    /// Effective per-RE channel `g * H_true`, full grid.
    pub effective: Vec<Complex64>,
    /// Focused delay response per symbol: `n_symbols` rows of
    /// `n_carriers` delay bins, each the inverse carrier transform of the
    /// effective channel normalized by that symbol's active-carrier
    /// count. Rows for empty symbols are all zero.
    pub per_symbol: Vec<Vec<Complex64>>,
    /// Power per delay bin averaged over the occupied symbols.
    pub delay_profile: Vec<f64>,
}

impl TrResponse {
    /// Peak-to-mean ratio of the averaged delay power profile, in dB.
    /// The mean runs over all delay bins, so a flat-spectrum channel
    /// through its matched prefilter scores the active-carrier count.
    pub fn focusing_gain_db(&self) -> f64 {
        let peak = self.delay_profile.iter().cloned().fold(0.0, f64::max);
        let mean = self.delay_profile.iter().sum::<f64>() / self.delay_profile.len() as f64;
        10.0 * (peak / mean).log10()
    }

    /// Delay bin with the strongest averaged power.
    pub fn peak_bin(&self) -> usize {
        self.delay_profile
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("profile powers are finite"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Propagates a prefiltered transmission through the true channel
/// (full-grid per-RE response, e.g. a fresh noiseless capture or a
/// synthesized frequency response) and forms the focused delay response.
pub fn apply_tr(prefilter: &Prefilter, channel: &[Complex64]) -> Result<TrResponse, PrecodingError> {
    let num = &prefilter.numerology;
    if channel.len() != num.n_res() {
        return Err(PrecodingError::Invalid(format!(
            "channel grid needs {} entries, got {}",
            num.n_res(),
            channel.len()
        )));
    }
    let n = num.n_carriers;
    let n_sym = num.n_symbols;
    let mut effective = vec![Complex64::new(0.0, 0.0); num.n_res()];
    for (k, m) in prefilter.mask.iter_active() {
        let idx = prefilter.mask.index(k, m);
        effective[idx] = prefilter.values[idx] * channel[idx];
    }

    let mut per_symbol = Vec::with_capacity(n_sym);
    let mut delay_profile = vec![0.0; n];
    let mut occupied = 0usize;
    for m in 0..n_sym {
        let active: usize = (0..n).filter(|&k| prefilter.mask.is_active(k, m)).count();
        if active == 0 {
            per_symbol.push(vec![Complex64::new(0.0, 0.0); n]);
            continue;
        }
        let mut row: Vec<Complex64> =
            (0..n).map(|k| effective[prefilter.mask.index(k, m)]).collect();
        fft::fft_rows(&mut row, n, FftDirection::Inverse);
        let scale = 1.0 / active as f64;
        for v in &mut row {
            *v *= scale;
        }
        for (d, v) in row.iter().enumerate() {
            delay_profile[d] += v.norm_sqr();
        }
        per_symbol.push(row);
        occupied += 1;
    }
    if occupied == 0 {
        return Err(PrecodingError::EmptyChannel);
    }
    for p in &mut delay_profile {
        *p /= occupied as f64;
    }
    Ok(TrResponse {
        numerology: *num,
        mask: prefilter.mask.clone(),
        effective,
        per_symbol,
        delay_profile,
    })
}

/// One point of a displacement sweep.
#[derive(Clone, Copy, Debug)]
pub struct MismatchPoint {
    pub displacement_m: f64,
    pub focusing_gain_db: f64,
}

/// Focusing gain versus focal-point displacement.
///
/// The prefilter is frozen from the entry at displacement zero (which
/// must be present) and then applied to every entry's channel, mimicking
/// a transmitter whose channel knowledge ages while the scene moves.
/// Entries must share the zero entry's grid and mask. Results keep the
/// input order.
pub fn tr_mismatch_curve(
    entries: &[(f64, ChannelSamples)],
) -> Result<Vec<MismatchPoint>, PrecodingError> {
    let reference = entries
        .iter()
        .find(|(d, _)| *d == 0.0)
        .ok_or(PrecodingError::MissingReference)?;
    let prefilter = tr_prefilter(&reference.1)?;
    let mut out = Vec::with_capacity(entries.len());
    for (displacement, samples) in entries {
        if samples.mask != prefilter.mask || samples.numerology != prefilter.numerology {
            return Err(PrecodingError::MaskMismatch);
        }
        let response = apply_tr(&prefilter, &samples.values)?;
        out.push(MismatchPoint {
            displacement_m: *displacement,
            focusing_gain_db: response.focusing_gain_db(),
        });
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum PrecodingError {
    #[error("channel estimate carries no usable energy")]
    EmptyChannel,
    #[error("a displacement sweep needs an entry at displacement 0")]
    MissingReference,
    #[error("entries must share the reference grid and mask")]
    MaskMismatch,
    #[error("invalid precoding input: {0}")]
    Invalid(String),
}

// ─── Tests ──────────────────────────────────────────────────────────────
