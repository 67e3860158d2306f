//! OFDM numerology, sparse resource allocation, and waveform diagnostics.
//!
//! A frame is an `n_carriers x n_symbols` grid of resource elements (REs).
//! Carrier `k` sits at baseband offset `k * carrier_spacing_hz`, symbol `m`
//! at time `m * symbol_duration_s`; the symbol duration may exceed the
//! reciprocal carrier spacing to model cyclic prefixes or sparse slow-time
//! sampling. Allocations select REs per sensing link and distribute
//! transmit power over them; the diagnostics at the bottom of the module
//! (ambiguity transform, RMS bandwidth, ambiguity limits) quantify what a
//! given allocation can resolve.

use num_complex::Complex64;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::ScatteringMap;
use crate::parallel;
use crate::seeding;

// ─── Numerology ─────────────────────────────────────────────────────────

/// Grid geometry of one OFDM frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Numerology {
    pub n_carriers: usize,
    pub carrier_spacing_hz: f64,
    pub n_symbols: usize,
    pub symbol_duration_s: f64,
    pub center_frequency_hz: f64,
}

impl Numerology {
    pub fn validate(&self) -> Result<(), WaveformError> {
        if self.n_carriers == 0 || self.n_symbols == 0 {
            return Err(WaveformError::InvalidNumerology("grid must be non-empty".into()));
        }
        for (name, v) in [
            ("carrier_spacing_hz", self.carrier_spacing_hz),
            ("symbol_duration_s", self.symbol_duration_s),
            ("center_frequency_hz", self.center_frequency_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(WaveformError::InvalidNumerology(format!("{name} must be positive")));
            }
        }
        // Orthogonality: a symbol must span at least one carrier period
        // (cyclic prefix time is folded into the symbol duration).
        if self.symbol_duration_s * self.carrier_spacing_hz < 1.0 - 1e-12 {
            return Err(WaveformError::InvalidNumerology(
                "symbol_duration_s must be at least 1 / carrier_spacing_hz".into(),
            ));
        }
        Ok(())
    }

    /// Baseband frequency offset of carrier `k`, Hz.
    pub fn carrier_offset_hz(&self, k: usize) -> f64 {
        k as f64 * self.carrier_spacing_hz
    }

    /// Start time of symbol `m`, seconds.
    pub fn symbol_time_s(&self, m: usize) -> f64 {
        m as f64 * self.symbol_duration_s
    }

    /// Nominal occupied bandwidth of the full grid, Hz.
    pub fn bandwidth_hz(&self) -> f64 {
        self.n_carriers as f64 * self.carrier_spacing_hz
    }

    /// Duration of the full frame, seconds.
    pub fn frame_duration_s(&self) -> f64 {
        self.n_symbols as f64 * self.symbol_duration_s
    }

    pub fn n_res(&self) -> usize {
        self.n_carriers * self.n_symbols
    }
}

// ─── Resource masks ─────────────────────────────────────────────────────

/// Boolean RE selection over a frame grid, carrier-major
/// (`index = k * n_symbols + m`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReMask {
    pub n_carriers: usize,
    pub n_symbols: usize,
    active: Vec<bool>,
}

impl ReMask {
    pub fn new(n_carriers: usize, n_symbols: usize, active: Vec<bool>) -> Result<Self, WaveformError> {
        if active.len() != n_carriers * n_symbols {
            return Err(WaveformError::InvalidScheme(format!(
                "mask length {} does not match {n_carriers} x {n_symbols} grid",
                active.len()
            )));
        }
        Ok(ReMask { n_carriers, n_symbols, active })
    }

    pub fn full(n_carriers: usize, n_symbols: usize) -> Self {
        ReMask { n_carriers, n_symbols, active: vec![true; n_carriers * n_symbols] }
    }

    #[inline]
    pub fn index(&self, k: usize, m: usize) -> usize {
        k * self.n_symbols + m
    }

    #[inline]
    pub fn is_active(&self, k: usize, m: usize) -> bool {
        self.active[self.index(k, m)]
    }

    pub fn set(&mut self, k: usize, m: usize, value: bool) {
        let i = self.index(k, m);
        self.active[i] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    /// Active REs in carrier-major order.
    pub fn iter_active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.n_symbols;
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(move |(i, _)| (i / m, i % m))
    }

    /// Inclusive index range of carriers with any active RE.
    pub fn carrier_span(&self) -> Option<(usize, usize)> {
        let active: Vec<usize> = (0..self.n_carriers)
            .filter(|&k| (0..self.n_symbols).any(|m| self.is_active(k, m)))
            .collect();
        Some((*active.first()?, *active.last()?))
    }

    /// Inclusive index range of symbols with any active RE.
    pub fn symbol_span(&self) -> Option<(usize, usize)> {
        let active: Vec<usize> = (0..self.n_symbols)
            .filter(|&m| (0..self.n_carriers).any(|k| self.is_active(k, m)))
            .collect();
        Some((*active.first()?, *active.last()?))
    }

    /// Symbols with any active RE, ascending.
    pub fn active_symbols(&self) -> Vec<usize> {
        (0..self.n_symbols)
            .filter(|&m| (0..self.n_carriers).any(|k| self.is_active(k, m)))
            .collect()
    }

    /// Stable hash of dimensions and bit pattern, used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + self.active.len());
        bytes.extend_from_slice(&(self.n_carriers as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.n_symbols as u64).to_le_bytes());
        bytes.extend(self.active.iter().map(|&a| a as u8));
        seeding::fnv1a(&bytes)
    }
}

// ─── Allocation ─────────────────────────────────────────────────────────

/// How REs are selected for one link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum AllocationScheme {
    /// Every RE of the grid.
    Full,
    /// Every `period`-th symbol starting at `offset`, all carriers.
    TdmaUniform { period: usize, offset: usize },
    /// Explicit per-symbol on/off pattern, all carriers on active symbols.
    TdmaPattern { symbols: Vec<bool> },
    /// Contiguous carrier blocks `[start, start + count)`, all symbols.
    FdmaBlocks { blocks: Vec<CarrierBlock> },
    /// Explicit carrier list, all symbols.
    FdmaFragmented { carriers: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierBlock {
    pub start: usize,
    pub count: usize,
}

/// How transmit power is distributed over the selected REs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loading", rename_all = "kebab-case")]
pub enum PowerLoading {
    /// Equal power on every active RE.
    Uniform,
    /// Keeps only active REs whose mask entry is true (carrier-major,
    /// full-grid length), equal power over the survivors.
    Binary { mask: Vec<bool> },
    /// Non-negative per-RE weights (carrier-major, full-grid length),
    /// scaled to the total power. Zero-weight REs leave the active set.
    Continuous { weights: Vec<f64> },
}

/// An RE selection with per-RE power and optional owner tags.
#[derive(Clone, Debug)]
pub struct ResourceAllocation {
    pub numerology: Numerology,
    pub mask: ReMask,
    /// Per-RE power, full grid, carrier-major; zero exactly off the mask.
    pub power: Vec<f64>,
    /// Owning link tag per RE, for multi-link frames.
    pub owners: Vec<Option<u16>>,
    pub total_power: f64,
}

impl ResourceAllocation {
    #[inline]
    pub fn power_at(&self, k: usize, m: usize) -> f64 {
        self.power[self.mask.index(k, m)]
    }

    /// Sub-allocation containing only REs owned by `owner`.
    pub fn restrict_to_owner(&self, owner: u16) -> Result<ResourceAllocation, WaveformError> {
        let mut active = vec![false; self.mask.as_slice().len()];
        let mut power = vec![0.0; active.len()];
        let mut total = 0.0;
        for (i, &o) in self.owners.iter().enumerate() {
            if o == Some(owner) {
                active[i] = true;
                power[i] = self.power[i];
                total += self.power[i];
            }
        }
        if total == 0.0 {
            return Err(WaveformError::EmptyAllocation);
        }
        Ok(ResourceAllocation {
            numerology: self.numerology,
            mask: ReMask::new(self.mask.n_carriers, self.mask.n_symbols, active)?,
            power,
            owners: self.owners.iter().map(|&o| o.filter(|&x| x == owner)).collect(),
            total_power: total,
        })
    }
}

fn scheme_mask(numerology: &Numerology, scheme: &AllocationScheme) -> Result<ReMask, WaveformError> {
    let (n, m) = (numerology.n_carriers, numerology.n_symbols);
    let mut mask = ReMask::new(n, m, vec![false; n * m])?;
    match scheme {
        AllocationScheme::Full => return Ok(ReMask::full(n, m)),
        AllocationScheme::TdmaUniform { period, offset } => {
            if *period == 0 || offset >= period {
                return Err(WaveformError::InvalidScheme(format!(
                    "tdma-uniform needs period >= 1 and offset < period, got period={period} offset={offset}"
                )));
            }
            for sym in (*offset..m).step_by(*period) {
                for k in 0..n {
                    mask.set(k, sym, true);
                }
            }
        }
        AllocationScheme::TdmaPattern { symbols } => {
            if symbols.len() != m {
                return Err(WaveformError::InvalidScheme(format!(
                    "tdma-pattern length {} does not match {m} symbols",
                    symbols.len()
                )));
            }
            for (sym, &on) in symbols.iter().enumerate() {
                if on {
                    for k in 0..n {
                        mask.set(k, sym, true);
                    }
                }
            }
        }
        AllocationScheme::FdmaBlocks { blocks } => {
            let mut covered = vec![false; n];
            for b in blocks {
                if b.count == 0 || b.start + b.count > n {
                    return Err(WaveformError::InvalidScheme(format!(
                        "carrier block [{}, {}) outside the {n}-carrier grid",
                        b.start,
                        b.start + b.count
                    )));
                }
                for k in b.start..b.start + b.count {
                    if covered[k] {
                        return Err(WaveformError::InvalidScheme(format!(
                            "carrier {k} covered by more than one block"
                        )));
                    }
                    covered[k] = true;
                    for sym in 0..m {
                        mask.set(k, sym, true);
                    }
                }
            }
        }
        AllocationScheme::FdmaFragmented { carriers } => {
            let mut seen = vec![false; n];
            for &k in carriers {
                if k >= n {
                    return Err(WaveformError::InvalidScheme(format!(
                        "carrier {k} outside the {n}-carrier grid"
                    )));
                }
                if seen[k] {
                    return Err(WaveformError::InvalidScheme(format!("carrier {k} listed twice")));
                }
                seen[k] = true;
                for sym in 0..m {
                    mask.set(k, sym, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Builds an allocation: selects REs per `scheme`, distributes
/// `total_power` per `loading`, and normalizes so the per-RE powers sum to
/// `total_power` exactly (up to rounding). REs that end up with zero power
/// are dropped from the active set so that power is positive exactly on
/// active REs.
pub fn build_allocation(
    numerology: Numerology,
    scheme: &AllocationScheme,
    loading: &PowerLoading,
    total_power: f64,
) -> Result<ResourceAllocation, WaveformError> {
    numerology.validate()?;
    if !(total_power.is_finite() && total_power > 0.0) {
        return Err(WaveformError::InvalidLoading("total_power must be positive".into()));
    }
    let mut mask = scheme_mask(&numerology, scheme)?;
    let n_res = numerology.n_res();

    let mut weights = vec![0.0; n_res];
    match loading {
        PowerLoading::Uniform => {
            for i in 0..n_res {
                if mask.as_slice()[i] {
                    weights[i] = 1.0;
                }
            }
        }
        PowerLoading::Binary { mask: keep } => {
            if keep.len() != n_res {
                return Err(WaveformError::InvalidLoading(format!(
                    "binary loading mask length {} does not match the grid",
                    keep.len()
                )));
            }
            for i in 0..n_res {
                if mask.as_slice()[i] && keep[i] {
                    weights[i] = 1.0;
                }
            }
        }
        PowerLoading::Continuous { weights: w } => {
            if w.len() != n_res {
                return Err(WaveformError::InvalidLoading(format!(
                    "continuous loading weight length {} does not match the grid",
                    w.len()
                )));
            }
            for i in 0..n_res {
                if !(w[i].is_finite() && w[i] >= 0.0) {
                    return Err(WaveformError::InvalidLoading(
                        "continuous weights must be non-negative and finite".into(),
                    ));
                }
                if mask.as_slice()[i] {
                    weights[i] = w[i];
                }
            }
        }
    }

    let weight_sum: f64 = weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(WaveformError::EmptyAllocation);
    }
    let scale = total_power / weight_sum;
    let mut power = vec![0.0; n_res];
    let mut active = vec![false; n_res];
    for i in 0..n_res {
        if weights[i] > 0.0 {
            power[i] = weights[i] * scale;
            active[i] = true;
        }
    }
    mask = ReMask::new(numerology.n_carriers, numerology.n_symbols, active)?;
    Ok(ResourceAllocation {
        numerology,
        mask,
        power,
        owners: vec![None; n_res],
        total_power,
    })
}

/// Merges per-link allocations into one frame, tagging each RE with its
/// owner. Numerologies must match and active sets must be disjoint.
pub fn merge_allocations(
    parts: &[(u16, &ResourceAllocation)],
) -> Result<ResourceAllocation, WaveformError> {
    let (_, first) = parts.first().ok_or(WaveformError::EmptyAllocation)?;
    let numerology = first.numerology;
    let n_res = numerology.n_res();
    let mut active = vec![false; n_res];
    let mut power = vec![0.0; n_res];
    let mut owners: Vec<Option<u16>> = vec![None; n_res];
    let mut total = 0.0;
    for (owner, alloc) in parts {
        if alloc.numerology != numerology {
            return Err(WaveformError::MismatchedNumerology);
        }
        for (k, m) in alloc.mask.iter_active() {
            let i = alloc.mask.index(k, m);
            if active[i] {
                return Err(WaveformError::OverlappingOwners { carrier: k, symbol: m });
            }
            active[i] = true;
            power[i] = alloc.power[i];
            owners[i] = Some(*owner);
        }
        total += alloc.total_power;
    }
    Ok(ResourceAllocation {
        numerology,
        mask: ReMask::new(numerology.n_carriers, numerology.n_symbols, active)?,
        power,
        owners,
        total_power: total,
    })
}

// ─── Symbol generation ──────────────────────────────────────────────────

/// What modulates the allocated REs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SymbolSource {
    /// Deterministic multisine with Newman phases for low crest factor.
    MultisineMinPapr,
    /// Random square-QAM payload, frame energy normalized.
    QamRandom { order: u32, seed: u64 },
    /// Unit-phase pilots on every `stride`-th carrier; power renormalized
    /// over the surviving REs.
    PilotPattern { stride: usize },
}

/// Complex symbol values over a frame grid, zero off the active mask.
#[derive(Clone, Debug)]
pub struct FrameSymbols {
    pub numerology: Numerology,
    /// Active mask actually carrying energy (pilot generation may prune
    /// the allocation's mask).
    pub mask: ReMask,
    /// Effective per-RE power consistent with `values`;
    /// sums to the allocation's total power.
    pub power: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl FrameSymbols {
    #[inline]
    pub fn value_at(&self, k: usize, m: usize) -> Complex64 {
        self.values[self.mask.index(k, m)]
    }

    pub fn total_energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Newman phase for tone `q` of `count`: `pi * q^2 / count`. Keeps the
/// crest factor of a uniform multisine near its lower bound.
fn newman_phase(q: usize, count: usize) -> f64 {
    std::f64::consts::PI * (q * q) as f64 / count as f64
}

fn qam_levels(order: u32) -> Result<Vec<f64>, WaveformError> {
    let side = match order {
        4 => 2,
        16 => 4,
        64 => 8,
        256 => 16,
        other => return Err(WaveformError::UnsupportedQamOrder(other)),
    };
    Ok((0..side).map(|i| (2 * i as i32 - (side as i32 - 1)) as f64).collect())
}

/// Generates symbol values for an allocation.
pub fn generate_symbols(
    alloc: &ResourceAllocation,
    source: &SymbolSource,
) -> Result<FrameSymbols, WaveformError> {
    let n_res = alloc.numerology.n_res();
    let mut values = vec![Complex64::new(0.0, 0.0); n_res];
    match source {
        SymbolSource::MultisineMinPapr => {
            for m in 0..alloc.numerology.n_symbols {
                let carriers: Vec<usize> = (0..alloc.numerology.n_carriers)
                    .filter(|&k| alloc.mask.is_active(k, m))
                    .collect();
                for (q, &k) in carriers.iter().enumerate() {
                    let i = alloc.mask.index(k, m);
                    let phase = newman_phase(q, carriers.len());
                    values[i] = Complex64::from_polar(alloc.power[i].sqrt(), phase);
                }
            }
            Ok(FrameSymbols {
                numerology: alloc.numerology,
                mask: alloc.mask.clone(),
                power: alloc.power.clone(),
                values,
            })
        }
        SymbolSource::QamRandom { order, seed } => {
            let levels = qam_levels(*order)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            // Mean constellation energy: two independent uniform level
            // draws, each of variance (side^2 - 1) / 3.
            let per_dim = (levels.len() as f64 * levels.len() as f64 - 1.0) / 3.0;
            let sym_scale = 1.0 / (2.0 * per_dim).sqrt();
            for (k, m) in alloc.mask.iter_active() {
                let i = alloc.mask.index(k, m);
                let re = levels[rng.random_range(0..levels.len())];
                let im = levels[rng.random_range(0..levels.len())];
                values[i] = Complex64::new(re, im) * sym_scale * alloc.power[i].sqrt();
            }
            // Random payloads only hit the power budget in expectation;
            // normalize the frame so energy bookkeeping stays exact.
            let energy: f64 = values.iter().map(|v| v.norm_sqr()).sum();
            if energy <= 0.0 {
                return Err(WaveformError::EmptyAllocation);
            }
            let frame_scale = (alloc.total_power / energy).sqrt();
            for v in &mut values {
                *v *= frame_scale;
            }
            let power = values.iter().map(|v| v.norm_sqr()).collect();
            Ok(FrameSymbols {
                numerology: alloc.numerology,
                mask: alloc.mask.clone(),
                power,
                values,
            })
        }
        SymbolSource::PilotPattern { stride } => {
            if *stride == 0 {
                return Err(WaveformError::InvalidLoading("pilot stride must be >= 1".into()));
            }
            let mut active = vec![false; n_res];
            let mut kept_power = 0.0;
            for (k, m) in alloc.mask.iter_active() {
                if k % stride == 0 {
                    let i = alloc.mask.index(k, m);
                    active[i] = true;
                    kept_power += alloc.power[i];
                }
            }
            if kept_power <= 0.0 {
                return Err(WaveformError::EmptyAllocation);
            }
            let boost = alloc.total_power / kept_power;
            let mut power = vec![0.0; n_res];
            for (i, &on) in active.iter().enumerate() {
                if on {
                    power[i] = alloc.power[i] * boost;
                    values[i] = Complex64::new(power[i].sqrt(), 0.0);
                }
            }
            Ok(FrameSymbols {
                numerology: alloc.numerology,
                mask: ReMask::new(alloc.mask.n_carriers, alloc.mask.n_symbols, active)?,
                power,
                values,
            })
        }
    }
}

// ─── Diagnostics ────────────────────────────────────────────────────────

/// Frame auto-ambiguity over explicit delay/Doppler grids.
///
/// Evaluates the aperture sum
/// `chi(tau, alpha) = sum_re |x[k,m]|^2 exp(j 2 pi (f_k tau + alpha t_m))`
/// by direct summation over active REs, so arbitrary (also irregular)
/// grids are allowed. `chi(0, 0)` equals the frame energy and is the
/// global magnitude maximum; sparse schemes show their grating lobes here
/// before any channel is involved.
pub fn ambiguity_function(
    frame: &FrameSymbols,
    delay_grid_s: &[f64],
    doppler_grid_hz: &[f64],
) -> ScatteringMap {
    let samples: Vec<(f64, f64, f64)> = frame
        .mask
        .iter_active()
        .map(|(k, m)| {
            let i = frame.mask.index(k, m);
            (
                frame.numerology.carrier_offset_hz(k),
                frame.numerology.symbol_time_s(m),
                frame.values[i].norm_sqr(),
            )
        })
        .collect();
    let n_dop = doppler_grid_hz.len();
    let complex = parallel::map_indexed(delay_grid_s.len() * n_dop, |i| {
        let tau = delay_grid_s[i / n_dop];
        let alpha = doppler_grid_hz[i % n_dop];
        let mut acc = Complex64::new(0.0, 0.0);
        for &(f, t, p) in &samples {
            let phase = std::f64::consts::TAU * (f * tau + alpha * t);
            acc += Complex64::from_polar(p, phase);
        }
        acc
    });
    let power = complex.iter().map(|c| c.norm_sqr()).collect();
    ScatteringMap {
        delay_axis_s: delay_grid_s.to_vec(),
        doppler_axis_hz: doppler_grid_hz.to_vec(),
        power,
        complex_values: Some(complex),
    }
}

/// Power-weighted RMS bandwidth of an allocation, Hz: the square root of
/// the second central moment of the per-carrier power profile. Larger
/// values mean steeper delay curvature and tighter delay bounds.
pub fn rms_bandwidth_hz(alloc: &ResourceAllocation) -> f64 {
    let n = alloc.numerology.n_carriers;
    let mut per_carrier = vec![0.0; n];
    for (k, m) in alloc.mask.iter_active() {
        per_carrier[k] += alloc.power[alloc.mask.index(k, m)];
    }
    let total: f64 = per_carrier.iter().sum();
    let mean: f64 = per_carrier
        .iter()
        .enumerate()
        .map(|(k, &p)| p * alloc.numerology.carrier_offset_hz(k))
        .sum::<f64>()
        / total;
    let var: f64 = per_carrier
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let d = alloc.numerology.carrier_offset_hz(k) - mean;
            p * d * d
        })
        .sum::<f64>()
        / total;
    var.sqrt()
}

/// Resolution and ambiguity limits of an allocation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnambiguousLimits {
    pub delay_resolution_s: f64,
    pub doppler_resolution_hz: f64,
    pub max_unambiguous_delay_s: f64,
    pub max_unambiguous_doppler_hz: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Delay/Doppler resolution and ambiguity limits of an allocation.
///
/// Resolutions follow the occupied spans (carrier span bandwidth, symbol
/// span duration). The delay ambiguity is the grid's fundamental
/// `1 / carrier_spacing`; the Doppler ambiguity is set by the slow-time
/// repetition period of the active symbols (the gcd of their index gaps),
/// so decimating slow time shrinks it.
pub fn unambiguous_limits(alloc: &ResourceAllocation) -> UnambiguousLimits {
    let num = &alloc.numerology;
    let (k_lo, k_hi) = alloc.mask.carrier_span().expect("allocation is never empty");
    let (m_lo, m_hi) = alloc.mask.symbol_span().expect("allocation is never empty");
    let occupied_bw = (k_hi - k_lo + 1) as f64 * num.carrier_spacing_hz;
    let occupied_t = (m_hi - m_lo + 1) as f64 * num.symbol_duration_s;
    let symbols = alloc.mask.active_symbols();
    let gap = symbols.windows(2).map(|w| w[1] - w[0]).fold(0, gcd).max(1);
    UnambiguousLimits {
        delay_resolution_s: 1.0 / occupied_bw,
        doppler_resolution_hz: 1.0 / occupied_t,
        max_unambiguous_delay_s: 1.0 / num.carrier_spacing_hz,
        max_unambiguous_doppler_hz: 1.0 / (gap as f64 * num.symbol_duration_s),
    }
}

#[derive(Debug, Error)]
pub enum WaveformError {
    #[error("invalid numerology: {0}")]
    InvalidNumerology(String),
    #[error("invalid allocation scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid power loading: {0}")]
    InvalidLoading(String),
    #[error("allocation selects no resource elements")]
    EmptyAllocation,
    #[error("RE (carrier {carrier}, symbol {symbol}) claimed by more than one owner")]
    OverlappingOwners { carrier: usize, symbol: usize },
    #[error("allocations with different numerologies cannot be merged")]
    MismatchedNumerology,
    #[error("unsupported QAM order {0}; use 4, 16, 64, or 256")]
    UnsupportedQamOrder(u32),
}

// ─── Tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn numerology(n: usize, m: usize) -> Numerology {
        Numerology {
            n_carriers: n,
            carrier_spacing_hz: 1.25e6,
            n_symbols: m,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        }
    }

    #[test]
    fn full_uniform_splits_power_evenly() {
        let alloc =
            build_allocation(numerology(64, 32), &AllocationScheme::Full, &PowerLoading::Uniform, 1.0)
                .unwrap();
        assert_eq!(alloc.mask.count_active(), 2048);
        assert_relative_eq!(alloc.power_at(17, 5), 1.0 / 2048.0, max_relative = 1e-15);
        let sum: f64 = alloc.power.iter().sum();
        assert_relative_eq!(sum, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn tdma_uniform_selects_expected_symbols() {
        let alloc = build_allocation(
            numerology(8, 16),
            &AllocationScheme::TdmaUniform { period: 4, offset: 1 },
            &PowerLoading::Uniform,
            2.0,
        )
        .unwrap();
        assert_eq!(alloc.mask.active_symbols(), vec![1, 5, 9, 13]);
        assert_eq!(alloc.mask.count_active(), 8 * 4);
    }

    #[test]
    fn scheme_validation_errors() {
        let num = numerology(8, 8);
        assert!(build_allocation(
            num,
            &AllocationScheme::TdmaUniform { period: 4, offset: 4 },
            &PowerLoading::Uniform,
            1.0
        )
        .is_err());
        assert!(build_allocation(
            num,
            &AllocationScheme::FdmaBlocks {
                blocks: vec![CarrierBlock { start: 6, count: 4 }]
            },
            &PowerLoading::Uniform,
            1.0
        )
        .is_err());
        assert!(build_allocation(
            num,
            &AllocationScheme::TdmaPattern { symbols: vec![false; 8] },
            &PowerLoading::Uniform,
            1.0
        )
        .is_err());
    }

    #[test]
    fn continuous_loading_normalizes_and_prunes() {
        let num = numerology(2, 2);
        let weights = vec![3.0, 1.0, 0.0, 0.0]; // carrier-major 2x2
        let alloc = build_allocation(
            num,
            &AllocationScheme::Full,
            &PowerLoading::Continuous { weights },
            8.0,
        )
        .unwrap();
        assert_eq!(alloc.mask.count_active(), 2);
        assert_relative_eq!(alloc.power_at(0, 0), 6.0, max_relative = 1e-15);
        assert_relative_eq!(alloc.power_at(0, 1), 2.0, max_relative = 1e-15);
        assert!(!alloc.mask.is_active(1, 0));
    }

    #[test]
    fn merge_tags_owners_and_rejects_overlap() {
        let num = numerology(4, 4);
        let even = build_allocation(
            num,
            &AllocationScheme::TdmaUniform { period: 2, offset: 0 },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        let odd = build_allocation(
            num,
            &AllocationScheme::TdmaUniform { period: 2, offset: 1 },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        let merged = merge_allocations(&[(0, &even), (1, &odd)]).unwrap();
        assert!(merged.mask.is_full());
        assert_relative_eq!(merged.total_power, 2.0);
        assert_eq!(merged.owners[merged.mask.index(0, 0)], Some(0));
        assert_eq!(merged.owners[merged.mask.index(0, 1)], Some(1));
        let again = merge_allocations(&[(0, &even), (1, &even)]);
        assert!(matches!(again, Err(WaveformError::OverlappingOwners { .. })));
        let back = merged.restrict_to_owner(1).unwrap();
        assert_eq!(back.mask.active_symbols(), vec![1, 3]);
    }

    #[test]
    fn multisine_energy_matches_power_exactly() {
        let alloc =
            build_allocation(numerology(64, 4), &AllocationScheme::Full, &PowerLoading::Uniform, 3.0)
                .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        for (k, m) in frame.mask.iter_active() {
            let i = frame.mask.index(k, m);
            assert_relative_eq!(frame.values[i].norm_sqr(), frame.power[i], max_relative = 1e-12);
        }
        assert_relative_eq!(frame.total_energy(), 3.0, max_relative = 1e-12);
    }

    #[test]
    fn multisine_crest_factor_is_low() {
        let alloc =
            build_allocation(numerology(64, 1), &AllocationScheme::Full, &PowerLoading::Uniform, 1.0)
                .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        // Direct oversampled time-domain synthesis of symbol 0.
        let oversample = 8;
        let n = 64 * oversample;
        let mut peak: f64 = 0.0;
        let mut mean = 0.0;
        for i in 0..n {
            let t = i as f64 / n as f64; // in units of the symbol period
            let mut x = Complex64::new(0.0, 0.0);
            for k in 0..64 {
                let idx = frame.mask.index(k, 0);
                x += frame.values[idx]
                    * Complex64::from_polar(1.0, std::f64::consts::TAU * k as f64 * t);
            }
            peak = peak.max(x.norm_sqr());
            mean += x.norm_sqr() / n as f64;
        }
        let papr_db = 10.0 * (peak / mean).log10();
        assert!(papr_db < 3.5, "multisine PAPR {papr_db:.2} dB");
    }

    #[test]
    fn qam_random_is_seeded_and_energy_exact() {
        let alloc =
            build_allocation(numerology(16, 8), &AllocationScheme::Full, &PowerLoading::Uniform, 2.0)
                .unwrap();
        let a = generate_symbols(&alloc, &SymbolSource::QamRandom { order: 16, seed: 9 }).unwrap();
        let b = generate_symbols(&alloc, &SymbolSource::QamRandom { order: 16, seed: 9 }).unwrap();
        let c = generate_symbols(&alloc, &SymbolSource::QamRandom { order: 16, seed: 10 }).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values != c.values);
        assert_relative_eq!(a.total_energy(), 2.0, max_relative = 1e-12);
        assert!(matches!(
            generate_symbols(&alloc, &SymbolSource::QamRandom { order: 32, seed: 0 }),
            Err(WaveformError::UnsupportedQamOrder(32))
        ));
    }

    #[test]
    fn pilot_pattern_keeps_stride_carriers() {
        let alloc =
            build_allocation(numerology(16, 2), &AllocationScheme::Full, &PowerLoading::Uniform, 1.0)
                .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::PilotPattern { stride: 4 }).unwrap();
        for (k, m) in frame.mask.iter_active() {
            assert_eq!(k % 4, 0, "unexpected active carrier {k} symbol {m}");
        }
        assert_eq!(frame.mask.count_active(), 4 * 2);
        assert_relative_eq!(frame.total_energy(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ambiguity_peak_energy_and_first_null() {
        let alloc =
            build_allocation(numerology(64, 8), &AllocationScheme::Full, &PowerLoading::Uniform, 1.5)
                .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        let bandwidth = alloc.numerology.bandwidth_hz();
        let delays = [0.0, 0.25 / bandwidth, 1.0 / bandwidth];
        let map = ambiguity_function(&frame, &delays, &[0.0]);
        let origin = map.power[0].sqrt();
        assert_relative_eq!(origin, 1.5, max_relative = 1e-12);
        for &p in &map.power {
            assert!(p.sqrt() <= origin * (1.0 + 1e-12));
        }
        // Uniform comb: the delay cut is a Dirichlet kernel with its first
        // null one resolution cell out.
        assert!(map.power[2].sqrt() < 1e-9 * origin);
    }

    #[test]
    fn tdma_decimation_creates_doppler_grating_lobe() {
        let alloc = build_allocation(
            numerology(16, 32),
            &AllocationScheme::TdmaUniform { period: 4, offset: 0 },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        let frame = generate_symbols(&alloc, &SymbolSource::MultisineMinPapr).unwrap();
        let t_sym = alloc.numerology.symbol_duration_s;
        let lobe = 1.0 / (4.0 * t_sym);
        let map = ambiguity_function(&frame, &[0.0], &[0.0, lobe]);
        assert_relative_eq!(map.power[1], map.power[0], max_relative = 1e-12);
    }

    #[test]
    fn rms_bandwidth_of_uniform_comb() {
        let alloc =
            build_allocation(numerology(64, 4), &AllocationScheme::Full, &PowerLoading::Uniform, 1.0)
                .unwrap();
        let rms = rms_bandwidth_hz(&alloc);
        let spacing = alloc.numerology.carrier_spacing_hz;
        let exact = spacing * ((64.0f64 * 64.0 - 1.0) / 12.0).sqrt();
        assert_relative_eq!(rms, exact, max_relative = 1e-12);
        // Continuum limit B / sqrt(12), within 1% for 64 carriers.
        let b = alloc.numerology.bandwidth_hz();
        assert_relative_eq!(rms, b / 12.0f64.sqrt(), max_relative = 0.01);
    }

    #[test]
    fn edge_loading_raises_rms_bandwidth() {
        let num = numerology(64, 4);
        let full =
            build_allocation(num, &AllocationScheme::Full, &PowerLoading::Uniform, 1.0).unwrap();
        let edges = build_allocation(
            num,
            &AllocationScheme::FdmaFragmented {
                carriers: (0..8).chain(56..64).collect(),
            },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        assert!(rms_bandwidth_hz(&edges) > rms_bandwidth_hz(&full));
    }

    #[test]
    fn limits_follow_spans_and_decimation() {
        let num = Numerology {
            n_carriers: 256,
            carrier_spacing_hz: 312.5e3,
            n_symbols: 250,
            symbol_duration_s: 200e-6,
            center_frequency_hz: 5.2e9,
        };
        let full = build_allocation(num, &AllocationScheme::Full, &PowerLoading::Uniform, 1.0).unwrap();
        let lim = unambiguous_limits(&full);
        assert_relative_eq!(lim.delay_resolution_s, 12.5e-9, max_relative = 1e-12);
        assert_relative_eq!(lim.doppler_resolution_hz, 20.0, max_relative = 1e-12);
        assert_relative_eq!(lim.max_unambiguous_delay_s, 3.2e-6, max_relative = 1e-12);
        assert_relative_eq!(lim.max_unambiguous_doppler_hz, 5000.0, max_relative = 1e-12);

        let half = build_allocation(
            num,
            &AllocationScheme::FdmaBlocks { blocks: vec![CarrierBlock { start: 0, count: 128 }] },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(
            unambiguous_limits(&half).delay_resolution_s,
            2.0 * lim.delay_resolution_s,
            max_relative = 1e-12
        );

        let decimated = build_allocation(
            num,
            &AllocationScheme::TdmaUniform { period: 2, offset: 0 },
            &PowerLoading::Uniform,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(
            unambiguous_limits(&decimated).max_unambiguous_doppler_hz,
            lim.max_unambiguous_doppler_hz / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn binary_loading_prunes_and_renormalizes() {
        let num = numerology(4, 1);
        let mut keep = vec![true; 4];
        keep[0] = false;
        let alloc = build_allocation(
            num,
            &AllocationScheme::Full,
            &PowerLoading::Binary { mask: keep },
            6.0,
        )
        .unwrap();
        assert_eq!(alloc.mask.count_active(), 3);
        assert_abs_diff_eq!(alloc.power_at(1, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alloc.power_at(0, 0), 0.0);
    }
}
