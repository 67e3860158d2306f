//! Shared FFT plumbing for the delay-Doppler transforms.
//!
//! Convention used throughout the crate: a path with delay `tau` and
//! Doppler `alpha` contributes `exp(-j 2 pi f_k tau) * exp(+j 2 pi t_m alpha)`
//! to the channel frequency response, so the matching imaging transform
//! applies an inverse DFT along carriers (sign `+`) and a forward DFT
//! along symbols (sign `-`).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (len, direction == FftDirection::Forward);
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(len, direction))
        .clone()
}

pub(crate) fn fft_rows(data: &mut [Complex64], row_len: usize, direction: FftDirection) {
    let fft = plan(row_len, direction);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for row in data.chunks_exact_mut(row_len) {
        fft.process_with_scratch(row, &mut scratch);
    }
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Unnormalized two-axis transform of a carrier-major RE grid
/// (`values[k * n_symbols + m]`), zero padded to `pad_carriers x
/// pad_symbols`:
///
/// `out[d * pad_symbols + u] = sum_{k,m} values[k,m]
///     * exp(+j 2 pi k d / pad_carriers) * exp(-j 2 pi m u / pad_symbols)`
///
/// Row `d` indexes delay (unshifted, so `d / (pad_carriers *
/// carrier_spacing)` seconds), column `u` indexes Doppler in forward-FFT
/// bin order (negative frequencies in the upper half).
pub(crate) fn delay_doppler_transform(
    values: &[Complex64],
    n_carriers: usize,
    n_symbols: usize,
    pad_carriers: usize,
    pad_symbols: usize,
) -> Vec<Complex64> {
    assert_eq!(values.len(), n_carriers * n_symbols);
    assert!(pad_carriers >= n_carriers && pad_symbols >= n_symbols);
    let mut grid = vec![Complex64::new(0.0, 0.0); pad_carriers * pad_symbols];
    for k in 0..n_carriers {
        grid[k * pad_symbols..k * pad_symbols + n_symbols]
            .copy_from_slice(&values[k * n_symbols..(k + 1) * n_symbols]);
    }
    // Symbols: forward DFT along each carrier row.
    fft_rows(&mut grid, pad_symbols, FftDirection::Forward);
    // Carriers: inverse DFT along each column, via transpose.
    let mut flipped = transpose(&grid, pad_carriers, pad_symbols);
    fft_rows(&mut flipped, pad_carriers, FftDirection::Inverse);
    transpose(&flipped, pad_symbols, pad_carriers)
}
