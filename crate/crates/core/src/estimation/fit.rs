//! Iterative model-based path extraction.
//!
//! The estimator fits the observation model
//! `H_hat[k,m] = sum_p gamma_p exp(-j 2 pi f_k tau_p) exp(+j 2 pi t_m alpha_p) + noise`
//! directly to the active resource elements, so it works on any mask:
//! sparse allocations lose integration gain but not correctness. One path
//! at a time, a zero-padded FFT of the weighted residual locates the best
//! cell, damped Gauss-Newton refines (tau, alpha) continuously with the
//! gain projected out, and the path is accepted only if its residual
//! power drop beats a noise-calibrated threshold (see the sibling order
//! module). After every acceptance the whole set is polished: first by
//! cyclic re-refinement against the full residual, then by a joint
//! Levenberg-Marquardt step over all path parameters at once (the cyclic
//! sweeps stall on strongly correlated atoms), and one final linear
//! solve refits all gains.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{order, EstimationError};
use crate::channel::ChannelSamples;
use crate::fft;

/// Tuning knobs of `fit_model`. The defaults suit frames up to a few
/// hundred carriers and symbols.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Hard cap on the number of extracted paths.
    pub max_paths: usize,
    /// Zero-padding factor of the coarse search grid.
    pub oversample: usize,
    /// Iteration cap of each Gauss-Newton refinement.
    pub max_refine_iters: usize,
    /// Minimum rounds of cyclic joint re-refinement after each accepted
    /// path; polishing continues past the minimum until the residual
    /// stops improving.
    pub refine_rounds: usize,
    /// Acceptance false-alarm rate of the order-selection threshold.
    pub false_alarm_rate: f64,
    /// Monte-Carlo trials behind the order-selection threshold.
    pub calibration_trials: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_paths: 6,
            oversample: 4,
            max_refine_iters: 40,
            refine_rounds: 2,
            false_alarm_rate: 0.01,
            calibration_trials: 400,
        }
    }
}

/// One extracted path.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FittedPath {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub gain: Complex64,
}

/// Outcome of `fit_model`.
#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    /// Extracted paths, strongest gain first.
    pub paths: Vec<FittedPath>,
    /// Weighted power of the input samples.
    pub initial_power: f64,
    /// Weighted power of the final residual.
    pub residual_power: f64,
    pub noise_power: f64,
    /// Residual-drop acceptance threshold that stopped the extraction
    /// (zero for noiseless input).
    pub threshold: f64,
    /// True when every refinement reached its step tolerance and the
    /// joint gain solve succeeded.
    pub converged: bool,
}

// ─── Shared design workspace ────────────────────────────────────────────

/// Active-RE view of one capture: axis values, weights, and the padded
/// grid geometry of the coarse search. Shared between the fit and the
/// order-selection calibration so both measure extraction gain with the
/// same code.
pub(crate) struct Design {
    pub(crate) f: Vec<f64>,
    pub(crate) t: Vec<f64>,
    pub(crate) w: Vec<f64>,
    grid_index: Vec<usize>,
    pub(crate) w_sum: f64,
    n_carriers: usize,
    n_symbols: usize,
    pad_carriers: usize,
    pad_symbols: usize,
    carrier_spacing_hz: f64,
    symbol_duration_s: f64,
}

pub(crate) struct Refined {
    pub(crate) delay_s: f64,
    pub(crate) doppler_hz: f64,
    pub(crate) gain: Complex64,
    /// Weighted residual power removed by this path.
    pub(crate) drop: f64,
    /// Whether the step tolerance was reached before the iteration cap.
    pub(crate) hit_tol: bool,
}

impl Design {
    pub(crate) fn from_samples(samples: &ChannelSamples, oversample: usize) -> Design {
        let num = &samples.numerology;
        let mut design = Design {
            f: vec![],
            t: vec![],
            w: vec![],
            grid_index: vec![],
            w_sum: 0.0,
            n_carriers: num.n_carriers,
            n_symbols: num.n_symbols,
            pad_carriers: num.n_carriers * oversample,
            pad_symbols: num.n_symbols * oversample,
            carrier_spacing_hz: num.carrier_spacing_hz,
            symbol_duration_s: num.symbol_duration_s,
        };
        for (k, m) in samples.mask.iter_active() {
            let i = samples.mask.index(k, m);
            design.f.push(num.carrier_offset_hz(k));
            design.t.push(num.symbol_time_s(m));
            design.w.push(samples.weights[i]);
            design.grid_index.push(i);
        }
        design.w_sum = design.w.iter().sum();
        design
    }

    pub(crate) fn len(&self) -> usize {
        self.f.len()
    }

    /// Padded-grid signature for calibration cache keys.
    pub(crate) fn pad_key(&self) -> u64 {
        ((self.pad_carriers as u64) << 32) | self.pad_symbols as u64
    }

    /// Active values of a full-grid vector.
    pub(crate) fn gather(&self, full: &[Complex64]) -> Vec<Complex64> {
        self.grid_index.iter().map(|&i| full[i]).collect()
    }

    #[inline]
    fn atom(&self, i: usize, delay_s: f64, doppler_hz: f64) -> Complex64 {
        Complex64::from_polar(
            1.0,
            std::f64::consts::TAU * (self.t[i] * doppler_hz - self.f[i] * delay_s),
        )
    }

    pub(crate) fn weighted_power(&self, residual: &[Complex64]) -> f64 {
        residual.iter().zip(&self.w).map(|(r, w)| w * r.norm_sqr()).sum()
    }

    /// `sum_i w_i r_i conj(s_i)` at a candidate point.
    fn correlate(&self, residual: &[Complex64], delay_s: f64, doppler_hz: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..self.len() {
            acc += self.w[i] * residual[i] * self.atom(i, delay_s, doppler_hz).conj();
        }
        acc
    }

    fn delay_cell(&self) -> f64 {
        1.0 / (self.n_carriers as f64 * self.carrier_spacing_hz)
    }

    fn doppler_cell(&self) -> f64 {
        1.0 / (self.n_symbols as f64 * self.symbol_duration_s)
    }

    fn wrap(&self, delay_s: f64, doppler_hz: f64) -> (f64, f64) {
        let delay_span = 1.0 / self.carrier_spacing_hz;
        let doppler_span = 1.0 / self.symbol_duration_s;
        let tau = delay_s.rem_euclid(delay_span);
        let alpha =
            (doppler_hz + doppler_span / 2.0).rem_euclid(doppler_span) - doppler_span / 2.0;
        (tau, alpha)
    }

    /// Strongest cell of the zero-padded correlation surface.
    fn coarse_peak(&self, residual: &[Complex64]) -> (f64, f64) {
        let mut grid =
            vec![Complex64::new(0.0, 0.0); self.n_carriers * self.n_symbols];
        for i in 0..self.len() {
            grid[self.grid_index[i]] = self.w[i] * residual[i];
        }
        let surface = fft::delay_doppler_transform(
            &grid,
            self.n_carriers,
            self.n_symbols,
            self.pad_carriers,
            self.pad_symbols,
        );
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (i, v) in surface.iter().enumerate() {
            let p = v.norm_sqr();
            if p > best_p {
                best_p = p;
                best = i;
            }
        }
        let d = best / self.pad_symbols;
        let u = best % self.pad_symbols;
        let tau = d as f64 / (self.pad_carriers as f64 * self.carrier_spacing_hz);
        let signed_u =
            if u <= self.pad_symbols / 2 { u as f64 } else { u as f64 - self.pad_symbols as f64 };
        let alpha = signed_u / (self.pad_symbols as f64 * self.symbol_duration_s);
        (tau, alpha)
    }

    /// Damped Gauss-Newton refinement of one path against `residual`,
    /// with the complex gain projected out analytically each iteration.
    pub(crate) fn refine(
        &self,
        residual: &[Complex64],
        delay0_s: f64,
        doppler0_hz: f64,
        max_iters: usize,
    ) -> Refined {
        let mut tau = delay0_s;
        let mut alpha = doppler0_hz;
        let mut c = self.correlate(residual, tau, alpha);
        let mut objective = c.norm_sqr();
        let mut hit_tol = false;
        let tol_tau = 1e-9 * self.delay_cell();
        let tol_alpha = 1e-9 * self.doppler_cell();
        // Weighted axis means. The gain re-projects every iteration, so the
        // derivative component parallel to the atom carries no curvature;
        // centering the axes removes it (the variable-projection Jacobian)
        // and restores quadratic convergence.
        let f_mean = self.f.iter().zip(&self.w).map(|(f, w)| f * w).sum::<f64>() / self.w_sum;
        let t_mean = self.t.iter().zip(&self.w).map(|(t, w)| t * w).sum::<f64>() / self.w_sum;

        for _ in 0..max_iters {
            let gamma = c / self.w_sum;
            let mut a00 = 0.0;
            let mut a01 = 0.0;
            let mut a11 = 0.0;
            let mut b0 = 0.0;
            let mut b1 = 0.0;
            for i in 0..self.len() {
                let s = self.atom(i, tau, alpha);
                let model = gamma * s;
                let e = residual[i] - model;
                // d model / d tau = gamma * (-j 2 pi f) s, centered
                let d_tau =
                    model * Complex64::new(0.0, -std::f64::consts::TAU * (self.f[i] - f_mean));
                // d model / d alpha = gamma * (+j 2 pi t) s, centered
                let d_alpha =
                    model * Complex64::new(0.0, std::f64::consts::TAU * (self.t[i] - t_mean));
                let w = self.w[i];
                a00 += w * d_tau.norm_sqr();
                a11 += w * d_alpha.norm_sqr();
                a01 += w * (d_tau.conj() * d_alpha).re;
                b0 += w * (d_tau.conj() * e).re;
                b1 += w * (d_alpha.conj() * e).re;
            }
            let det = a00 * a11 - a01 * a01;
            if !(det.is_finite() && det > 1e-30 * (a00 * a11).max(f64::MIN_POSITIVE)) {
                hit_tol = true;
                break;
            }
            let step_tau = (a11 * b0 - a01 * b1) / det;
            let step_alpha = (a00 * b1 - a01 * b0) / det;

            // Halve the step until the projected objective improves.
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..8 {
                let trial_tau = tau + scale * step_tau;
                let trial_alpha = alpha + scale * step_alpha;
                let trial_c = self.correlate(residual, trial_tau, trial_alpha);
                if trial_c.norm_sqr() > objective {
                    tau = trial_tau;
                    alpha = trial_alpha;
                    c = trial_c;
                    objective = trial_c.norm_sqr();
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                // No descent direction left at line-search resolution:
                // the current point is the refined optimum.
                hit_tol = true;
                break;
            }
            if (scale * step_tau).abs() < tol_tau && (scale * step_alpha).abs() < tol_alpha {
                hit_tol = true;
                break;
            }
        }
        let (tau, alpha) = self.wrap(tau, alpha);
        let c = self.correlate(residual, tau, alpha);
        Refined {
            delay_s: tau,
            doppler_hz: alpha,
            gain: c / self.w_sum,
            drop: c.norm_sqr() / self.w_sum,
            hit_tol,
        }
    }

    /// One full extraction (coarse search plus refinement), as used both
    /// by the fit loop and by the order-selection calibration.
    pub(crate) fn extract_once(&self, residual: &[Complex64], max_iters: usize) -> Refined {
        let (tau0, alpha0) = self.coarse_peak(residual);
        self.refine(residual, tau0, alpha0, max_iters)
    }

    /// Joint least-squares gains for a fixed set of (delay, doppler)
    /// atoms against `data`, with the implied residual and its weighted
    /// power. Returns `None` when the gram matrix is singular (duplicate
    /// atoms) or the solve overflows.
    fn joint_gains(
        &self,
        data: &[Complex64],
        params: &[(f64, f64)],
    ) -> Option<(Vec<Complex64>, Vec<Complex64>, f64)> {
        let p = params.len();
        let atoms: Vec<Vec<Complex64>> = params
            .iter()
            .map(|&(tau, alpha)| (0..self.len()).map(|i| self.atom(i, tau, alpha)).collect())
            .collect();
        let mut gram = DMatrix::<Complex64>::zeros(p, p);
        let mut rhs = DVector::<Complex64>::zeros(p);
        for a in 0..p {
            for b in 0..p {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.len() {
                    acc += self.w[i] * atoms[b][i] * atoms[a][i].conj();
                }
                gram[(a, b)] = acc;
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..self.len() {
                acc += self.w[i] * data[i] * atoms[a][i].conj();
            }
            rhs[a] = acc;
        }
        let gains = gram.lu().solve(&rhs)?;
        let mut residual = data.to_vec();
        for b in 0..p {
            for i in 0..self.len() {
                residual[i] -= gains[b] * atoms[b][i];
            }
        }
        let power = self.weighted_power(&residual);
        if !power.is_finite() {
            return None;
        }
        Some((gains.iter().copied().collect(), residual, power))
    }

    /// Joint Levenberg-Marquardt polish of every extracted path against
    /// the original data, with all gains re-solved linearly at each trial
    /// point. The cyclic single-path sweeps stall when two atoms are
    /// strongly correlated (closely spaced paths at an unfavourable
    /// relative phase): each per-path subproblem then sits at its own
    /// optimum while the joint objective still has downhill directions
    /// that move the paths together, and only a step over the full
    /// cross-path curvature finds them. Returns the polished residual,
    /// its power, and whether the iteration settled before the cap;
    /// `extracted` is updated in place.
    fn joint_polish(
        &self,
        r0: &[Complex64],
        extracted: &mut [Refined],
        max_iters: usize,
        improvement_floor: f64,
    ) -> Option<(Vec<Complex64>, f64, bool)> {
        let p = extracted.len();
        let mut params: Vec<(f64, f64)> =
            extracted.iter().map(|e| (e.delay_s, e.doppler_hz)).collect();
        let (mut gains, mut residual, mut power) = self.joint_gains(r0, &params)?;
        let f_mean = self.f.iter().zip(&self.w).map(|(f, w)| f * w).sum::<f64>() / self.w_sum;
        let t_mean = self.t.iter().zip(&self.w).map(|(t, w)| t * w).sum::<f64>() / self.w_sum;
        let n2 = 2 * p;
        let mut lambda = 1e-4;
        let mut settled = false;
        for _ in 0..max_iters {
            // Normal equations of the Jacobian at the current point. The
            // per-path axis centering plays the same role as in `refine`:
            // it removes the curvature component parallel to each atom,
            // which the gain re-solve absorbs anyway.
            let mut normal = DMatrix::<f64>::zeros(n2, n2);
            let mut grad = DVector::<f64>::zeros(n2);
            let mut cols = vec![Complex64::new(0.0, 0.0); n2];
            for i in 0..self.len() {
                for q in 0..p {
                    let model = gains[q] * self.atom(i, params[q].0, params[q].1);
                    cols[2 * q] = model
                        * Complex64::new(0.0, -std::f64::consts::TAU * (self.f[i] - f_mean));
                    cols[2 * q + 1] = model
                        * Complex64::new(0.0, std::f64::consts::TAU * (self.t[i] - t_mean));
                }
                let w = self.w[i];
                for a in 0..n2 {
                    for b in a..n2 {
                        normal[(a, b)] += w * (cols[a].conj() * cols[b]).re;
                    }
                    grad[a] += w * (cols[a].conj() * residual[i]).re;
                }
            }
            for a in 0..n2 {
                for b in 0..a {
                    normal[(a, b)] = normal[(b, a)];
                }
            }

            // Damped trials: reject a step by raising lambda until either
            // the joint objective (gains re-solved) improves or the
            // damping is so strong the step is numerically nothing.
            let mut accepted = false;
            for _ in 0..16 {
                let mut damped = normal.clone();
                for d in 0..n2 {
                    damped[(d, d)] += lambda * normal[(d, d)].max(f64::MIN_POSITIVE);
                }
                if let Some(step) = damped.lu().solve(&grad) {
                    let trial: Vec<(f64, f64)> = (0..p)
                        .map(|q| (params[q].0 + step[2 * q], params[q].1 + step[2 * q + 1]))
                        .collect();
                    if let Some((trial_gains, trial_residual, trial_power)) =
                        self.joint_gains(r0, &trial)
                    {
                        if trial_power < power {
                            let improvement = power - trial_power;
                            params = trial;
                            gains = trial_gains;
                            residual = trial_residual;
                            power = trial_power;
                            lambda = (lambda * 0.3).max(1e-12);
                            accepted = true;
                            if improvement <= improvement_floor {
                                settled = true;
                            }
                            break;
                        }
                    }
                }
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
            if !accepted {
                // No damping level yields descent: the point is the
                // joint optimum at this numerical resolution.
                settled = true;
                break;
            }
            if settled {
                break;
            }
        }
        for q in 0..p {
            let (tau, alpha) = self.wrap(params[q].0, params[q].1);
            extracted[q].delay_s = tau;
            extracted[q].doppler_hz = alpha;
            extracted[q].gain = gains[q];
        }
        Some((residual, power, settled))
    }
}

// ─── The fit ────────────────────────────────────────────────────────────

/// Fits discrete paths to weighted channel samples. See the module docs
/// for the algorithm; headline properties:
///
/// - works on arbitrary (sparse) masks;
/// - model order is chosen by a noise-calibrated residual-drop test with
///   the configured false-alarm rate (noiseless input accepts every
///   strictly useful path until the residual is numerically exhausted);
/// - needs at least four active REs per allowed path.
pub fn fit_model(samples: &ChannelSamples, config: &FitConfig) -> Result<FitResult, EstimationError> {
    if config.max_paths == 0 {
        return Err(EstimationError::InvalidConfig("max_paths must be at least 1".into()));
    }
    if config.oversample == 0 {
        return Err(EstimationError::InvalidConfig("oversample must be at least 1".into()));
    }
    if !(config.false_alarm_rate > 0.0 && config.false_alarm_rate < 1.0) {
        return Err(EstimationError::InvalidConfig("false_alarm_rate must lie in (0, 1)".into()));
    }
    if config.calibration_trials < 50 {
        return Err(EstimationError::InvalidConfig(
            "calibration needs at least 50 trials".into(),
        ));
    }
    let n_active = samples.mask.count_active();
    if n_active < 4 * config.max_paths {
        return Err(EstimationError::TooFewSamples { needed: 4 * config.max_paths, got: n_active });
    }
    for (k, m) in samples.mask.iter_active() {
        let i = samples.mask.index(k, m);
        if !(samples.weights[i].is_finite() && samples.weights[i] > 0.0) {
            return Err(EstimationError::InvalidConfig(
                "every active RE needs a positive finite weight".into(),
            ));
        }
        if !samples.values[i].is_finite() {
            return Err(EstimationError::NumericalFailure("non-finite channel sample".into()));
        }
    }

    let design = Design::from_samples(samples, config.oversample);
    let r0 = design.gather(&samples.values);
    let initial_power = design.weighted_power(&r0);

    let threshold = if samples.noise_power > 0.0 {
        order::max_gain_quantile(
            &design,
            samples.mask.fingerprint(),
            config.false_alarm_rate,
            config.calibration_trials,
            config.max_refine_iters,
        )
    } else {
        0.0
    };

    let mut residual = r0.clone();
    let mut extracted: Vec<Refined> = Vec::new();
    let mut all_hit_tol = true;
    let numerical_floor = 1e-18 * initial_power;

    // Below this, a residual drop explains nothing beyond round-off: the
    // refinement tolerances themselves leave residue near 1e-16 of the
    // input power, so a candidate under the line is numeric exhaust.
    let drop_floor = 1e-16 * initial_power;

    while extracted.len() < config.max_paths {
        if design.weighted_power(&residual) <= numerical_floor {
            break;
        }
        let candidate = design.extract_once(&residual, config.max_refine_iters);
        if candidate.drop <= threshold || candidate.drop <= drop_floor {
            break;
        }
        all_hit_tol &= candidate.hit_tol;
        for i in 0..design.len() {
            residual[i] -= candidate.gain * design.atom(i, candidate.delay_s, candidate.doppler_hz);
        }
        extracted.push(candidate);

        // Cyclic joint re-refinement after every acceptance: each path
        // re-fit against the residual with every other path still
        // subtracted. Greedy estimates are biased by the sidelobes of
        // paths not yet removed, and that bias residue would read as
        // further paths, so polishing continues past the configured
        // minimum until a full sweep stops paying.
        let sweep_cap = config.refine_rounds.max(64);
        let mut before = design.weighted_power(&residual);
        for sweep in 0..sweep_cap {
            for p in 0..extracted.len() {
                let old = &extracted[p];
                for i in 0..design.len() {
                    residual[i] += old.gain * design.atom(i, old.delay_s, old.doppler_hz);
                }
                let refined =
                    design.refine(&residual, old.delay_s, old.doppler_hz, config.max_refine_iters);
                all_hit_tol &= refined.hit_tol;
                for i in 0..design.len() {
                    residual[i] -=
                        refined.gain * design.atom(i, refined.delay_s, refined.doppler_hz);
                }
                extracted[p] = refined;
            }
            let after = design.weighted_power(&residual);
            if sweep + 1 >= config.refine_rounds && before - after <= 1e-15 * initial_power {
                break;
            }
            before = after;
        }

        // Joint polish over the full cross-path curvature. The cyclic
        // sweeps above can stall with correlated atoms (closely spaced
        // paths at an unfavourable relative phase), leaving a residual
        // plateau that would otherwise read as further paths.
        if extracted.len() >= 2 {
            if let Some((polished, _power, settled)) = design.joint_polish(
                &r0,
                &mut extracted,
                config.max_refine_iters,
                1e-15 * initial_power,
            ) {
                residual = polished;
                all_hit_tol &= settled;
            }
        }
    }

    // Final joint linear solve for all gains against the original data.
    let mut joint_ok = true;
    if !extracted.is_empty() {
        let params: Vec<(f64, f64)> =
            extracted.iter().map(|e| (e.delay_s, e.doppler_hz)).collect();
        match design.joint_gains(&r0, &params) {
            Some((gains, joint_residual, joint_power)) => {
                if joint_power <= design.weighted_power(&residual) {
                    for (path, gain) in extracted.iter_mut().zip(&gains) {
                        path.gain = *gain;
                    }
                    residual = joint_residual;
                }
            }
            None => joint_ok = false,
        }
    }

    extracted.sort_by(|a, b| {
        b.gain
            .norm_sqr()
            .partial_cmp(&a.gain.norm_sqr())
            .expect("gains are finite")
    });
    let residual_power = design.weighted_power(&residual);
    Ok(FitResult {
        paths: extracted
            .iter()
            .map(|e| FittedPath { delay_s: e.delay_s, doppler_hz: e.doppler_hz, gain: e.gain })
            .collect(),
        initial_power,
        residual_power,
        noise_power: samples.noise_power,
        threshold,
        converged: all_hit_tol && joint_ok,
    })
}

// ─── Tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{self, PathComponent, PathKind, PathSet};
    use crate::scene::BistaticLink;
    use crate::waveform::{Numerology, ReMask};
    use approx::assert_relative_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn numerology() -> Numerology {
        Numerology {
            n_carriers: 24,
            carrier_spacing_hz: 1.25e6,
            n_symbols: 12,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        }
    }

    fn synth(num: Numerology, paths: &[PathComponent], noise: f64, seed: u64) -> ChannelSamples {
        let mask = ReMask::full(num.n_carriers, num.n_symbols);
        let set =
            PathSet::new(BistaticLink::new("a", "b"), num.center_frequency_hz, paths.to_vec()).unwrap();
        let mut values = channel::sample_frf(&set, &num, &mask);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (noise / 2.0).sqrt();
        let mut weights = vec![0.0; num.n_res()];
        for i in 0..num.n_res() {
            if noise > 0.0 {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                values[i] += Complex64::new(re * s, im * s);
                weights[i] = 1.0 / noise;
            } else {
                weights[i] = 1.0;
            }
        }
        ChannelSamples {
            numerology: num,
            mask,
            values,
            weights,
            noise_power: noise,
            range_migration_warning: false,
        }
    }

    fn off_grid_path(num: &Numerology, dc: f64, uc: f64, gain: Complex64) -> PathComponent {
        PathComponent {
            delay_s: dc / (num.n_carriers as f64 * num.carrier_spacing_hz),
            doppler_hz: uc / (num.n_symbols as f64 * num.symbol_duration_s),
            weight: gain,
            kind: PathKind::Target { index: 0 },
        }
    }

    #[test]
    fn noiseless_single_path_is_recovered_to_machine_precision() {
        let num = numerology();
        let truth = off_grid_path(&num, 4.31, -2.27, Complex64::new(0.6, 0.8));
        let samples = synth(num, &[truth], 0.0, 0);
        let result = fit_model(&samples, &FitConfig::default()).unwrap();
        assert_eq!(result.paths.len(), 1);
        assert!(result.converged);
        assert_relative_eq!(result.paths[0].delay_s, truth.delay_s, max_relative = 1e-10);
        assert_relative_eq!(result.paths[0].doppler_hz, truth.doppler_hz, max_relative = 1e-10);
        assert!((result.paths[0].gain - truth.weight).norm() < 1e-9);
        assert!(result.residual_power < 1e-16 * result.initial_power);
        assert_eq!(result.threshold, 0.0);
    }

    #[test]
    fn pure_noise_yields_no_paths() {
        let num = numerology();
        let samples = synth(num, &[], 0.1, 99);
        let result = fit_model(&samples, &FitConfig::default()).unwrap();
        assert!(
            result.paths.is_empty(),
            "noise produced {} spurious paths",
            result.paths.len()
        );
        assert!(result.threshold > 0.0);
    }

    #[test]
    fn order_selection_keeps_true_paths_in_noise() {
        let num = numerology();
        // Strong enough that misses are essentially impossible at this
        // noise level; the point is the count, not the accuracy.
        let a = off_grid_path(&num, 3.4, 1.2, Complex64::new(1.0, 0.0));
        let b = off_grid_path(&num, 7.9, -3.6, Complex64::from_polar(0.6, 1.0));
        let samples = synth(num, &[a, b], 1e-3, 7);
        let result = fit_model(&samples, &FitConfig::default()).unwrap();
        assert_eq!(result.paths.len(), 2, "expected exactly the two true paths");
        assert_relative_eq!(result.paths[0].delay_s, a.delay_s, max_relative = 1e-3);
        assert_relative_eq!(result.paths[1].delay_s, b.delay_s, max_relative = 1e-3);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let num = Numerology {
            n_carriers: 4,
            carrier_spacing_hz: 1.25e6,
            n_symbols: 4,
            symbol_duration_s: 1e-3,
            center_frequency_hz: 5.2e9,
        };
        let samples = synth(num, &[], 0.0, 0);
        let err = fit_model(&samples, &FitConfig { max_paths: 6, ..FitConfig::default() });
        assert!(matches!(err, Err(EstimationError::TooFewSamples { needed: 24, got: 16 })));
    }

    #[test]
    fn zero_input_returns_empty_converged_fit() {
        let num = numerology();
        let samples = synth(num, &[], 0.0, 0);
        let result = fit_model(&samples, &FitConfig::default()).unwrap();
        assert!(result.paths.is_empty());
        assert!(result.converged);
        assert_eq!(result.residual_power, 0.0);
    }

    #[test]
    fn delay_wraps_into_the_unambiguous_interval() {
        let num = numerology();
        let span = 1.0 / num.carrier_spacing_hz;
        // A delay beyond the ambiguity span aliases back into it.
        let truth = PathComponent {
            delay_s: span + 3.31 / (num.n_carriers as f64 * num.carrier_spacing_hz),
            doppler_hz: 100.0,
            weight: Complex64::new(1.0, 0.0),
            kind: PathKind::Target { index: 0 },
        };
        let samples = synth(num, &[truth], 0.0, 0);
        let result = fit_model(&samples, &FitConfig::default()).unwrap();
        assert_eq!(result.paths.len(), 1);
        assert!(result.paths[0].delay_s >= 0.0 && result.paths[0].delay_s < span);
        assert_relative_eq!(
            result.paths[0].delay_s,
            truth.delay_s - span,
            max_relative = 1e-9
        );
    }

    #[test]
    fn calibration_threshold_is_cached_and_deterministic() {
        let num = numerology();
        let samples = synth(num, &[], 0.05, 5);
        let a = fit_model(&samples, &FitConfig::default()).unwrap();
        let b = fit_model(&samples, &FitConfig::default()).unwrap();
        assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
        // A different mask produces a different calibration.
        let mut sparse = samples.clone();
        let mut mask = sparse.mask.clone();
        for m in 0..num.n_symbols {
            mask.set(11, m, false);
        }
        sparse.mask = mask;
        let c = fit_model(&sparse, &FitConfig::default()).unwrap();
        assert!(c.threshold != a.threshold);
    }
}
