//! Fisher information and Cramer-Rao bounds for path parameters.
//!
//! Each path contributes four real parameters, ordered
//! `[delay, doppler, gain_re, gain_im]` and concatenated path by path.
//! For complex Gaussian observations with per-RE variance `1 / w_re`, the
//! information matrix is
//!
//! `F_ij = 2 sum_re w_re Re( conj(d mu_re / d theta_i) * d mu_re / d theta_j )`
//!
//! where `mu` is the noise-free channel model. Because each RE adds its
//! own rank-limited term, information is additive over disjoint resource
//! sets; that additivity is what makes per-RE scoring and allocation
//! comparison cheap.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::channel::ChannelSamples;
use crate::estimation::FittedPath;
use crate::parallel;
use crate::waveform::{Numerology, ReMask, ResourceAllocation};

/// Condition-number limit beyond which the information matrix is treated
/// as singular and the scenario as unidentifiable.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Weights of the scalar CRB objective: a weighted trace over per-path
/// delay and Doppler variances (gain variances are bookkept but not
/// scored, since sensing cares about geometry, not amplitudes).
#[derive(Clone, Copy, Debug)]
pub struct CrbObjective {
    /// Weight per second^2 of delay variance.
    pub delay_weight: f64,
    /// Weight per Hz^2 of Doppler variance.
    pub doppler_weight: f64,
}

impl CrbObjective {
    /// Natural-cell normalization: delay variance in units of delay
    /// resolution cells, Doppler variance in Doppler cells, so both axes
    /// count equally for the frame at hand.
    pub fn cells(numerology: &Numerology) -> CrbObjective {
        let bw = numerology.bandwidth_hz();
        let frame = numerology.frame_duration_s();
        CrbObjective { delay_weight: bw * bw, doppler_weight: frame * frame }
    }
}

/// Bound for one path.
#[derive(Clone, Copy, Debug)]
pub struct PathCrb {
    pub delay_var_s2: f64,
    pub doppler_var_hz2: f64,
    pub gain_re_var: f64,
    pub gain_im_var: f64,
}

/// Full Cramer-Rao report: the information matrix, its inverse, and the
/// per-path diagonal.
#[derive(Clone, Debug)]
pub struct CrbReport {
    pub fisher: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub per_path: Vec<PathCrb>,
    pub condition: f64,
}

impl CrbReport {
    pub fn objective(&self, weights: &CrbObjective) -> f64 {
        self.per_path
            .iter()
            .map(|p| weights.delay_weight * p.delay_var_s2 + weights.doppler_weight * p.doppler_var_hz2)
            .sum()
    }
}

/// Complex derivative of the model at one RE with respect to the four
/// parameters of one path.
#[inline]
fn derivatives(f_hz: f64, t_s: f64, path: &FittedPath) -> [Complex64; 4] {
    let s = Complex64::from_polar(
        1.0,
        std::f64::consts::TAU * (t_s * path.doppler_hz - f_hz * path.delay_s),
    );
    let model = path.gain * s;
    [
        model * Complex64::new(0.0, -std::f64::consts::TAU * f_hz),
        model * Complex64::new(0.0, std::f64::consts::TAU * t_s),
        s,
        Complex64::new(0.0, 1.0) * s,
    ]
}

/// Information matrix over the active REs of `mask`, with per-RE
/// reliability weights (inverse noise variances, full-grid layout).
pub fn fisher_information(
    numerology: &Numerology,
    mask: &ReMask,
    weights: &[f64],
    paths: &[FittedPath],
) -> Result<DMatrix<f64>, CrbError> {
    if paths.is_empty() {
        return Err(CrbError::NoPaths);
    }
    if weights.len() != numerology.n_res() {
        return Err(CrbError::Invalid("weights must cover the full RE grid".into()));
    }
    let n = 4 * paths.len();
    let mut fisher = DMatrix::<f64>::zeros(n, n);
    let mut d = vec![Complex64::new(0.0, 0.0); n];
    for (k, m) in mask.iter_active() {
        let w = weights[mask.index(k, m)];
        if w <= 0.0 {
            continue;
        }
        let f = numerology.carrier_offset_hz(k);
        let t = numerology.symbol_time_s(m);
        for (p, path) in paths.iter().enumerate() {
            let block = derivatives(f, t, path);
            d[4 * p..4 * p + 4].copy_from_slice(&block);
        }
        for i in 0..n {
            for j in i..n {
                let v = 2.0 * w * (d[i].conj() * d[j]).re;
                fisher[(i, j)] += v;
                if i != j {
                    fisher[(j, i)] += v;
                }
            }
        }
    }
    Ok(fisher)
}

/// Information matrix for weighted channel samples.
pub fn fisher_for_samples(
    samples: &ChannelSamples,
    paths: &[FittedPath],
) -> Result<DMatrix<f64>, CrbError> {
    fisher_information(&samples.numerology, &samples.mask, &samples.weights, paths)
}

/// Information matrix for a planned allocation probed in noise of the
/// given power: RE weights are `power / noise_power`.
pub fn fisher_for_allocation(
    alloc: &ResourceAllocation,
    noise_power: f64,
    paths: &[FittedPath],
) -> Result<DMatrix<f64>, CrbError> {
    if !(noise_power.is_finite() && noise_power > 0.0) {
        return Err(CrbError::Invalid("noise_power must be positive".into()));
    }
    let weights: Vec<f64> = alloc.power.iter().map(|&p| p / noise_power).collect();
    fisher_information(&alloc.numerology, &alloc.mask, &weights, paths)
}

/// Inverts an information matrix into a CRB report, via symmetric
/// eigendecomposition so rank problems surface as structured errors
/// rather than garbage variances. An unidentifiable report carries the
/// parameter-space directions the data cannot see.
pub fn crb_from_fisher(fisher: &DMatrix<f64>) -> Result<CrbReport, CrbError> {
    let n = fisher.nrows();
    if n == 0 || n % 4 != 0 {
        return Err(CrbError::Invalid("information matrix must be 4p x 4p".into()));
    }
    // Delay lives in seconds and gain in plain amplitude, so the raw matrix
    // mixes entries dozens of orders of magnitude apart. Jacobi scaling makes
    // the condition number measure actual coupling instead of unit choices.
    let diag_max = (0..n).map(|i| fisher[(i, i)]).fold(0.0_f64, f64::max);
    if !(diag_max.is_finite() && diag_max > 0.0) {
        return Err(CrbError::Invalid("information matrix is not positive".into()));
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = fisher[(i, i)];
            if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }
        })
        .collect();
    let mut balanced = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            balanced[(r, c)] = fisher[(r, c)] * scale[r] * scale[c];
        }
    }
    let eigen = balanced.symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_eig.is_finite() && max_eig > 0.0) {
        return Err(CrbError::Invalid("information matrix is not positive".into()));
    }
    let min_eig = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
    if condition > CONDITION_LIMIT {
        let mut null_directions = Vec::new();
        for (i, &lambda) in eigen.eigenvalues.iter().enumerate() {
            if lambda <= max_eig / CONDITION_LIMIT {
                // A null vector of the balanced matrix maps back through the
                // scaling, then gets renormalized.
                let mut v: Vec<f64> =
                    eigen.eigenvectors.column(i).iter().zip(&scale).map(|(x, s)| x * s).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
                null_directions.push(v);
            }
        }
        return Err(CrbError::Unidentifiable { condition, null_directions });
    }
    let mut covariance = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let v = eigen.eigenvectors.column(i);
        let inv_lambda = 1.0 / eigen.eigenvalues[i];
        for r in 0..n {
            for c in 0..n {
                covariance[(r, c)] += inv_lambda * v[r] * v[c] * scale[r] * scale[c];
            }
        }
    }
    let per_path = (0..n / 4)
        .map(|p| PathCrb {
            delay_var_s2: covariance[(4 * p, 4 * p)],
            doppler_var_hz2: covariance[(4 * p + 1, 4 * p + 1)],
            gain_re_var: covariance[(4 * p + 2, 4 * p + 2)],
            gain_im_var: covariance[(4 * p + 3, 4 * p + 3)],
        })
        .collect();
    Ok(CrbReport { fisher: fisher.clone(), covariance, per_path, condition })
}

/// CRB for a planned allocation.
pub fn crb_for_allocation(
    alloc: &ResourceAllocation,
    noise_power: f64,
    paths: &[FittedPath],
) -> Result<CrbReport, CrbError> {
    crb_from_fisher(&fisher_for_allocation(alloc, noise_power, paths)?)
}

// ─── Per-RE information scoring ─────────────────────────────────────────

/// Information value of one candidate RE.
#[derive(Clone, Copy, Debug)]
pub struct ReInformation {
    pub carrier: usize,
    pub symbol: usize,
    /// Drop of the CRB objective when this RE joins the observation set.
    pub score: f64,
}

/// One symmetric rank-1 downdate of a covariance: `(F + c u u^T)^-1`.
fn sherman_morrison(cov: &DMatrix<f64>, u: &DVector<f64>, c: f64) -> DMatrix<f64> {
    let cu = cov * u;
    let denom = 1.0 + c * u.dot(&cu);
    cov - (&cu * cu.transpose()) * (c / denom)
}

/// Scores candidate REs by how much each would lower the CRB objective
/// if added to the current observation set.
///
/// A single RE adds `F_re = 2 w (u u^T + v v^T)` with `u, v` the real and
/// imaginary parts of the model derivative vector, so the updated
/// covariance follows from two Sherman-Morrison steps per candidate; no
/// re-inversion is ever needed. Candidates are `(carrier, symbol,
/// weight)` triples, scored independently of each other.
pub fn re_information_scores(
    numerology: &Numerology,
    baseline: &CrbReport,
    paths: &[FittedPath],
    objective: &CrbObjective,
    candidates: &[(usize, usize, f64)],
) -> Result<Vec<ReInformation>, CrbError> {
    if paths.is_empty() {
        return Err(CrbError::NoPaths);
    }
    let n = 4 * paths.len();
    if baseline.covariance.nrows() != n {
        return Err(CrbError::Invalid(format!(
            "baseline covariance is {}x{} but {} paths need {n}x{n}",
            baseline.covariance.nrows(),
            baseline.covariance.ncols(),
            paths.len()
        )));
    }
    let base_objective = baseline.objective(objective);
    let scores = parallel::map_slice(candidates, |&(k, m, weight)| {
        let f = numerology.carrier_offset_hz(k);
        let t = numerology.symbol_time_s(m);
        let mut u = DVector::<f64>::zeros(n);
        let mut v = DVector::<f64>::zeros(n);
        for (p, path) in paths.iter().enumerate() {
            let block = derivatives(f, t, path);
            for (q, d) in block.iter().enumerate() {
                u[4 * p + q] = d.re;
                v[4 * p + q] = d.im;
            }
        }
        let c = 2.0 * weight;
        let updated = sherman_morrison(&sherman_morrison(&baseline.covariance, &u, c), &v, c);
        let mut new_objective = 0.0;
        for p in 0..paths.len() {
            new_objective += objective.delay_weight * updated[(4 * p, 4 * p)]
                + objective.doppler_weight * updated[(4 * p + 1, 4 * p + 1)];
        }
        ReInformation { carrier: k, symbol: m, score: base_objective - new_objective }
    });
    Ok(scores)
}

// ─── Allocation comparison ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AllocationComparison {
    /// Index into the input slice.
    pub index: usize,
    /// CRB objective; smaller is better.
    pub objective: f64,
    pub report: CrbReport,
}

/// Ranks candidate allocations by their CRB objective for a common
/// scene, best first. All candidates must spend the same total power
/// (relative tolerance 1e-9): comparing unequal budgets would reward
/// power, not allocation shape.
pub fn compare_allocations(
    candidates: &[&ResourceAllocation],
    noise_power: f64,
    paths: &[FittedPath],
    objective: &CrbObjective,
) -> Result<Vec<AllocationComparison>, CrbError> {
    let first = candidates.first().ok_or_else(|| {
        CrbError::Invalid("allocation comparison needs at least one candidate".into())
    })?;
    for (i, alloc) in candidates.iter().enumerate() {
        let rel = (alloc.total_power - first.total_power).abs() / first.total_power;
        if rel > 1e-9 {
            return Err(CrbError::UnequalPower {
                index: i,
                power: alloc.total_power,
                reference: first.total_power,
            });
        }
    }
    let mut out = Vec::with_capacity(candidates.len());
    for (index, alloc) in candidates.iter().enumerate() {
        let report = crb_for_allocation(alloc, noise_power, paths)?;
        out.push(AllocationComparison { index, objective: report.objective(objective), report });
    }
    out.sort_by(|a, b| a.objective.partial_cmp(&b.objective).expect("objectives are finite"));
    Ok(out)
}

#[derive(Debug, Error)]
pub enum CrbError {
    #[error("no paths: the bound is undefined for an empty model")]
    NoPaths,
    #[error(
        "information matrix is numerically singular (condition {condition:.3e}); \
         {} parameter direction(s) are unobservable",
        null_directions.len()
    )]
    Unidentifiable { condition: f64, null_directions: Vec<Vec<f64>> },
    #[error("allocation {index} spends power {power} but the reference spends {reference}")]
    UnequalPower { index: usize, power: f64, reference: f64 },
    #[error("invalid CRB input: {0}")]
    Invalid(String),
}

// ─── Tests ──────────────────────────────────────────────────────────────
