//! Monte-Carlo sweeps: estimation RMSE vs SNR with bound overlays, and
//! multi-link detection probability vs SNR.
//!
//! Determinism: trial `t` of sweep point `i` on link `L` draws from
//! `rng_for(master_seed, "<stage>:<L>:snr<i>", t)`, so adding sweep
//! points, links, or trials never reshuffles the noise of existing ones,
//! and results are independent of thread count and scheduling.

use serde::Serialize;

use isac_core::channel::{
    capture, detection_experiment, DetectionLink, PathKind, ReflectivityModel,
};
use isac_core::crb::crb_for_allocation;
use isac_core::estimation::{
    background_subtract, detect_peaks, fit_model, scattering_function_zero_filled, FitConfig,
    FittedPath,
};
use isac_core::seeding::{derive_seed, rng_for};
use isac_core::waveform::generate_symbols;

use crate::artifacts::fmt_f64;
use crate::config::{ResolvedConfig, ResolvedMonteCarlo};
use crate::pipeline::PipelineError;
use crate::report::{Timing, TOOL_NAME, TOOL_VERSION};

/// Sweep results ready for artifact writing.
pub struct McOutcome {
    pub mode: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub report_toml: String,
    pub timing: Timing,
}

#[derive(Serialize)]
struct McReport<'a> {
    tool_name: &'a str,
    tool_version: &'a str,
    seed: u64,
    timing_note: &'a str,
    config: &'a ResolvedConfig,
}

const ABSENT: &str = "n/a";

pub fn run(cfg: &ResolvedConfig) -> Result<McOutcome, PipelineError> {
    let mc = cfg.montecarlo.as_ref().ok_or_else(|| {
        PipelineError::Invalid(
            "the montecarlo verb needs a [montecarlo] section in the config".into(),
        )
    })?;
    let started = std::time::Instant::now();
    let (header, rows) = match mc.mode.as_str() {
        "rmse" => rmse_sweep(cfg, mc)?,
        "detection" => detection_sweep(cfg, mc)?,
        other => return Err(PipelineError::Invalid(format!("unknown montecarlo mode `{other}`"))),
    };
    let mut timing = Timing::default();
    timing.record(format!("montecarlo {}", mc.mode), started.elapsed().as_secs_f64());
    let report_toml = toml::to_string_pretty(&McReport {
        tool_name: TOOL_NAME,
        tool_version: TOOL_VERSION,
        seed: cfg.seed,
        timing_note: "wall-clock timings go to stderr; artifacts stay byte-deterministic",
        config: cfg,
    })
    .expect("mc report serializes");
    Ok(McOutcome { mode: mc.mode.clone(), header, rows, report_toml, timing })
}

// ─── RMSE vs SNR ────────────────────────────────────────────────────────

fn rmse_sweep(
    cfg: &ResolvedConfig,
    mc: &ResolvedMonteCarlo,
) -> Result<(Vec<String>, Vec<Vec<String>>), PipelineError> {
    let link_cfg = cfg
        .links
        .iter()
        .find(|l| l.label() == mc.link)
        .expect("validated during config resolution");
    let label = link_cfg.label();
    let scenario = cfg.scenario.to_core();
    let link = link_cfg.core_link();
    let numerology = cfg.numerology.to_core();

    let alloc = link_cfg
        .build_allocation(numerology)
        .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;
    let frame = generate_symbols(&alloc, &link_cfg.core_symbol_source(cfg.seed))
        .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;
    let paths = isac_core::channel::propagate(&scenario, &link, cfg.channel.include_los)
        .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
    let target = paths
        .paths()
        .iter()
        .filter(|p| matches!(p.kind, PathKind::Target { .. }))
        .max_by(|a, b| a.weight.norm().total_cmp(&b.weight.norm()))
        .copied()
        .ok_or_else(|| {
            PipelineError::Invalid(format!(
                "montecarlo rmse mode needs a target path on link {label}"
            ))
        })?;

    let delay_res = 1.0 / numerology.bandwidth_hz();
    let doppler_res = 1.0 / numerology.frame_duration_s();

    let mut header = vec![
        "snr_db".to_string(),
        "trials".to_string(),
        "detected".to_string(),
        "noise_power".to_string(),
        "delay_rmse_s".to_string(),
        "delay_bias_s".to_string(),
        "delay_std_s".to_string(),
    ];
    for q in &mc.quantiles {
        header.push(format!("delay_q{}_s", fmt_f64(*q)));
    }
    header.extend([
        "doppler_rmse_hz".to_string(),
        "doppler_bias_hz".to_string(),
        "doppler_std_hz".to_string(),
    ]);
    for q in &mc.quantiles {
        header.push(format!("doppler_q{}_hz", fmt_f64(*q)));
    }
    header.extend(["crb_delay_std_s".to_string(), "crb_doppler_std_hz".to_string()]);

    let mut rows = Vec::with_capacity(mc.snr_db.len());
    for (i, &snr_db) in mc.snr_db.iter().enumerate() {
        let noise_power =
            target.weight.norm_sqr() * alloc.total_power / 10f64.powf(snr_db / 10.0);
        let mut delay_err = Vec::with_capacity(mc.trials);
        let mut doppler_err = Vec::with_capacity(mc.trials);
        for trial in 0..mc.trials {
            let mut rng =
                rng_for(cfg.seed, &format!("mc-rmse:{label}:snr{i}"), trial as u64);
            let mut samples =
                capture(&frame, &paths, noise_power, cfg.channel.excision_factor, &mut rng)
                    .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
            if cfg.channel.background_subtraction {
                let statics = paths.filtered(|p| !matches!(p.kind, PathKind::Target { .. }));
                let mut rng_bg =
                    rng_for(cfg.seed, &format!("mc-rmse-bg:{label}:snr{i}"), trial as u64);
                let reference = capture(
                    &frame,
                    &statics,
                    noise_power,
                    cfg.channel.excision_factor,
                    &mut rng_bg,
                )
                .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
                samples = background_subtract(&samples, &reference)
                    .map_err(|source| PipelineError::Estimation { link: label.clone(), source })?;
            }
            let estimate = match cfg.estimator.method.as_str() {
                "fft" => {
                    let map = scattering_function_zero_filled(&samples, cfg.estimator.oversample)
                        .map_err(|source| PipelineError::Estimation {
                            link: label.clone(),
                            source,
                        })?;
                    let peaks = detect_peaks(
                        &map,
                        cfg.estimator.min_peak_excess_db,
                        cfg.estimator.guard_cells,
                    );
                    nearest(
                        peaks.iter().map(|p| (p.delay_s, p.doppler_hz)),
                        &target,
                        delay_res,
                        doppler_res,
                    )
                }
                _ => {
                    let fit_cfg = FitConfig {
                        max_paths: cfg.estimator.max_paths,
                        oversample: cfg.estimator.oversample.max(2),
                        max_refine_iters: cfg.estimator.max_refine_iters,
                        refine_rounds: cfg.estimator.refine_rounds,
                        false_alarm_rate: cfg.estimator.false_alarm_rate,
                        calibration_trials: cfg.estimator.calibration_trials,
                    };
                    let result = fit_model(&samples, &fit_cfg).map_err(|source| {
                        PipelineError::Estimation { link: label.clone(), source }
                    })?;
                    nearest(
                        result.paths.iter().map(|p| (p.delay_s, p.doppler_hz)),
                        &target,
                        delay_res,
                        doppler_res,
                    )
                }
            };
            if let Some((dt, da)) = estimate {
                delay_err.push(dt);
                doppler_err.push(da);
            }
        }

        let noise_eff =
            if cfg.channel.background_subtraction { 2.0 * noise_power } else { noise_power };
        let crb = crb_for_allocation(
            &alloc,
            noise_eff,
            &[FittedPath {
                delay_s: target.delay_s,
                doppler_hz: target.doppler_hz,
                gain: target.weight,
            }],
        )
        .map_err(|source| PipelineError::Crb { link: label.clone(), source })?;

        let mut row = vec![
            fmt_f64(snr_db),
            mc.trials.to_string(),
            delay_err.len().to_string(),
            fmt_f64(noise_power),
        ];
        row.extend(stat_cells(&delay_err, &mc.quantiles));
        row.extend(stat_cells(&doppler_err, &mc.quantiles));
        row.push(fmt_f64(crb.per_path[0].delay_var_s2.sqrt()));
        row.push(fmt_f64(crb.per_path[0].doppler_var_hz2.sqrt()));
        rows.push(row);
    }
    Ok((header, rows))
}

/// Error of the candidate nearest to the truth in resolution-scaled
/// distance, or `None` when nothing lands within 1.5 cells on both axes.
fn nearest(
    candidates: impl Iterator<Item = (f64, f64)>,
    target: &isac_core::channel::PathComponent,
    delay_res: f64,
    doppler_res: f64,
) -> Option<(f64, f64)> {
    candidates
        .map(|(delay, doppler)| (delay - target.delay_s, doppler - target.doppler_hz))
        .filter(|(dt, da)| dt.abs() <= 1.5 * delay_res && da.abs() <= 1.5 * doppler_res)
        .min_by(|a, b| {
            let na = (a.0 / delay_res).powi(2) + (a.1 / doppler_res).powi(2);
            let nb = (b.0 / delay_res).powi(2) + (b.1 / doppler_res).powi(2);
            na.total_cmp(&nb)
        })
}

/// rmse, bias, std (sample, absent for fewer than 2 values), quantiles
/// (absent when empty).
fn stat_cells(errors: &[f64], quantiles: &[f64]) -> Vec<String> {
    let n = errors.len();
    let mut cells = Vec::with_capacity(3 + quantiles.len());
    if n == 0 {
        cells.extend(std::iter::repeat(ABSENT.to_string()).take(3 + quantiles.len()));
        return cells;
    }
    let mean = errors.iter().sum::<f64>() / n as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    cells.push(fmt_f64(rmse));
    cells.push(fmt_f64(mean));
    if n >= 2 {
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        cells.push(fmt_f64(var.sqrt()));
    } else {
        cells.push(ABSENT.to_string());
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for &q in quantiles {
        cells.push(fmt_f64(quantile(&sorted, q)));
    }
    cells
}

/// Linear-interpolation quantile of pre-sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

// ─── Detection probability vs SNR ───────────────────────────────────────

fn detection_sweep(
    cfg: &ResolvedConfig,
    mc: &ResolvedMonteCarlo,
) -> Result<(Vec<String>, Vec<Vec<String>>), PipelineError> {
    let scenario = cfg.scenario.to_core();
    let numerology = cfg.numerology.to_core();
    let model = match mc.reflectivity.as_str() {
        "deterministic" => ReflectivityModel::Deterministic,
        "rician" => ReflectivityModel::RicianPower { k_factor: mc.rician_k_factor },
        _ => ReflectivityModel::RayleighPower,
    };

    // Build each link's frame and path set once; noise varies per point.
    let mut per_link = Vec::new();
    for link_cfg in &cfg.links {
        let label = link_cfg.label();
        let alloc = link_cfg
            .build_allocation(numerology)
            .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;
        let frame = generate_symbols(&alloc, &link_cfg.core_symbol_source(cfg.seed))
            .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;
        let paths = isac_core::channel::propagate(
            &scenario,
            &link_cfg.core_link(),
            cfg.channel.include_los,
        )
        .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
        let target_power = paths
            .paths()
            .iter()
            .filter(|p| matches!(p.kind, PathKind::Target { .. }))
            .map(|p| p.weight.norm_sqr())
            .fold(f64::NEG_INFINITY, f64::max);
        if !target_power.is_finite() {
            return Err(PipelineError::Invalid(format!(
                "montecarlo detection mode needs a target path on link {label}"
            )));
        }
        per_link.push((label, alloc.total_power * target_power, frame, paths));
    }

    let mut header = vec!["snr_db".to_string(), "trials".to_string(), "pfa_target".to_string()];
    for (label, ..) in &per_link {
        header.push(format!("pd_{label}"));
        header.push(format!("pfa_measured_{label}"));
        header.push(format!("theory_pd_{label}"));
        header.push(format!("mean_snr_db_{label}"));
    }
    header.push("pd_fused".to_string());
    header.push("pfa_fused".to_string());

    let mut rows = Vec::with_capacity(mc.snr_db.len());
    for (i, &snr_db) in mc.snr_db.iter().enumerate() {
        let snr = 10f64.powf(snr_db / 10.0);
        let links: Vec<DetectionLink<'_>> = per_link
            .iter()
            .map(|(_, integrated_power, frame, paths)| DetectionLink {
                frame,
                path_set: paths,
                noise_power: integrated_power / snr,
            })
            .collect();
        let summary = detection_experiment(
            &scenario,
            &links,
            model,
            mc.pfa,
            mc.trials,
            derive_seed(cfg.seed, "mc-detection-point", i as u64),
        )
        .map_err(|source| PipelineError::Channel { link: "fused".into(), source })?;

        let mut row = vec![fmt_f64(snr_db), mc.trials.to_string(), fmt_f64(mc.pfa)];
        for l in 0..per_link.len() {
            row.push(fmt_f64(summary.pd_per_link[l]));
            row.push(fmt_f64(summary.pfa_per_link[l]));
            row.push(fmt_f64(summary.theory_pd_per_link[l]));
            row.push(fmt_f64(10.0 * summary.mean_snr_per_link[l].log10()));
        }
        row.push(fmt_f64(summary.pd_fused));
        row.push(fmt_f64(summary.pfa_fused));
        rows.push(row);
    }
    Ok((header, rows))
}
