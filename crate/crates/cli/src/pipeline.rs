//! Single-run orchestration: scene → waveform → channel → estimation →
//! localization, per configured link, with artifact-ready results.
//!
//! Randomness policy: every stochastic stage draws from
//! `seeding::rng_for(master_seed, tag, index)` where the tag embeds the
//! stage name and the link label. Adding a link therefore never
//! reshuffles another link's noise, and results are independent of
//! thread count.

use std::time::Instant;

use isac_core::channel::{
    self, capture, ChannelSamples, PathKind,
};
use isac_core::crb::{crb_for_allocation, CrbError};
use isac_core::estimation::{
    background_subtract, detect_peaks, fit_model, scattering_function_zero_filled,
    EstimationError, FitConfig, FittedPath, ScatteringMap,
};
use isac_core::localization::{
    ellipse_points, solve_position, solve_velocity, DelayObservation, DopplerObservation,
    LocalizationError, SolverOptions,
};
use isac_core::scene::{self, Scenario, SceneError, SolveDimension, Vec3};
use isac_core::seeding::rng_for;
use isac_core::waveform::{
    generate_symbols, ResourceAllocation, WaveformError,
};
use isac_core::Complex64;

use crate::artifacts::MapArtifact;
use crate::config::{NoiseSpec, ResolvedConfig, ResolvedLink};
use crate::report::{
    CrbRow, EstimateRow, LinkReport, LocalizationReport, ObservationRow, RunReport, Timing,
    TruthRow, VelocityReport, TOOL_NAME, TOOL_VERSION,
};

/// A pipeline failure, labeled with the module that produced it and the
/// link being processed when it happened.
#[derive(Debug)]
pub enum PipelineError {
    Scene { link: String, source: SceneError },
    Waveform { link: String, source: WaveformError },
    Channel { link: String, source: channel::ChannelError },
    Estimation { link: String, source: EstimationError },
    Crb { link: String, source: CrbError },
    Localization(LocalizationError),
    Invalid(String),
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Scene { link, source } => write!(f, "[scene] link {link}: {source}"),
            PipelineError::Waveform { link, source } => {
                write!(f, "[waveform] link {link}: {source}")
            }
            PipelineError::Channel { link, source } => {
                write!(f, "[channel] link {link}: {source}")
            }
            PipelineError::Estimation { link, source } => {
                write!(f, "[estimation] link {link}: {source}")
            }
            PipelineError::Crb { link, source } => write!(f, "[crb] link {link}: {source}"),
            PipelineError::Localization(source) => write!(f, "[localization] {source}"),
            PipelineError::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for PipelineError {}

/// Everything a single run produces, before artifact writing.
pub struct RunOutcome {
    pub report: RunReport,
    /// (file stem, map) per link, when maps were requested.
    pub maps: Vec<(String, MapArtifact)>,
    /// (file stem, polyline) per link with a usable target measurement.
    pub ellipses: Vec<(String, Vec<Vec3>)>,
    /// (file stem, document text) per link, when allocation export is on.
    pub allocations: Vec<(String, String)>,
    pub timing: Timing,
}

/// One link's processed results.
struct LinkOutcome {
    report: LinkReport,
    map: Option<ScatteringMap>,
    alloc: ResourceAllocation,
    /// Strongest clearly-moving estimate: (excess delay, delay variance,
    /// Doppler, Doppler variance).
    primary: Option<(f64, f64, f64, f64)>,
}

fn label_stem(index: usize, link: &ResolvedLink) -> String {
    format!("link{index}_{}-{}", link.tx, link.rx)
}

/// Executes the full pipeline for one config.
pub fn run_single(cfg: &ResolvedConfig) -> Result<RunOutcome, PipelineError> {
    let mut timing = Timing::default();
    let scenario = cfg.scenario.to_core();
    let mut link_reports = Vec::new();
    let mut maps = Vec::new();
    let mut ellipses = Vec::new();
    let mut allocations = Vec::new();
    let mut delay_obs = Vec::new();
    let mut doppler_obs = Vec::new();

    for (i, link_cfg) in cfg.links.iter().enumerate() {
        let started = Instant::now();
        let outcome = process_link(cfg, &scenario, link_cfg)?;
        timing.record(
            format!("link {}", link_cfg.label()),
            started.elapsed().as_secs_f64(),
        );
        let stem = label_stem(i, link_cfg);
        if cfg.outputs.maps {
            if let Some(map) = &outcome.map {
                let normalization = format!(
                    "sum over the {} active resource elements, divided by their count; \
                     a unit-gain on-grid path peaks at 1",
                    outcome.alloc.mask.count_active()
                );
                maps.push((stem.clone(), MapArtifact::from_map(map, &normalization)));
            }
        }
        if cfg.outputs.allocations {
            allocations.push((stem.clone(), crate::artifacts::allocation_document(&outcome.alloc)));
        }
        if let Some((excess, var, doppler, dvar)) = outcome.primary {
            let link = link_cfg.core_link();
            if cfg.outputs.ellipses && cfg.localization.enabled {
                let points = ellipse_points(
                    &scenario,
                    &link,
                    excess,
                    cfg.localization.plane_z_m,
                    cfg.localization.ellipse_points,
                )
                .map_err(PipelineError::Localization)?;
                ellipses.push((stem.clone(), points));
            }
            delay_obs.push(DelayObservation::new(link.clone(), excess, var));
            doppler_obs.push(DopplerObservation {
                link,
                doppler_hz: doppler,
                variance_hz2: dvar,
            });
        }
        link_reports.push(outcome.report);
    }

    let localization = if cfg.localization.enabled {
        let started = Instant::now();
        let solved = solve(cfg, &scenario, &delay_obs, &doppler_obs)?;
        timing.record("localization", started.elapsed().as_secs_f64());
        solved
    } else {
        None
    };

    let report = RunReport {
        tool_name: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        seed: cfg.seed,
        timing_note: "wall-clock timings go to stderr; artifacts stay byte-deterministic".into(),
        config: cfg.clone(),
        links: link_reports,
        localization,
    };
    Ok(RunOutcome { report, maps, ellipses, allocations, timing })
}

fn process_link(
    cfg: &ResolvedConfig,
    scenario: &Scenario,
    link_cfg: &ResolvedLink,
) -> Result<LinkOutcome, PipelineError> {
    let label = link_cfg.label();
    let scene_err = |source| PipelineError::Scene { link: label.clone(), source };
    let link = link_cfg.core_link();
    let numerology = cfg.numerology.to_core();

    // Waveform.
    let alloc = link_cfg
        .build_allocation(numerology)
        .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;
    let frame = generate_symbols(&alloc, &link_cfg.core_symbol_source(cfg.seed))
        .map_err(|source| PipelineError::Waveform { link: label.clone(), source })?;

    // Channel.
    let paths = channel::propagate(scenario, &link, cfg.channel.include_los)
        .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
    let strongest_target = paths
        .paths()
        .iter()
        .filter(|p| matches!(p.kind, PathKind::Target { .. }))
        .max_by(|a, b| a.weight.norm().total_cmp(&b.weight.norm()));
    let noise_power = match cfg.channel.noise_spec {
        NoiseSpec::NoisePower { noise_power } => noise_power,
        NoiseSpec::IntegratedTargetSnrDb { snr_db } => {
            let target = strongest_target.ok_or_else(|| {
                PipelineError::Invalid(format!(
                    "channel.integrated_target_snr_db needs a target path on link {label}; \
                     the scene produced none"
                ))
            })?;
            target.weight.norm_sqr() * alloc.total_power / 10f64.powf(snr_db / 10.0)
        }
    };
    let achieved_snr_db = strongest_target.map(|t| {
        10.0 * (t.weight.norm_sqr() * alloc.total_power / noise_power).log10()
    });

    let mut rng = rng_for(cfg.seed, &format!("run-capture:{label}"), 0);
    let mut samples = capture(&frame, &paths, noise_power, cfg.channel.excision_factor, &mut rng)
        .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
    if cfg.channel.background_subtraction {
        let statics = paths.filtered(|p| !matches!(p.kind, PathKind::Target { .. }));
        let mut rng_bg = rng_for(cfg.seed, &format!("run-background:{label}"), 0);
        let reference =
            capture(&frame, &statics, noise_power, cfg.channel.excision_factor, &mut rng_bg)
                .map_err(|source| PipelineError::Channel { link: label.clone(), source })?;
        samples = background_subtract(&samples, &reference)
            .map_err(|source| PipelineError::Estimation { link: label.clone(), source })?;
    }

    // Estimation. The captured channel is referenced to the line of
    // sight, so raw estimates are excess delays; the absolute column adds
    // the link's known LOS delay back (the geometry between cooperating
    // nodes is surveyed, not estimated).
    let los_delay_s = {
        let (tx, rx) = scenario.resolve_link(&link).map_err(scene_err)?;
        tx.position_m.distance(rx.position_m) / scenario.speed_of_light_m_per_s
    };
    let (mut estimates, map) = estimate(cfg, &samples, &label)?;
    for row in &mut estimates {
        row.excess_delay_s = row.delay_s;
        row.delay_s += los_delay_s;
    }
    let mut truth = Vec::new();
    for (t, target) in scenario.targets.iter().enumerate() {
        let excess = scene::excess_delay_s(scenario, &link, target.position_m)
            .map_err(scene_err)?;
        let doppler =
            scene::bistatic_doppler_hz(scenario, &link, target).map_err(scene_err)?;
        truth.push(TruthRow { target_index: t, excess_delay_s: excess, doppler_hz: doppler });
    }

    // CRB at the operating point, for the estimated path set. The bound
    // uses the allocation's nominal (uniform) loading; gains come from
    // the estimates themselves.
    let fitted: Vec<FittedPath> = estimates
        .iter()
        .map(|row| FittedPath {
            delay_s: row.delay_s,
            doppler_hz: row.doppler_hz,
            gain: match (row.gain_re, row.gain_im) {
                (Some(re), Some(im)) => Complex64::new(re, im),
                _ => Complex64::new(row.power.unwrap_or(0.0).max(0.0).sqrt(), 0.0),
            },
        })
        .collect();
    let crb = if fitted.is_empty() {
        Vec::new()
    } else {
        match crb_for_allocation(&alloc, samples.noise_power, &fitted) {
            Ok(report) => report
                .per_path
                .iter()
                .enumerate()
                .map(|(i, p)| CrbRow {
                    path_index: i,
                    delay_std_s: p.delay_var_s2.sqrt(),
                    doppler_std_hz: p.doppler_var_hz2.sqrt(),
                })
                .collect(),
            // A rank-deficient estimate set (e.g. two near-coincident
            // peaks) has no finite bound; the report simply omits rows.
            Err(CrbError::Unidentifiable { .. }) => Vec::new(),
            Err(source) => return Err(PipelineError::Crb { link: label.clone(), source }),
        }
    };

    // Primary measurement for localization: strongest estimate that is
    // clearly off the line of sight (at least half a delay-resolution
    // cell of excess) and, when statics were not subtracted, clearly
    // moving (at least half a Doppler-resolution cell).
    let delay_res = 1.0 / alloc.numerology.bandwidth_hz();
    let doppler_res = 1.0 / alloc.numerology.frame_duration_s();
    let primary = estimates
        .iter()
        .zip(crb.iter().map(Some).chain(std::iter::repeat(None)))
        .filter(|(row, _)| {
            let off_los = row.excess_delay_s > 0.5 * delay_res;
            let moving = row.doppler_hz.abs() > 0.5 * doppler_res;
            off_los && (cfg.channel.background_subtraction || moving)
        })
        .max_by(|(a, _), (b, _)| {
            let pa = a.power.unwrap_or_else(|| gain_power(a));
            let pb = b.power.unwrap_or_else(|| gain_power(b));
            pa.total_cmp(&pb)
        })
        .map(|(row, crb_row)| {
            // Measurement variances from the bound at the operating
            // point; fall back to one resolution cell when no bound row
            // exists.
            let (dvar, avar) = match crb_row {
                Some(c) => (c.delay_std_s.powi(2), c.doppler_std_hz.powi(2)),
                None => (delay_res.powi(2), doppler_res.powi(2)),
            };
            (row.excess_delay_s, dvar.max(1e-30), row.doppler_hz, avar.max(1e-12))
        });

    let report = LinkReport {
        link: label,
        estimator: cfg.estimator.method.clone(),
        n_active_res: alloc.mask.count_active(),
        los_delay_s,
        noise_power,
        integrated_target_snr_db: achieved_snr_db,
        range_migration_warning: samples.range_migration_warning,
        truth,
        estimates,
        crb,
    };
    Ok(LinkOutcome { report, map, alloc, primary })
}

fn gain_power(row: &EstimateRow) -> f64 {
    match (row.gain_re, row.gain_im) {
        (Some(re), Some(im)) => re * re + im * im,
        _ => 0.0,
    }
}

/// Runs the configured estimator over prepared channel samples.
fn estimate(
    cfg: &ResolvedConfig,
    samples: &ChannelSamples,
    label: &str,
) -> Result<(Vec<EstimateRow>, Option<ScatteringMap>), PipelineError> {
    let est_err = |source| PipelineError::Estimation { link: label.to_string(), source };
    match cfg.estimator.method.as_str() {
        "fft" => {
            let map = scattering_function_zero_filled(samples, cfg.estimator.oversample)
                .map_err(est_err)?;
            let mut peaks = detect_peaks(
                &map,
                cfg.estimator.min_peak_excess_db,
                cfg.estimator.guard_cells,
            );
            peaks.sort_by(|a, b| b.power.total_cmp(&a.power));
            let rows = peaks
                .iter()
                .map(|p| EstimateRow {
                    delay_s: p.delay_s,
                    excess_delay_s: 0.0, // caller fills; raw axis is excess
                    doppler_hz: p.doppler_hz,
                    power: Some(p.power),
                    excess_db: Some(p.excess_db),
                    gain_re: None,
                    gain_im: None,
                })
                .collect();
            Ok((rows, Some(map)))
        }
        "fit" => {
            let config = FitConfig {
                max_paths: cfg.estimator.max_paths,
                oversample: cfg.estimator.oversample.max(2),
                max_refine_iters: cfg.estimator.max_refine_iters,
                refine_rounds: cfg.estimator.refine_rounds,
                false_alarm_rate: cfg.estimator.false_alarm_rate,
                calibration_trials: cfg.estimator.calibration_trials,
            };
            let result = fit_model(samples, &config).map_err(est_err)?;
            let rows = result
                .paths
                .iter()
                .map(|p| EstimateRow {
                    delay_s: p.delay_s,
                    excess_delay_s: 0.0, // caller fills; raw axis is excess
                    doppler_hz: p.doppler_hz,
                    power: None,
                    excess_db: None,
                    gain_re: Some(p.gain.re),
                    gain_im: Some(p.gain.im),
                })
                .collect();
            Ok((rows, None))
        }
        other => Err(PipelineError::Invalid(format!("unknown estimator method `{other}`"))),
    }
}

fn solve(
    cfg: &ResolvedConfig,
    scenario: &Scenario,
    delay_obs: &[DelayObservation],
    doppler_obs: &[DopplerObservation],
) -> Result<Option<LocalizationReport>, PipelineError> {
    let dim = match cfg.localization.mode.as_str() {
        "three_d" => SolveDimension::ThreeD,
        _ => SolveDimension::Planar { z_m: cfg.localization.plane_z_m },
    };
    if delay_obs.len() < dim.dof() {
        // Not enough usable measurements; the run still succeeds, the
        // report simply has no localization section.
        return Ok(None);
    }
    let options = match dim {
        SolveDimension::Planar { z_m } => SolverOptions::planar(z_m),
        SolveDimension::ThreeD => SolverOptions::three_d(),
    };
    let solution =
        solve_position(scenario, delay_obs, &options).map_err(PipelineError::Localization)?;
    let position_error_m = scenario
        .targets
        .first()
        .map(|t| t.position_m.distance(solution.position_m));

    let velocity = if cfg.localization.solve_velocity && doppler_obs.len() >= dim.dof() {
        let vel = solve_velocity(scenario, solution.position_m, doppler_obs, dim)
            .map_err(PipelineError::Localization)?;
        let velocity_error = scenario
            .targets
            .first()
            .map(|t| t.velocity_m_per_s.distance(vel.velocity_m_per_s));
        Some(VelocityReport {
            velocity_m_per_s: [
                vel.velocity_m_per_s.x,
                vel.velocity_m_per_s.y,
                vel.velocity_m_per_s.z,
            ],
            residual_rms_hz: vel.residual_rms_hz,
            velocity_error_m_per_s: velocity_error,
            covariance_m2_per_s2: matrix_rows(&vel.covariance_m2_per_s2),
        })
    } else {
        None
    };

    let observations = delay_obs
        .iter()
        .map(|o| {
            let doppler = doppler_obs.iter().find(|d| d.link == o.link);
            ObservationRow {
                link: format!("{}:{}", o.link.tx, o.link.rx),
                excess_delay_s: o.excess_delay_s,
                delay_variance_s2: o.variance_s2,
                doppler_hz: doppler.map(|d| d.doppler_hz),
                doppler_variance_hz2: doppler.map(|d| d.variance_hz2),
            }
        })
        .collect();

    Ok(Some(LocalizationReport {
        converged: solution.converged,
        iterations: solution.iterations,
        position_m: [solution.position_m.x, solution.position_m.y, solution.position_m.z],
        residual_rms_s: solution.residual_rms_s,
        position_error_m,
        covariance_m2: matrix_rows(&solution.covariance_m2),
        observations,
        velocity,
    }))
}

fn matrix_rows(m: &[[f64; 3]; 3]) -> Vec<Vec<f64>> {
    m.iter().map(|row| row.to_vec()).collect()
}
