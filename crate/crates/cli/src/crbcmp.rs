//! Allocation comparison by Cramer-Rao objective at equal transmit
//! power: which resource layout buys the most estimation accuracy.

use serde::Serialize;

use isac_core::channel::{self, PathKind};
use isac_core::crb::{compare_allocations, CrbObjective};
use isac_core::estimation::FittedPath;
use isac_core::waveform::{build_allocation, PowerLoading, ResourceAllocation};

use crate::artifacts::fmt_f64;
use crate::config::ResolvedConfig;
use crate::pipeline::PipelineError;
use crate::report::{Timing, TOOL_NAME, TOOL_VERSION};

pub struct CrbCompareOutcome {
    /// One row per allocation, best objective first.
    pub ranking_header: Vec<String>,
    pub ranking_rows: Vec<Vec<String>>,
    /// One row per (allocation, path).
    pub per_path_header: Vec<String>,
    pub per_path_rows: Vec<Vec<String>>,
    pub report_toml: String,
    pub timing: Timing,
}

#[derive(Serialize)]
struct CrbReportDoc<'a> {
    tool_name: &'a str,
    tool_version: &'a str,
    seed: u64,
    timing_note: &'a str,
    config: &'a ResolvedConfig,
}

pub fn run(cfg: &ResolvedConfig) -> Result<CrbCompareOutcome, PipelineError> {
    let cc = cfg.crb_compare.as_ref().ok_or_else(|| {
        PipelineError::Invalid(
            "the crb-compare verb needs a [crb_compare] section in the config".into(),
        )
    })?;
    let started = std::time::Instant::now();
    let scenario = cfg.scenario.to_core();
    let link_cfg = cfg
        .links
        .iter()
        .find(|l| l.label() == cc.link)
        .expect("validated during config resolution");
    let numerology = cfg.numerology.to_core();

    // Paths the bound is parameterized by: the link's propagated
    // geometry (line of sight included only if the channel config says
    // the receiver sees it).
    let path_set = channel::propagate(&scenario, &link_cfg.core_link(), cfg.channel.include_los)
        .map_err(|source| PipelineError::Channel { link: cc.link.clone(), source })?;
    let paths: Vec<FittedPath> = path_set
        .paths()
        .iter()
        .map(|p| FittedPath { delay_s: p.delay_s, doppler_hz: p.doppler_hz, gain: p.weight })
        .collect();
    if paths.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "crb-compare needs at least one propagation path on link {}",
            cc.link
        )));
    }

    let mut allocations: Vec<(String, ResourceAllocation)> = Vec::new();
    for named in &cc.allocations {
        let alloc = build_allocation(
            numerology,
            &named.scheme.to_core(),
            &PowerLoading::Uniform,
            named.total_power,
        )
        .map_err(|source| PipelineError::Waveform { link: cc.link.clone(), source })?;
        allocations.push((named.name.clone(), alloc));
    }
    let refs: Vec<&ResourceAllocation> = allocations.iter().map(|(_, a)| a).collect();
    let objective =
        CrbObjective { delay_weight: cc.delay_weight, doppler_weight: cc.doppler_weight };
    let ranked = compare_allocations(&refs, cc.noise_power, &paths, &objective)
        .map_err(|source| PipelineError::Crb { link: cc.link.clone(), source })?;

    let ranking_header: Vec<String> = [
        "rank",
        "name",
        "objective",
        "n_active_res",
        "total_power",
        "kind_description",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut ranking_rows = Vec::with_capacity(ranked.len());
    let per_path_header: Vec<String> =
        ["name", "path_index", "path_kind", "delay_std_s", "doppler_std_hz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let mut per_path_rows = Vec::new();
    for (rank, comparison) in ranked.iter().enumerate() {
        let (name, alloc) = &allocations[comparison.index];
        ranking_rows.push(vec![
            (rank + 1).to_string(),
            name.clone(),
            fmt_f64(comparison.objective),
            alloc.mask.count_active().to_string(),
            fmt_f64(alloc.total_power),
            cc.allocations[comparison.index].scheme.describe(),
        ]);
        for (i, per_path) in comparison.report.per_path.iter().enumerate() {
            let kind = match path_set.paths()[i].kind {
                PathKind::LineOfSight => "line_of_sight".to_string(),
                PathKind::Target { index } => format!("target{index}"),
                PathKind::Clutter { index } => format!("clutter{index}"),
            };
            per_path_rows.push(vec![
                name.clone(),
                i.to_string(),
                kind,
                fmt_f64(per_path.delay_var_s2.sqrt()),
                fmt_f64(per_path.doppler_var_hz2.sqrt()),
            ]);
        }
    }

    let report_toml = toml::to_string_pretty(&CrbReportDoc {
        tool_name: TOOL_NAME,
        tool_version: TOOL_VERSION,
        seed: cfg.seed,
        timing_note: "wall-clock timings go to stderr; artifacts stay byte-deterministic",
        config: cfg,
    })
    .expect("crb report serializes");

    let mut timing = Timing::default();
    timing.record("crb-compare", started.elapsed().as_secs_f64());
    Ok(CrbCompareOutcome {
        ranking_header,
        ranking_rows,
        per_path_header,
        per_path_rows,
        report_toml,
        timing,
    })
}
