//! Run reports: the structured record of what an experiment produced.
//!
//! The report file embeds the fully resolved config (every default made
//! explicit), the tool version, and all numeric results, so each number
//! is traceable to (config, seed). Wall-clock timings are deliberately
//! kept out of the artifact files and printed to stderr instead: the
//! artifact set must be byte-identical for a fixed (config, seed), and
//! timestamps would break that contract.

use serde::Serialize;

use crate::config::ResolvedConfig;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub tool_name: String,
    pub tool_version: String,
    pub seed: u64,
    /// Where wall-clock timings went (never into artifacts).
    pub timing_note: String,
    pub config: ResolvedConfig,
    pub links: Vec<LinkReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationReport>,
}

#[derive(Debug, Serialize)]
pub struct LinkReport {
    pub link: String,
    pub estimator: String,
    pub n_active_res: usize,
    pub los_delay_s: f64,
    pub noise_power: f64,
    /// Coherent post-integration SNR of the strongest target path, dB;
    /// absent when the scene has no target visible on this link.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integrated_target_snr_db: Option<f64>,
    pub range_migration_warning: bool,
    pub truth: Vec<TruthRow>,
    pub estimates: Vec<EstimateRow>,
    pub crb: Vec<CrbRow>,
}

/// Ground-truth observables of one scene target on this link, computed
/// from the configured geometry.
#[derive(Debug, Serialize)]
pub struct TruthRow {
    pub target_index: usize,
    pub excess_delay_s: f64,
    pub doppler_hz: f64,
}

/// One estimated path or peak.
#[derive(Debug, Serialize)]
pub struct EstimateRow {
    /// Absolute delay of the estimate, seconds.
    pub delay_s: f64,
    /// Delay excess over the link's line of sight, seconds.
    pub excess_delay_s: f64,
    pub doppler_hz: f64,
    /// Peak power (map estimator only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    /// Peak power over the noise floor, dB (map estimator only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess_db: Option<f64>,
    /// Complex gain (model fit estimator only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_re: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_im: Option<f64>,
}

/// Cramer-Rao standard deviations for one estimated path at the link's
/// operating noise level.
#[derive(Debug, Serialize)]
pub struct CrbRow {
    pub path_index: usize,
    pub delay_std_s: f64,
    pub doppler_std_hz: f64,
}

#[derive(Debug, Serialize)]
pub struct LocalizationReport {
    pub converged: bool,
    pub iterations: usize,
    pub position_m: [f64; 3],
    pub residual_rms_s: f64,
    /// Distance to the first configured target, when one exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_error_m: Option<f64>,
    pub covariance_m2: Vec<Vec<f64>>,
    pub observations: Vec<ObservationRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity: Option<VelocityReport>,
}

#[derive(Debug, Serialize)]
pub struct VelocityReport {
    pub velocity_m_per_s: [f64; 3],
    pub residual_rms_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_error_m_per_s: Option<f64>,
    pub covariance_m2_per_s2: Vec<Vec<f64>>,
}

/// One localization input, as handed to the solver.
#[derive(Debug, Serialize)]
pub struct ObservationRow {
    pub link: String,
    pub excess_delay_s: f64,
    pub delay_variance_s2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doppler_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doppler_variance_hz2: Option<f64>,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }
}

/// Wall-clock stage timings, reported on stderr only.
#[derive(Debug, Default)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
}

impl Timing {
    pub fn record(&mut self, stage: impl Into<String>, seconds: f64) {
        self.stages.push((stage.into(), seconds));
    }

    pub fn eprint(&self) {
        for (stage, seconds) in &self.stages {
            eprintln!("timing: {stage}: {:.3} s", seconds);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_serializes_to_toml() {
        let config = crate::config::resolve(
            toml::from_str(
                r#"
[scenario]
[[scenario.nodes]]
id = "tx"
position_m = [0.0, 0.0, 0.0]
[[scenario.nodes]]
id = "rx"
position_m = [50.0, 0.0, 0.0]

[numerology]
n_carriers = 16
carrier_spacing_hz = 312.5e3
n_symbols = 8
symbol_duration_s = 200e-6
center_frequency_hz = 5.2e9

[[links]]
tx = "tx"
rx = "rx"

[channel]
noise_power = 1e-6
"#,
            )
            .unwrap(),
            Some(3),
            std::path::Path::new("."),
        )
        .unwrap();
        let report = RunReport {
            tool_name: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            seed: 3,
            timing_note: "stderr".into(),
            config,
            links: vec![LinkReport {
                link: "tx:rx".into(),
                estimator: "fft".into(),
                n_active_res: 128,
                los_delay_s: 50.0 / 299_792_458.0,
                noise_power: 1e-6,
                integrated_target_snr_db: Some(30.0),
                range_migration_warning: false,
                truth: vec![TruthRow { target_index: 0, excess_delay_s: 1e-7, doppler_hz: 40.0 }],
                estimates: vec![EstimateRow {
                    delay_s: 2.6e-7,
                    excess_delay_s: 1e-7,
                    doppler_hz: 41.0,
                    power: Some(0.5),
                    excess_db: Some(25.0),
                    gain_re: None,
                    gain_im: None,
                }],
                crb: vec![CrbRow { path_index: 0, delay_std_s: 1e-9, doppler_std_hz: 0.5 }],
            }],
            localization: None,
        };
        let text = report.to_toml();
        assert!(text.contains("tool_version"));
        assert!(text.contains("[config.numerology]"), "{text}");
        assert!(text.contains("[[links]]") || text.contains("[[links."), "{text}");
        // Re-parses as generic TOML.
        let _: toml::Value = toml::from_str(&text).unwrap();
    }
}
