//! Coverage rasters: Cassini excess attenuation and GDOP over a planar
//! grid of candidate target positions.

use isac_core::scene::{cassini_raster, gdop_raster, RasterGrid, SolveDimension};

use crate::artifacts::PlanarSidecar;
use crate::config::ResolvedConfig;
use crate::pipeline::PipelineError;
use crate::report::Timing;

/// One raster ready for artifact writing.
pub struct Raster {
    pub stem: String,
    pub sidecar: PlanarSidecar,
    pub values: Vec<f64>,
}

pub struct CoverageOutcome {
    pub rasters: Vec<Raster>,
    pub timing: Timing,
}

pub fn run(cfg: &ResolvedConfig) -> Result<CoverageOutcome, PipelineError> {
    let cov = cfg.coverage.as_ref().ok_or_else(|| {
        PipelineError::Invalid(
            "the coverage-map verb needs a [coverage] section in the config".into(),
        )
    })?;
    let scenario = cfg.scenario.to_core();
    let grid = RasterGrid {
        x_start_m: cov.x_start_m,
        x_step_m: cov.x_step_m,
        nx: cov.nx,
        y_start_m: cov.y_start_m,
        y_step_m: cov.y_step_m,
        ny: cov.ny,
        plane_z_m: cov.plane_z_m,
    };
    let sidecar = |quantity: &str| PlanarSidecar {
        nx: cov.nx,
        ny: cov.ny,
        x_start_m: cov.x_start_m,
        x_step_m: cov.x_step_m,
        y_start_m: cov.y_start_m,
        y_step_m: cov.y_step_m,
        plane_z_m: cov.plane_z_m,
        quantity: quantity.to_string(),
    };

    let mut timing = Timing::default();
    let mut rasters = Vec::new();
    for kind in &cov.kinds {
        let started = std::time::Instant::now();
        match kind.as_str() {
            "cassini" => {
                let link_cfg = cfg
                    .links
                    .iter()
                    .find(|l| l.label() == cov.link)
                    .expect("validated during config resolution");
                let raster = cassini_raster(&scenario, &link_cfg.core_link(), &grid)
                    .map_err(|source| PipelineError::Scene {
                        link: cov.link.clone(),
                        source,
                    })?;
                rasters.push(Raster {
                    stem: "coverage_cassini".into(),
                    sidecar: sidecar("cassini_excess_attenuation_db"),
                    values: raster.values,
                });
            }
            "gdop" => {
                let links: Vec<_> = cfg.links.iter().map(|l| l.core_link()).collect();
                let raster = gdop_raster(
                    &scenario,
                    &links,
                    &grid,
                    SolveDimension::Planar { z_m: cov.plane_z_m },
                )
                .map_err(|source| PipelineError::Scene { link: "all".into(), source })?;
                rasters.push(Raster {
                    stem: "coverage_gdop".into(),
                    sidecar: sidecar("gdop_dimensionless"),
                    values: raster.values,
                });
            }
            other => {
                return Err(PipelineError::Invalid(format!("unknown coverage kind `{other}`")))
            }
        }
        timing.record(format!("coverage {kind}"), started.elapsed().as_secs_f64());
    }
    Ok(CoverageOutcome { rasters, timing })
}
