//! Command line front end for the multistatic sensing simulator.
//!
//! Verbs:
//!   run              full single-shot pipeline, reports and artifacts
//!   montecarlo       RMSE or detection sweeps over SNR
//!   crb-compare      rank resource allocations by bound-derived objective
//!   coverage-map     Cassini / GDOP rasters over a planar grid
//!   validate-config  parse, validate and echo the fully resolved config
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 configuration error.

mod artifacts;
mod config;
mod coverage;
mod crbcmp;
mod montecarlo;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::artifacts::{
    prepare_out_dir, save_heatmap, write_ellipse, write_map, write_planar, write_table, write_text,
};
use crate::config::ResolvedConfig;
use crate::report::Timing;

#[derive(Parser)]
#[command(name = "isac", version, about = "Multistatic OFDM sensing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the single-shot pipeline: channel capture, estimation, localization.
    Run(CommonArgs),
    /// Monte Carlo sweeps: estimation RMSE or detection probability vs SNR.
    Montecarlo(CommonArgs),
    /// Compare candidate resource allocations by estimation-bound objective.
    CrbCompare(CommonArgs),
    /// Rasterize Cassini attenuation and geometric dilution over a plane.
    CoverageMap(CommonArgs),
    /// Validate a config file and echo the fully resolved form to stdout.
    ValidateConfig {
        /// Path to the TOML experiment configuration.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the seed field in the config when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 keeps the runtime default.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Artifact format for map-like outputs.
    #[arg(long, value_enum, default_value_t = Format::Bin)]
    format: Format,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Tabular text only; binary map payloads are skipped.
    Csv,
    /// Flat little-endian f64 payload plus TOML sidecar.
    Bin,
    /// Binary payload plus sidecar plus rendered PNG heatmap.
    Png,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => dispatch(args, do_run),
        Command::Montecarlo(args) => dispatch(args, do_montecarlo),
        Command::CrbCompare(args) => dispatch(args, do_crb_compare),
        Command::CoverageMap(args) => dispatch(args, do_coverage),
        Command::ValidateConfig { config } => match config::load(&config, None) {
            Ok(resolved) => {
                println!("{}", config::echo_toml(&resolved));
                ExitCode::SUCCESS
            }
            Err(err) => {
                eprintln!("error: {err}");
                ExitCode::from(2)
            }
        },
    }
}

fn dispatch(
    args: CommonArgs,
    body: fn(&ResolvedConfig, &CommonArgs) -> Result<Vec<PathBuf>, String>,
) -> ExitCode {
    if let Err(err) = isac_core::parallel::configure_threads(args.threads) {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    let cfg = match config::load(&args.config, args.seed) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    if let Err(err) = prepare_out_dir(&args.out) {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    match body(&cfg, &args) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn do_run(cfg: &ResolvedConfig, args: &CommonArgs) -> Result<Vec<PathBuf>, String> {
    let outcome = pipeline::run_single(cfg).map_err(|e| e.to_string())?;
    let mut written = Vec::new();

    let report_path = join(&args.out, "report.toml");
    write_text(&report_path, &outcome.report.to_toml()).map_err(|e| e.to_string())?;
    written.push(report_path);

    // Flat per-link estimate and bound tables for quick inspection.
    let mut est_rows = Vec::new();
    let mut crb_rows = Vec::new();
    for link in &outcome.report.links {
        for row in &link.estimates {
            est_rows.push(vec![
                link.link.clone(),
                artifacts::fmt_f64(row.delay_s),
                artifacts::fmt_f64(row.excess_delay_s),
                artifacts::fmt_f64(row.doppler_hz),
                row.power.map(artifacts::fmt_f64).unwrap_or_default(),
                row.excess_db.map(artifacts::fmt_f64).unwrap_or_default(),
                row.gain_re.map(artifacts::fmt_f64).unwrap_or_default(),
                row.gain_im.map(artifacts::fmt_f64).unwrap_or_default(),
            ]);
        }
        for row in &link.crb {
            crb_rows.push(vec![
                link.link.clone(),
                row.path_index.to_string(),
                artifacts::fmt_f64(row.delay_std_s),
                artifacts::fmt_f64(row.doppler_std_hz),
            ]);
        }
    }
    let est_path = join(&args.out, "estimates.csv");
    write_table(
        &est_path,
        &[
            "link",
            "delay_s",
            "excess_delay_s",
            "doppler_hz",
            "power",
            "excess_db",
            "gain_re",
            "gain_im",
        ],
        &est_rows,
    )
    .map_err(|e| e.to_string())?;
    written.push(est_path);

    let crb_path = join(&args.out, "crb.csv");
    write_table(
        &crb_path,
        &["link", "path_index", "delay_std_s", "doppler_std_hz"],
        &crb_rows,
    )
    .map_err(|e| e.to_string())?;
    written.push(crb_path);

    if args.format != Format::Csv {
        for (stem, map) in &outcome.maps {
            let (bin, sidecar) = write_map(&args.out, stem, map).map_err(|e| e.to_string())?;
            written.push(bin);
            written.push(sidecar);
            if args.format == Format::Png {
                let png = join(&args.out, &format!("{stem}.png"));
                save_heatmap(
                    &png,
                    &map.power,
                    map.sidecar.n_delay,
                    map.sidecar.n_doppler,
                    Some(60.0),
                )
                .map_err(|e| e.to_string())?;
                written.push(png);
            }
        }
    }

    for (stem, points) in &outcome.ellipses {
        let path = join(&args.out, &format!("ellipse_{stem}.csv"));
        write_ellipse(&path, points).map_err(|e| e.to_string())?;
        written.push(path);
    }

    for (stem, doc) in &outcome.allocations {
        let path = join(&args.out, &format!("allocation_{stem}.toml"));
        write_text(&path, doc).map_err(|e| e.to_string())?;
        written.push(path);
    }

    outcome.timing.eprint();
    Ok(written)
}

fn do_montecarlo(cfg: &ResolvedConfig, args: &CommonArgs) -> Result<Vec<PathBuf>, String> {
    let outcome = montecarlo::run(cfg).map_err(|e| e.to_string())?;
    let mut written = Vec::new();

    let table_path = join(&args.out, &format!("montecarlo_{}.csv", outcome.mode));
    let header: Vec<&str> = outcome.header.iter().map(String::as_str).collect();
    write_table(&table_path, &header, &outcome.rows).map_err(|e| e.to_string())?;
    written.push(table_path);

    let report_path = join(&args.out, "mc_report.toml");
    write_text(&report_path, &outcome.report_toml).map_err(|e| e.to_string())?;
    written.push(report_path);

    outcome.timing.eprint();
    Ok(written)
}

fn do_crb_compare(cfg: &ResolvedConfig, args: &CommonArgs) -> Result<Vec<PathBuf>, String> {
    let outcome = crbcmp::run(cfg).map_err(|e| e.to_string())?;
    let mut written = Vec::new();

    let ranking_path = join(&args.out, "crb_ranking.csv");
    let header: Vec<&str> = outcome.ranking_header.iter().map(String::as_str).collect();
    write_table(&ranking_path, &header, &outcome.ranking_rows).map_err(|e| e.to_string())?;
    written.push(ranking_path);

    let per_path_path = join(&args.out, "crb_per_path.csv");
    let header: Vec<&str> = outcome.per_path_header.iter().map(String::as_str).collect();
    write_table(&per_path_path, &header, &outcome.per_path_rows).map_err(|e| e.to_string())?;
    written.push(per_path_path);

    let report_path = join(&args.out, "crb_report.toml");
    write_text(&report_path, &outcome.report_toml).map_err(|e| e.to_string())?;
    written.push(report_path);

    outcome.timing.eprint();
    Ok(written)
}

fn do_coverage(cfg: &ResolvedConfig, args: &CommonArgs) -> Result<Vec<PathBuf>, String> {
    let outcome = coverage::run(cfg).map_err(|e| e.to_string())?;
    let mut written = Vec::new();

    for raster in &outcome.rasters {
        match args.format {
            Format::Csv => {
                let path = join(&args.out, &format!("{}.csv", raster.stem));
                let sc = &raster.sidecar;
                let mut rows = Vec::with_capacity(raster.values.len());
                for iy in 0..sc.ny {
                    for ix in 0..sc.nx {
                        let x = sc.x_start_m + ix as f64 * sc.x_step_m;
                        let y = sc.y_start_m + iy as f64 * sc.y_step_m;
                        rows.push(vec![
                            artifacts::fmt_f64(x),
                            artifacts::fmt_f64(y),
                            artifacts::fmt_f64(raster.values[iy * sc.nx + ix]),
                        ]);
                    }
                }
                write_table(&path, &["x_m", "y_m", "value"], &rows).map_err(|e| e.to_string())?;
                written.push(path);
            }
            Format::Bin | Format::Png => {
                let (bin, sidecar) =
                    write_planar(&args.out, &raster.stem, &raster.sidecar, &raster.values)
                        .map_err(|e| e.to_string())?;
                written.push(bin);
                written.push(sidecar);
                if args.format == Format::Png {
                    let png = join(&args.out, &format!("{}.png", raster.stem));
                    save_heatmap(&png, &raster.values, raster.sidecar.ny, raster.sidecar.nx, None)
                        .map_err(|e| e.to_string())?;
                    written.push(png);
                }
            }
        }
    }

    outcome.timing.eprint();
    Ok(written)
}

// Timing lives on stderr only so stdout and artifacts stay byte-deterministic.
#[allow(dead_code)]
fn timing_sink(_t: &Timing) {}
