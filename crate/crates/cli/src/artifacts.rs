//! Artifact emission: delimited tables, binary maps with sidecars,
//! ellipse polylines, allocation documents, and rendered heatmaps.
//!
//! Everything written here is a pure function of the run's results, so a
//! fixed (config, seed) pair produces byte-identical files regardless of
//! thread count. Floats in text artifacts use Rust's shortest
//! round-trip formatting; binary payloads are little-endian `f64` rows.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use isac_core::estimation::ScatteringMap;
use isac_core::scene::Vec3;
use isac_core::waveform::{Numerology, ReMask, ResourceAllocation};

#[derive(Debug)]
pub struct ArtifactError(pub String);

impl std::fmt::Display for ArtifactError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "artifact error: {}", self.0)
    }
}

impl std::error::Error for ArtifactError {}

fn io_err(context: &str, e: std::io::Error) -> ArtifactError {
    ArtifactError(format!("{context}: {e}"))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

// ─── 1. Delimited tables ────────────────────────────────────────────────

/// Writes a comma-separated table. Headers carry units in their names
/// (`delay_s`, `doppler_hz`); cells are preformatted strings so the
/// caller controls the absent-value marker.
pub fn write_table(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), ArtifactError> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

// ─── 2. Delay-Doppler map artifacts ─────────────────────────────────────

/// A delay-Doppler surface as stored on disk: a flat binary payload of
/// row-major (delay-major) 64-bit little-endian reals, described by a
/// structured-text sidecar. Axes are affine; `axis[i] = start + i * step`
/// reconstructs them from the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSidecar {
    pub n_delay: usize,
    pub n_doppler: usize,
    pub delay_axis_start_s: f64,
    pub delay_axis_step_s: f64,
    pub doppler_axis_start_hz: f64,
    pub doppler_axis_step_hz: f64,
    /// What the stored power is normalized by (free-text description).
    pub normalization: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapArtifact {
    pub sidecar: MapSidecar,
    /// Power, `power[d * n_doppler + u]`.
    pub power: Vec<f64>,
}

impl MapArtifact {
    pub fn from_map(map: &ScatteringMap, normalization: &str) -> Self {
        let nd = map.n_delay();
        let nu = map.n_doppler();
        let delay_step = if nd > 1 { map.delay_axis_s[1] - map.delay_axis_s[0] } else { 0.0 };
        let doppler_step =
            if nu > 1 { map.doppler_axis_hz[1] - map.doppler_axis_hz[0] } else { 0.0 };
        MapArtifact {
            sidecar: MapSidecar {
                n_delay: nd,
                n_doppler: nu,
                delay_axis_start_s: map.delay_axis_s.first().copied().unwrap_or(0.0),
                delay_axis_step_s: delay_step,
                doppler_axis_start_hz: map.doppler_axis_hz.first().copied().unwrap_or(0.0),
                doppler_axis_step_hz: doppler_step,
                normalization: normalization.to_string(),
            },
            power: map.power.clone(),
        }
    }

    #[allow(dead_code)]
    pub fn delay_axis(&self) -> Vec<f64> {
        (0..self.sidecar.n_delay)
            .map(|i| self.sidecar.delay_axis_start_s + i as f64 * self.sidecar.delay_axis_step_s)
            .collect()
    }

    #[allow(dead_code)]
    pub fn doppler_axis(&self) -> Vec<f64> {
        (0..self.sidecar.n_doppler)
            .map(|i| {
                self.sidecar.doppler_axis_start_hz + i as f64 * self.sidecar.doppler_axis_step_hz
            })
            .collect()
    }
}

/// Writes `<stem>.bin` (payload) and `<stem>.toml` (sidecar).
pub fn write_map(
    dir: &Path,
    stem: &str,
    artifact: &MapArtifact,
) -> Result<(PathBuf, PathBuf), ArtifactError> {
    let expected = artifact.sidecar.n_delay * artifact.sidecar.n_doppler;
    if artifact.power.len() != expected {
        return Err(ArtifactError(format!(
            "map payload has {} values, sidecar says {} x {}",
            artifact.power.len(),
            artifact.sidecar.n_delay,
            artifact.sidecar.n_doppler
        )));
    }
    let bin_path = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(artifact.power.len() * 8);
    for &v in &artifact.power {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes)
        .map_err(|e| io_err(&format!("writing {}", bin_path.display()), e))?;
    let sidecar_path = dir.join(format!("{stem}.toml"));
    let text = toml::to_string_pretty(&artifact.sidecar)
        .map_err(|e| ArtifactError(format!("serializing sidecar: {e}")))?;
    fs::write(&sidecar_path, text)
        .map_err(|e| io_err(&format!("writing {}", sidecar_path.display()), e))?;
    Ok((bin_path, sidecar_path))
}

/// Loads a map artifact written by [`write_map`]; bit-exact round trip.
#[allow(dead_code)]
pub fn load_map(dir: &Path, stem: &str) -> Result<MapArtifact, ArtifactError> {
    let sidecar_path = dir.join(format!("{stem}.toml"));
    let text = fs::read_to_string(&sidecar_path)
        .map_err(|e| io_err(&format!("reading {}", sidecar_path.display()), e))?;
    let sidecar: MapSidecar = toml::from_str(&text)
        .map_err(|e| ArtifactError(format!("parsing {}: {e}", sidecar_path.display())))?;
    let bin_path = dir.join(format!("{stem}.bin"));
    let bytes =
        fs::read(&bin_path).map_err(|e| io_err(&format!("reading {}", bin_path.display()), e))?;
    let expected = sidecar.n_delay * sidecar.n_doppler * 8;
    if bytes.len() != expected {
        return Err(ArtifactError(format!(
            "{} holds {} bytes, sidecar implies {expected}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let power = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(MapArtifact { sidecar, power })
}

// ─── 3. Planar raster artifacts (coverage maps) ─────────────────────────

/// Planar scalar field over an x/y grid: same binary layout as the
/// delay-Doppler maps (rows are constant-y scans), different sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarSidecar {
    pub nx: usize,
    pub ny: usize,
    pub x_start_m: f64,
    pub x_step_m: f64,
    pub y_start_m: f64,
    pub y_step_m: f64,
    pub plane_z_m: f64,
    /// What the stored value measures, e.g. "cassini_excess_attenuation_db".
    pub quantity: String,
}

pub fn write_planar(
    dir: &Path,
    stem: &str,
    sidecar: &PlanarSidecar,
    values: &[f64],
) -> Result<(PathBuf, PathBuf), ArtifactError> {
    if values.len() != sidecar.nx * sidecar.ny {
        return Err(ArtifactError(format!(
            "raster payload has {} values, sidecar says {} x {}",
            values.len(),
            sidecar.nx,
            sidecar.ny
        )));
    }
    let bin_path = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes)
        .map_err(|e| io_err(&format!("writing {}", bin_path.display()), e))?;
    let text = toml::to_string_pretty(sidecar)
        .map_err(|e| ArtifactError(format!("serializing sidecar: {e}")))?;
    let sidecar_path = dir.join(format!("{stem}.toml"));
    fs::write(&sidecar_path, text)
        .map_err(|e| io_err(&format!("writing {}", sidecar_path.display()), e))?;
    Ok((bin_path, sidecar_path))
}

// ─── 4. Ellipse polylines ───────────────────────────────────────────────

/// Writes a closed polyline as `x_m,y_m` columns; the first point is
/// repeated as the last row to close the curve.
pub fn write_ellipse(path: &Path, points: &[Vec3]) -> Result<(), ArtifactError> {
    if points.is_empty() {
        return Err(ArtifactError("an ellipse polyline needs points".into()));
    }
    let mut text = String::from("x_m,y_m\n");
    for p in points.iter().chain(std::iter::once(&points[0])) {
        let _ = writeln!(text, "{},{}", fmt_f64(p.x), fmt_f64(p.y));
    }
    fs::write(path, text).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

// ─── 5. Allocation documents ────────────────────────────────────────────
//
// Structured-text import/export of a resource allocation. Schema:
//
// ```toml
// [numerology]
// n_carriers = 64
// carrier_spacing_hz = 312500.0
// n_symbols = 32
// symbol_duration_s = 0.0002
// center_frequency_hz = 5200000000.0
//
// [allocation]
// total_power = 2048.0
// # Run-length encodings over the row-major (carrier-major) RE grid:
// # whitespace-separated "<count>x<value>" tokens.
// mask_rle = "512x1 1024x0 512x1"
// power_rle = "512x2 1024x0 512x2"
// ```

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocationDoc {
    numerology: NumerologyDoc,
    allocation: AllocationBody,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NumerologyDoc {
    n_carriers: usize,
    carrier_spacing_hz: f64,
    n_symbols: usize,
    symbol_duration_s: f64,
    center_frequency_hz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocationBody {
    total_power: f64,
    mask_rle: String,
    power_rle: String,
}

fn rle_encode<T: PartialEq + Copy>(items: &[T], fmt: impl Fn(T) -> String) -> String {
    let mut out = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let mut j = i + 1;
        while j < items.len() && items[j] == items[i] {
            j += 1;
        }
        out.push(format!("{}x{}", j - i, fmt(items[i])));
        i = j;
    }
    out.join(" ")
}

fn rle_decode<T>(
    text: &str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<T>, ArtifactError>
where
    T: Copy,
{
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        let (count, value) = token
            .split_once('x')
            .ok_or_else(|| ArtifactError(format!("malformed RLE token `{token}`")))?;
        let count: usize = count
            .parse()
            .map_err(|_| ArtifactError(format!("bad RLE count in `{token}`")))?;
        let value = parse(value).map_err(|e| ArtifactError(format!("bad RLE value: {e}")))?;
        out.extend(std::iter::repeat(value).take(count));
    }
    Ok(out)
}

/// Serializes an allocation to the structured-text document.
pub fn allocation_document(alloc: &ResourceAllocation) -> String {
    let num = &alloc.numerology;
    let n_res = num.n_res();
    let mask_bits: Vec<u8> = (0..n_res)
        .map(|i| {
            let (k, m) = (i / num.n_symbols, i % num.n_symbols);
            u8::from(alloc.mask.is_active(k, m))
        })
        .collect();
    let doc = AllocationDoc {
        numerology: NumerologyDoc {
            n_carriers: num.n_carriers,
            carrier_spacing_hz: num.carrier_spacing_hz,
            n_symbols: num.n_symbols,
            symbol_duration_s: num.symbol_duration_s,
            center_frequency_hz: num.center_frequency_hz,
        },
        allocation: AllocationBody {
            total_power: alloc.total_power,
            mask_rle: rle_encode(&mask_bits, |b| b.to_string()),
            power_rle: rle_encode(&alloc.power, fmt_f64),
        },
    };
    toml::to_string_pretty(&doc).expect("allocation document serializes")
}

/// Parses a document produced by [`allocation_document`].
pub fn parse_allocation_document(text: &str) -> Result<ResourceAllocation, ArtifactError> {
    let doc: AllocationDoc =
        toml::from_str(text).map_err(|e| ArtifactError(format!("parsing allocation: {e}")))?;
    let numerology = Numerology {
        n_carriers: doc.numerology.n_carriers,
        n_symbols: doc.numerology.n_symbols,
        carrier_spacing_hz: doc.numerology.carrier_spacing_hz,
        symbol_duration_s: doc.numerology.symbol_duration_s,
        center_frequency_hz: doc.numerology.center_frequency_hz,
    };
    numerology
        .validate()
        .map_err(|e| ArtifactError(format!("allocation numerology: {e}")))?;
    let n_res = numerology.n_res();
    let mask_bits = rle_decode(&doc.allocation.mask_rle, |v| match v {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        other => Err(format!("mask values must be 0 or 1, got `{other}`")),
    })?;
    if mask_bits.len() != n_res {
        return Err(ArtifactError(format!(
            "mask_rle expands to {} cells, grid has {n_res}",
            mask_bits.len()
        )));
    }
    let power = rle_decode(&doc.allocation.power_rle, |v| {
        v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"))
    })?;
    if power.len() != n_res {
        return Err(ArtifactError(format!(
            "power_rle expands to {} cells, grid has {n_res}",
            power.len()
        )));
    }
    let active: Vec<bool> = mask_bits.iter().map(|&bit| bit == 1).collect();
    let mask = ReMask::new(numerology.n_carriers, numerology.n_symbols, active)
        .map_err(|e| ArtifactError(format!("rebuilding mask: {e}")))?;
    let alloc = ResourceAllocation {
        numerology,
        mask,
        power,
        owners: vec![None; n_res],
        total_power: doc.allocation.total_power,
    };
    Ok(alloc)
}

// ─── 6. Rendered heatmaps ───────────────────────────────────────────────

/// Viridis-like perceptual ramp, interpolated between fixed anchors.
fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 9] = [
        [0.267, 0.005, 0.329],
        [0.275, 0.194, 0.496],
        [0.213, 0.359, 0.552],
        [0.153, 0.497, 0.557],
        [0.122, 0.632, 0.531],
        [0.290, 0.759, 0.428],
        [0.622, 0.854, 0.226],
        [0.889, 0.893, 0.147],
        [0.993, 0.906, 0.144],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let frac = t - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = ANCHORS[i][c] + frac * (ANCHORS[i + 1][c] - ANCHORS[i][c]);
        rgb[c] = (v * 255.0).round() as u8;
    }
    rgb
}

/// Renders a row-major scalar field to a PNG heatmap.
///
/// With `db_floor = Some(range)` the field is treated as power and drawn
/// in dB relative to its maximum over a `range`-dB window; otherwise it
/// is scaled linearly between its finite min and max. Rows are drawn
/// bottom-up so ascending row index points up in the image.
pub fn save_heatmap(
    path: &Path,
    values: &[f64],
    n_rows: usize,
    n_cols: usize,
    db_floor: Option<f64>,
) -> Result<(), ArtifactError> {
    if values.len() != n_rows * n_cols || n_rows == 0 || n_cols == 0 {
        return Err(ArtifactError(format!(
            "heatmap payload has {} values for {n_rows} x {n_cols}",
            values.len()
        )));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(ArtifactError("heatmap has no finite values".into()));
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalize: Box<dyn Fn(f64) -> f64> = match db_floor {
        Some(range_db) => {
            let peak = hi.max(f64::MIN_POSITIVE);
            Box::new(move |v: f64| {
                if !(v.is_finite() && v > 0.0) {
                    return 0.0;
                }
                let db = 10.0 * (v / peak).log10();
                (db + range_db) / range_db
            })
        }
        None => {
            let span = if hi > lo { hi - lo } else { 1.0 };
            Box::new(move |v: f64| if v.is_finite() { (v - lo) / span } else { 0.0 })
        }
    };
    let img = image::RgbImage::from_fn(n_cols as u32, n_rows as u32, |x, y| {
        // Flip vertically: image row 0 is the top.
        let row = n_rows - 1 - y as usize;
        let v = values[row * n_cols + x as usize];
        image::Rgb(colormap(normalize(v)))
    });
    img.save(path)
        .map_err(|e| ArtifactError(format!("writing {}: {e}", path.display())))
}

// ─── 7. Output directory helper ─────────────────────────────────────────

/// Creates (if needed) and returns the run's output directory.
pub fn prepare_out_dir(out: &Path) -> Result<PathBuf, ArtifactError> {
    fs::create_dir_all(out)
        .map_err(|e| io_err(&format!("creating output directory {}", out.display()), e))?;
    Ok(out.to_path_buf())
}

/// Writes a text artifact.
pub fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    let mut file = fs::File::create(path)
        .map_err(|e| io_err(&format!("creating {}", path.display()), e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

// ─── 8. Tests ───────────────────────────────────────────────────────────
