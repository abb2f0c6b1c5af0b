//! Ground-radar ingestion and collocation with SAR rasters.
//!
//! Covers the three geometry problems between a weather radar and a SAR
//! acquisition: picking the scan nearest in time, resampling a polar sweep
//! (azimuth × range gates) onto the SAR pixel grid, and resampling a
//! rectilinear composite product onto the same grid. All interpolation is
//! bilinear over point samples at gate/pixel centers; anything touching a
//! missing gate stays missing rather than being invented.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{
    f32s_to_le, le_to_f32s, read_container, write_container, ContainerError, ContainerKind,
};
use crate::geo::{haversine_km, initial_bearing_deg, GeoError, GeoRaster};

/// Sentinel marking a gate or projected pixel with no valid measurement.
/// Any negative value in input rates is treated as missing; outputs use
/// exactly this value.
pub const MISSING_RATE: f32 = -1.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(
        "no scan within {window_s} s of {sar_time} (nearest is {nearest_dt_s:.1} s away)"
    )]
    NoScanInWindow {
        sar_time: DateTime<Utc>,
        nearest_dt_s: f64,
        window_s: f64,
    },
    #[error("no scans supplied")]
    EmptyScanList,
    #[error("scan geometry invalid: {0}")]
    BadScan(String),
    #[error(transparent)]
    Geometry(#[from] GeoError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// One ground-radar sweep on a polar grid centred on the station.
///
/// Rates are stored azimuth-major: `rates[[a, r]]` is the gate at azimuth
/// bin `a` (bin centre at `(a + 0.5) * az_step_deg` clockwise from north)
/// and range gate `r` (gate centre at `(r + 0.5) * range_step_m` from the
/// station). Negative rates mark missing gates.
#[derive(Debug, Clone)]
pub struct PolarScan {
    pub station_lat: f64,
    pub station_lon: f64,
    pub station_id: String,
    pub elevation_deg: f64,
    pub timestamp: DateTime<Utc>,
    pub az_step_deg: f64,
    pub range_step_m: f64,
    pub rates: Array2<f32>,
}

impl PolarScan {
    /// Validates the polar geometry: the azimuth bins must tile the full
    /// circle and both steps must be positive.
    pub fn new(
        station_lat: f64,
        station_lon: f64,
        station_id: &str,
        elevation_deg: f64,
        timestamp: DateTime<Utc>,
        az_step_deg: f64,
        range_step_m: f64,
        rates: Array2<f32>,
    ) -> Result<Self, IngestError> {
        let n_az = rates.nrows();
        if n_az == 0 || rates.ncols() == 0 {
            return Err(IngestError::BadScan("empty gate array".into()));
        }
        if !(az_step_deg > 0.0) || !(range_step_m > 0.0) {
            return Err(IngestError::BadScan(format!(
                "steps must be positive (azimuth {az_step_deg}°, range {range_step_m} m)"
            )));
        }
        if (az_step_deg * n_az as f64 - 360.0).abs() > 1e-9 {
            return Err(IngestError::BadScan(format!(
                "{n_az} bins of {az_step_deg}° do not tile 360°"
            )));
        }
        Ok(PolarScan {
            station_lat,
            station_lon,
            station_id: station_id.to_string(),
            elevation_deg,
            timestamp,
            az_step_deg,
            range_step_m,
            rates,
        })
    }

    pub fn azimuth_bins(&self) -> usize {
        self.rates.nrows()
    }

    pub fn range_gates(&self) -> usize {
        self.rates.ncols()
    }

    /// Maximum range covered by the scan, km (outer edge of the last gate).
    pub fn max_range_km(&self) -> f64 {
        self.range_gates() as f64 * self.range_step_m / 1000.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolarMeta {
    station_lat: f64,
    station_lon: f64,
    station_id: String,
    elevation_deg: f64,
    timestamp: DateTime<Utc>,
    azimuth_bins: usize,
    range_gates: usize,
    az_step_deg: f64,
    range_step_m: f64,
}

/// Write a scan to the shared binary container format (header + JSON
/// metadata + little-endian f32 gates, azimuth-major).
pub fn save_polar_scan(path: &Path, scan: &PolarScan) -> Result<(), IngestError> {
    let meta = PolarMeta {
        station_lat: scan.station_lat,
        station_lon: scan.station_lon,
        station_id: scan.station_id.clone(),
        elevation_deg: scan.elevation_deg,
        timestamp: scan.timestamp,
        azimuth_bins: scan.azimuth_bins(),
        range_gates: scan.range_gates(),
        az_step_deg: scan.az_step_deg,
        range_step_m: scan.range_step_m,
    };
    let gates: Vec<f32> = scan.rates.iter().copied().collect();
    let meta_value = serde_json::to_value(&meta).map_err(|source| ContainerError::Meta {
        path: path.display().to_string(),
        source,
    })?;
    write_container(path, ContainerKind::PolarScan, &meta_value, &f32s_to_le(&gates))?;
    Ok(())
}

pub fn load_polar_scan(path: &Path) -> Result<PolarScan, IngestError> {
    let p = path.display().to_string();
    let raw = read_container(path)?;
    if raw.kind != ContainerKind::PolarScan {
        return Err(ContainerError::WrongKind {
            path: p,
            found: raw.kind,
            expected: ContainerKind::PolarScan,
        }
        .into());
    }
    let meta: PolarMeta =
        serde_json::from_value(raw.meta).map_err(|source| ContainerError::Meta {
            path: p.clone(),
            source,
        })?;
    let gates = le_to_f32s(&raw.payload).ok_or(ContainerError::Truncated {
        path: p,
        what: "gate payload not a whole number of f32s",
    })?;
    if gates.len() != meta.azimuth_bins * meta.range_gates {
        return Err(IngestError::BadScan(format!(
            "payload holds {} gates, metadata says {}×{}",
            gates.len(),
            meta.azimuth_bins,
            meta.range_gates
        )));
    }
    let rates = Array2::from_shape_vec((meta.azimuth_bins, meta.range_gates), gates)
        .expect("length checked above");
    PolarScan::new(
        meta.station_lat,
        meta.station_lon,
        &meta.station_id,
        meta.elevation_deg,
        meta.timestamp,
        meta.az_step_deg,
        meta.range_step_m,
        rates,
    )
}

/// Pick the scan nearest in time to `sar_time`. Ties break toward the
/// earlier scan; if even the nearest scan is more than `window_s` seconds
/// away the match fails.
pub fn temporal_match<'a>(
    sar_time: DateTime<Utc>,
    scans: &'a [PolarScan],
    window_s: f64,
) -> Result<&'a PolarScan, IngestError> {
    if scans.is_empty() {
        return Err(IngestError::EmptyScanList);
    }
    let mut best: Option<(f64, &PolarScan)> = None;
    for scan in scans {
        let dt = (scan.timestamp - sar_time).num_milliseconds().abs() as f64 / 1000.0;
        // Strict less-than keeps the first (earliest, since callers pass
        // time-sorted scans) of any tied pair.
        if best.map_or(true, |(b, _)| dt < b) {
            best = Some((dt, scan));
        }
    }
    let (nearest_dt_s, scan) = best.expect("non-empty checked above");
    if nearest_dt_s > window_s {
        return Err(IngestError::NoScanInWindow {
            sar_time,
            nearest_dt_s,
            window_s,
        });
    }
    Ok(scan)
}

/// Fractional gate coordinate along range for a physical distance, plus the
/// two gate indices and interpolation weight, or None when the distance is
/// beyond the sampled extent (more than half a gate past the last centre).
fn range_gates_for(distance_m: f64, step_m: f64, n_gates: usize) -> Option<(usize, usize, f64)> {
    let ri = distance_m / step_m - 0.5;
    let last = n_gates as f64 - 1.0;
    if ri < 0.0 {
        // Inside the first gate's sample extent: nearest-gate.
        Some((0, 0, 0.0))
    } else if ri <= last {
        let r0 = (ri.floor() as usize).min(n_gates - 1);
        let r1 = (r0 + 1).min(n_gates - 1);
        Some((r0, r1, ri - r0 as f64))
    } else if ri <= last + 0.5 {
        // Within the last gate's sample extent: clamp.
        Some((n_gates - 1, n_gates - 1, 0.0))
    } else {
        None
    }
}

/// Resample a polar sweep onto the target raster's pixel grid.
///
/// Each pixel centre is converted to (bearing, great-circle range) from the
/// station on a spherical Earth, then bilinearly interpolated between the
/// four surrounding gate centres, wrapping in azimuth across the 360°→0°
/// seam. Pixels beyond the scan's range extent, and pixels whose
/// interpolation touches a missing gate, come back as [`MISSING_RATE`].
/// Beam elevation is stored but does not alter the range mapping.
pub fn project_polar(scan: &PolarScan, target: &GeoRaster) -> Result<Array2<f32>, IngestError> {
    // Surface singular geotransforms before the pixel loop.
    target.transform.invert(0.0, 0.0)?;
    let n_az = scan.azimuth_bins() as isize;
    let mut out = Array2::from_elem((target.rows(), target.cols()), MISSING_RATE);
    for row in 0..target.rows() {
        for col in 0..target.cols() {
            let (lat, lon) = target.pixel_center(row, col);
            let range_m = haversine_km(scan.station_lat, scan.station_lon, lat, lon) * 1000.0;
            let Some((r0, r1, fr)) =
                range_gates_for(range_m, scan.range_step_m, scan.range_gates())
            else {
                continue;
            };
            let bearing = initial_bearing_deg(scan.station_lat, scan.station_lon, lat, lon);
            let ai = bearing / scan.az_step_deg - 0.5;
            let a0 = ai.floor();
            let fa = ai - a0;
            let a0 = (a0 as isize).rem_euclid(n_az) as usize;
            let a1 = (a0 + 1) % n_az as usize;

            let g00 = scan.rates[[a0, r0]];
            let g01 = scan.rates[[a0, r1]];
            let g10 = scan.rates[[a1, r0]];
            let g11 = scan.rates[[a1, r1]];
            if g00 < 0.0 || g01 < 0.0 || g10 < 0.0 || g11 < 0.0 {
                continue;
            }
            let (g00, g01, g10, g11) = (g00 as f64, g01 as f64, g10 as f64, g11 as f64);
            let v = (1.0 - fa) * ((1.0 - fr) * g00 + fr * g01)
                + fa * ((1.0 - fr) * g10 + fr * g11);
            // Pin the convex-combination bound exactly despite rounding.
            let lo = g00.min(g01).min(g10).min(g11);
            let hi = g00.max(g01).max(g10).max(g11);
            out[[row, col]] = v.clamp(lo, hi) as f32;
        }
    }
    Ok(out)
}

/// True where the pixel centre lies within `max_km` great-circle kilometres
/// of the station. Monotone in `max_km` by construction.
pub fn range_mask(target: &GeoRaster, station_lat: f64, station_lon: f64, max_km: f64) -> Array2<bool> {
    let mut out = Array2::from_elem((target.rows(), target.cols()), false);
    for row in 0..target.rows() {
        for col in 0..target.cols() {
            let (lat, lon) = target.pixel_center(row, col);
            out[[row, col]] = haversine_km(station_lat, station_lon, lat, lon) <= max_km;
        }
    }
    out
}

/// A provider-grid precipitation composite: a rectilinear raster whose
/// `rain` channel holds rates in mm/h with negative values marking missing
/// cells.
#[derive(Debug, Clone)]
pub struct CompositeScan {
    pub grid: GeoRaster,
}

impl CompositeScan {
    pub const RAIN_CHANNEL: &'static str = "rain";

    pub fn new(grid: GeoRaster) -> Result<Self, IngestError> {
        grid.channel(Self::RAIN_CHANNEL)?;
        Ok(CompositeScan { grid })
    }

    pub fn rain(&self) -> &Array2<f32> {
        self.grid
            .channel(Self::RAIN_CHANNEL)
            .expect("checked at construction")
    }
}

/// Resample a rectilinear composite onto the target raster's pixel grid.
///
/// Each target pixel centre is mapped through the source geotransform to a
/// fractional (row, col); values are bilinear between the four surrounding
/// source pixel centres. Points outside the source centre lattice, and
/// interpolations touching a missing cell, come back as [`MISSING_RATE`].
pub fn project_composite(
    scan: &CompositeScan,
    target: &GeoRaster,
) -> Result<Array2<f32>, IngestError> {
    let rain = scan.rain();
    let (src_rows, src_cols) = (rain.nrows(), rain.ncols());
    let mut out = Array2::from_elem((target.rows(), target.cols()), MISSING_RATE);
    for row in 0..target.rows() {
        for col in 0..target.cols() {
            let (lat, lon) = target.pixel_center(row, col);
            let (ri, ci) = scan.grid.transform.fractional_index(lat, lon)?;
            if ri < 0.0 || ci < 0.0 || ri > src_rows as f64 - 1.0 || ci > src_cols as f64 - 1.0 {
                continue;
            }
            let r0 = (ri.floor() as usize).min(src_rows.saturating_sub(2));
            let c0 = (ci.floor() as usize).min(src_cols.saturating_sub(2));
            let r1 = (r0 + 1).min(src_rows - 1);
            let c1 = (c0 + 1).min(src_cols - 1);
            let (fr, fc) = (ri - r0 as f64, ci - c0 as f64);

            let g00 = rain[[r0, c0]];
            let g01 = rain[[r0, c1]];
            let g10 = rain[[r1, c0]];
            let g11 = rain[[r1, c1]];
            if g00 < 0.0 || g01 < 0.0 || g10 < 0.0 || g11 < 0.0 {
                continue;
            }
            let (g00, g01, g10, g11) = (g00 as f64, g01 as f64, g10 as f64, g11 as f64);
            let v = (1.0 - fr) * ((1.0 - fc) * g00 + fc * g01)
                + fr * ((1.0 - fc) * g10 + fc * g11);
            let lo = g00.min(g01).min(g10).min(g11);
            let hi = g00.max(g01).max(g10).max(g11);
            out[[row, col]] = v.clamp(lo, hi) as f32;
        }
    }
    Ok(out)
}

/// Convenience map shared by CLI and tests: counts of projected pixels by
/// disposition, for skip-log reporting.
pub fn coverage_summary(projected: &Array2<f32>) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    let missing = projected.iter().filter(|v| **v < 0.0).count();
    m.insert("missing", missing);
    m.insert("valid", projected.len() - missing);
    m
}
