//! Spherical-Earth geometry, affine geotransforms, and georeferenced rasters.
//!
//! All geographic math assumes a spherical Earth of radius
//! [`EARTH_RADIUS_KM`]. Angles are degrees at the API boundary and radians
//! internally. Raster pixels are addressed `(row, col)` with row 0 at the
//! top; continuous pixel coordinates place `(0.0, 0.0)` at the outer corner
//! of the top-left pixel, so pixel centers sit at half-integer coordinates.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for all great-circle math.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("geotransform is singular and cannot be inverted")]
    SingularGeotransform,
    #[error("raster has no channel named {0:?}")]
    MissingChannel(String),
    #[error("channel {name:?} is {got_rows}x{got_cols}, raster is {rows}x{cols}")]
    ChannelShape {
        name: String,
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("channel {0:?} already present in raster")]
    DuplicateChannel(String),
}

/// Great-circle distance in km between two (lat, lon) points, degrees in.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Initial bearing in degrees from point 1 toward point 2, in `[0, 360)`.
/// Measured clockwise from true north.
pub fn initial_bearing_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dl = (lon2 - lon1).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Six-term affine geotransform mapping continuous pixel coordinates to
/// geographic coordinates:
///
/// ```text
/// lon = c[0] + col * c[1] + row * c[2]
/// lat = c[3] + col * c[4] + row * c[5]
/// ```
///
/// `(col, row)` are continuous with `(0, 0)` at the top-left pixel corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    /// Axis-aligned ("north-up") transform from the top-left corner and the
    /// per-pixel steps in degrees. `dlat` is normally negative (rows go
    /// south).
    pub fn north_up(lon0: f64, lat0: f64, dlon: f64, dlat: f64) -> Self {
        GeoTransform([lon0, dlon, 0.0, lat0, 0.0, dlat])
    }

    /// Map continuous pixel coordinates to (lon, lat).
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let c = &self.0;
        (c[0] + col * c[1] + row * c[2], c[3] + col * c[4] + row * c[5])
    }

    /// (lat, lon) of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (lon, lat) = self.apply(col as f64 + 0.5, row as f64 + 0.5);
        (lat, lon)
    }

    /// Invert to continuous pixel coordinates `(col, row)`.
    pub fn invert(&self, lon: f64, lat: f64) -> Result<(f64, f64), GeoError> {
        let c = &self.0;
        let det = c[1] * c[5] - c[2] * c[4];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(GeoError::SingularGeotransform);
        }
        let (dx, dy) = (lon - c[0], lat - c[3]);
        Ok(((c[5] * dx - c[2] * dy) / det, (c[1] * dy - c[4] * dx) / det))
    }

    /// Fractional pixel-center index `(row_idx, col_idx)` of a geographic
    /// point: integer values fall exactly on pixel centers, which makes the
    /// result directly usable as a bilinear interpolation coordinate.
    pub fn fractional_index(&self, lat: f64, lon: f64) -> Result<(f64, f64), GeoError> {
        let (col, row) = self.invert(lon, lat)?;
        Ok((row - 0.5, col - 0.5))
    }
}

/// Georeferenced raster: named float32 channels over one grid, with a
/// timestamp, a nominal resolution, and free-form string metadata.
#[derive(Debug, Clone)]
pub struct GeoRaster {
    rows: usize,
    cols: usize,
    pub resolution_m: f64,
    pub transform: GeoTransform,
    pub timestamp: DateTime<Utc>,
    channels: Vec<(String, Array2<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

impl GeoRaster {
    pub fn new(
        rows: usize,
        cols: usize,
        resolution_m: f64,
        transform: GeoTransform,
        timestamp: DateTime<Utc>,
    ) -> Self {
        GeoRaster {
            rows,
            cols,
            resolution_m,
            transform,
            timestamp,
            channels: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Channel names in storage order.
    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn channels(&self) -> &[(String, Array2<f32>)] {
        &self.channels
    }

    pub fn add_channel(&mut self, name: &str, data: Array2<f32>) -> Result<(), GeoError> {
        if self.channels.iter().any(|(n, _)| n == name) {
            return Err(GeoError::DuplicateChannel(name.to_string()));
        }
        if data.nrows() != self.rows || data.ncols() != self.cols {
            return Err(GeoError::ChannelShape {
                name: name.to_string(),
                got_rows: data.nrows(),
                got_cols: data.ncols(),
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.channels.push((name.to_string(), data));
        Ok(())
    }

    /// Replace an existing channel or add it if absent.
    pub fn set_channel(&mut self, name: &str, data: Array2<f32>) -> Result<(), GeoError> {
        if let Some(slot) = self.channels.iter_mut().find(|(n, _)| n == name) {
            if data.nrows() != self.rows || data.ncols() != self.cols {
                return Err(GeoError::ChannelShape {
                    name: name.to_string(),
                    got_rows: data.nrows(),
                    got_cols: data.ncols(),
                    rows: self.rows,
                    cols: self.cols,
                });
            }
            slot.1 = data;
            Ok(())
        } else {
            self.add_channel(name, data)
        }
    }

    pub fn channel(&self, name: &str) -> Result<&Array2<f32>, GeoError> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| GeoError::MissingChannel(name.to_string()))
    }

    /// (lat, lon) of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.transform.pixel_center(row, col)
    }

    /// Ground-radar station position stored in metadata, if any.
    pub fn station(&self) -> Option<(f64, f64)> {
        let lat = self.metadata.get("station_lat")?.parse().ok()?;
        let lon = self.metadata.get("station_lon")?.parse().ok()?;
        Some((lat, lon))
    }

    pub fn set_station(&mut self, lat: f64, lon: f64, id: &str) {
        self.metadata.insert("station_lat".into(), format!("{lat:.10}"));
        self.metadata.insert("station_lon".into(), format!("{lon:.10}"));
        self.metadata.insert("station_id".into(), id.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_zero_for_identical_points() {
        assert_eq!(haversine_km(31.2, -80.4, 31.2, -80.4), 0.0);
    }

    #[test]
    fn haversine_one_degree_latitude() {
        // One degree of latitude = R * pi / 180 regardless of longitude.
        let d = haversine_km(10.0, 25.0, 11.0, 25.0);
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((d - expected).abs() < 1e-9, "d={d}, expected {expected}");
    }

    #[test]
    fn bearing_cardinal_directions() {
        // From the equator: due north, east, south, west.
        assert!((initial_bearing_deg(0.0, 0.0, 1.0, 0.0) - 0.0).abs() < 1e-9);
        assert!((initial_bearing_deg(0.0, 0.0, 0.0, 1.0) - 90.0).abs() < 1e-9);
        assert!((initial_bearing_deg(0.0, 0.0, -1.0, 0.0) - 180.0).abs() < 1e-9);
        assert!((initial_bearing_deg(0.0, 0.0, 0.0, -1.0) - 270.0).abs() < 1e-9);
    }

    #[test]
    fn geotransform_roundtrip() {
        let gt = GeoTransform([-80.0, 0.01, 0.002, 32.0, -0.001, -0.008]);
        let (lon, lat) = gt.apply(12.25, 40.75);
        let (col, row) = gt.invert(lon, lat).unwrap();
        assert!((col - 12.25).abs() < 1e-9);
        assert!((row - 40.75).abs() < 1e-9);
    }

    #[test]
    fn singular_geotransform_rejected() {
        let gt = GeoTransform([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            gt.invert(1.0, 1.0),
            Err(GeoError::SingularGeotransform)
        ));
    }

    #[test]
    fn fractional_index_hits_pixel_centers() {
        let gt = GeoTransform::north_up(-80.0, 32.0, 0.01, -0.01);
        let (lat, lon) = gt.pixel_center(3, 7);
        let (ri, ci) = gt.fractional_index(lat, lon).unwrap();
        assert!((ri - 3.0).abs() < 1e-9);
        assert!((ci - 7.0).abs() < 1e-9);
    }

    #[test]
    fn raster_channel_bookkeeping() {
        let gt = GeoTransform::north_up(-80.0, 32.0, 0.01, -0.01);
        let mut r = GeoRaster::new(4, 5, 1000.0, gt, Utc::now());
        r.add_channel("rain", Array2::zeros((4, 5))).unwrap();
        assert!(r.channel("rain").is_ok());
        assert!(matches!(
            r.channel("wind"),
            Err(GeoError::MissingChannel(_))
        ));
        assert!(matches!(
            r.add_channel("rain", Array2::zeros((4, 5))),
            Err(GeoError::DuplicateChannel(_))
        ));
        assert!(matches!(
            r.add_channel("bad", Array2::zeros((3, 5))),
            Err(GeoError::ChannelShape { .. })
        ));
    }

    #[test]
    fn station_metadata_roundtrip() {
        let gt = GeoTransform::north_up(-80.0, 32.0, 0.01, -0.01);
        let mut r = GeoRaster::new(2, 2, 1000.0, gt, Utc::now());
        assert!(r.station().is_none());
        r.set_station(31.5, -80.25, "KTEST");
        let (lat, lon) = r.station().unwrap();
        assert_eq!((lat, lon), (31.5, -80.25));
    }
}
