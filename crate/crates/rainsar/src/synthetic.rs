//! Procedural scene generator: ground-truth-known SAR/rain pairs with the
//! physical couplings the estimator relies on — rain-roughened backscatter,
//! wind dominance with VV saturation, a noise-floor-dominated VH channel —
//! plus a controllable collocation misalignment between signal and label.
//!
//! Scenes are pure functions of their parameters: every random draw comes
//! from one seeded generator in a fixed order, so a fixed seed reproduces a
//! scene byte for byte.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    cap_rainless, channels, extract_patches, partition, DatasetConfig, DatasetError,
    DatasetManifest, PatchStore, Subset, WindHistogram, IW_ID_KEY,
};
use crate::geo::{GeoRaster, GeoTransform};

/// Kilometres per degree of latitude (spherical Earth).
const KM_PER_DEG: f64 = 111.194_926_644_558_41;
/// Wind speeds are clamped to this floor so backscatter stays defined.
const WIND_FLOOR_MS: f64 = 0.2;
/// Rain rate at which the rain→backscatter coupling reaches ~76% of its
/// saturation value.
const RAIN_COUPLING_SCALE_MMH: f64 = 2.5;
/// VH noise-floor pedestal: keeps the channel alive at low wind.
const VH_PEDESTAL: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Everything that determines a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub seed: u64,
    pub size_px: usize,
    pub resolution_m: f64,
    /// Top-left corner of the scene (north-up grid).
    pub origin_lat_deg: f64,
    pub origin_lon_deg: f64,
    /// Inclusive range of rain-cell counts.
    pub cell_count: (usize, usize),
    /// Peak rain rate per cell, mm/h.
    pub cell_amplitude_mmh: (f64, f64),
    /// Gaussian radius per cell, km.
    pub cell_radius_km: (f64, f64),
    /// Uniform range the scene's base wind speed is drawn from, m/s.
    pub wind_base_ms: (f64, f64),
    /// Maximum wind change across the scene, m/s.
    pub wind_gradient_ms: f64,
    /// Strength of the rain signature in each polarization.
    pub coupling_vv: f64,
    pub coupling_vh: f64,
    /// Wind speed where the VV rain signature has lost half its strength.
    pub vv_saturation_ms: f64,
    /// Noise-floor analog written to the NESZ channel, dB.
    pub noise_db: f64,
    /// Multiplicative speckle amplitude: each SSR pixel is scaled by
    /// (1 + U(−a, a)).
    pub noise_amplitude: f64,
    /// Range the label-misalignment vector components are drawn from, km.
    pub jitter_km: (f64, f64),
    /// Probability that the scene contains a land blob.
    pub land_probability: f64,
    /// Land-blob radius as a fraction of the scene size.
    pub land_radius_frac: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            seed: 0,
            size_px: 192,
            resolution_m: 781.25,
            origin_lat_deg: 30.0,
            origin_lon_deg: -80.0,
            cell_count: (1, 4),
            cell_amplitude_mmh: (4.0, 40.0),
            cell_radius_km: (2.0, 8.0),
            wind_base_ms: (0.5, 17.5),
            wind_gradient_ms: 3.0,
            coupling_vv: 0.8,
            coupling_vh: 1.5,
            vv_saturation_ms: 12.0,
            noise_db: -28.0,
            noise_amplitude: 0.03,
            jitter_km: (-2.0, 2.0),
            land_probability: 0.25,
            land_radius_frac: (0.125, 0.25),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ordered = |(lo, hi): (f64, f64), what: &str| -> Result<(), SynthError> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(SynthError::BadParams(format!(
                    "{what} range ({lo}, {hi}) must be finite and ordered"
                )));
            }
            Ok(())
        };
        if self.size_px < 2 {
            return Err(SynthError::BadParams("scene must be at least 2 px".into()));
        }
        if self.resolution_m <= 0.0 {
            return Err(SynthError::BadParams("resolution must be positive".into()));
        }
        if self.cell_count.0 > self.cell_count.1 {
            return Err(SynthError::BadParams("cell count range is reversed".into()));
        }
        ordered(self.cell_amplitude_mmh, "cell amplitude")?;
        ordered(self.cell_radius_km, "cell radius")?;
        ordered(self.wind_base_ms, "wind base")?;
        ordered(self.jitter_km, "jitter")?;
        ordered(self.land_radius_frac, "land radius")?;
        if self.cell_amplitude_mmh.0 < 0.0 {
            return Err(SynthError::BadParams("cell amplitudes must be ≥ 0".into()));
        }
        if self.cell_radius_km.0 <= 0.0 {
            return Err(SynthError::BadParams("cell radius must be positive".into()));
        }
        if self.wind_base_ms.0 < 0.0 {
            return Err(SynthError::BadParams("wind must be ≥ 0".into()));
        }
        if self.jitter_km.0 < -5.0 || self.jitter_km.1 > 5.0 {
            return Err(SynthError::BadParams(
                "misalignment jitter must stay within ±5 km".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.noise_amplitude) {
            return Err(SynthError::BadParams(
                "noise amplitude must be in [0, 0.5)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.land_probability) {
            return Err(SynthError::BadParams(
                "land probability must be in [0, 1]".into(),
            ));
        }
        if self.coupling_vv < 0.0 || self.coupling_vh < 0.0 || self.vv_saturation_ms <= 0.0 {
            return Err(SynthError::BadParams(
                "couplings must be ≥ 0 with positive VV saturation speed".into(),
            ));
        }
        Ok(())
    }

    /// Acquisition id of the scene this seed produces.
    pub fn iw_id(&self) -> String {
        format!("SYN-{:06}", self.seed)
    }
}

/// One generated scene: the collocated raster as the pipeline would see it,
/// plus the exact truth the raster's rain channel was shifted from.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Channels: ssr_vv, ssr_vh, land_mask, rain (misaligned label),
    /// rain_truth (exact), incidence, nesz, wind_prior; station + iw_id
    /// metadata set.
    pub raster: GeoRaster,
    /// Rain field before the misalignment shift.
    pub rain_truth: Array2<f32>,
    /// Applied label shift in whole pixels (row, col).
    pub jitter_px: (i64, i64),
    /// Ground-station position (lat, lon).
    pub station: (f64, f64),
}

/// Channel name of the unshifted truth kept alongside the training label.
pub const RAIN_TRUTH_CHANNEL: &str = "rain_truth";

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generate one scene. Draw order is fixed — base wind, gradient, rain
/// cells, land blob, incidence, station, jitter, then per-pixel speckle —
/// so identical parameters give identical scenes.
pub fn generate_scene(p: &SceneParams) -> Result<Scene, SynthError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.size_px;
    let nf = (n - 1) as f64;
    let px_km = p.resolution_m / 1000.0;

    let wind_base = draw_range(&mut rng, p.wind_base_ms);
    let grad_col = draw_range(&mut rng, (-1.0, 1.0));
    let grad_row = draw_range(&mut rng, (-1.0, 1.0));

    let cell_count = rng.gen_range(p.cell_count.0..=p.cell_count.1);
    struct Cell {
        row: f64,
        col: f64,
        amp: f64,
        sigma_px: f64,
    }
    let cells: Vec<Cell> = (0..cell_count)
        .map(|_| Cell {
            row: draw_range(&mut rng, (0.0, n as f64)),
            col: draw_range(&mut rng, (0.0, n as f64)),
            amp: draw_range(&mut rng, p.cell_amplitude_mmh),
            sigma_px: draw_range(&mut rng, p.cell_radius_km) / px_km,
        })
        .collect();

    // Land blob parameters are always drawn so the stream position does not
    // depend on the coin flip.
    let has_land = rng.gen_bool(p.land_probability);
    let land_row = draw_range(&mut rng, (0.0, n as f64));
    let land_col = draw_range(&mut rng, (0.0, n as f64));
    let land_radius = draw_range(&mut rng, p.land_radius_frac) * n as f64;

    let incidence_base = draw_range(&mut rng, (25.0, 42.0));

    let station_row = n as f64 / 2.0 + draw_range(&mut rng, (-(n as f64) / 5.0, n as f64 / 5.0));
    let station_col = n as f64 / 2.0 + draw_range(&mut rng, (-(n as f64) / 5.0, n as f64 / 5.0));

    let jitter_col_km = draw_range(&mut rng, p.jitter_km);
    let jitter_row_km = draw_range(&mut rng, p.jitter_km);
    let jitter_px = (
        (jitter_row_km / px_km).round() as i64,
        (jitter_col_km / px_km).round() as i64,
    );

    let wind_at = |r: usize, c: usize| -> f64 {
        let u = c as f64 / nf - 0.5;
        let v = r as f64 / nf - 0.5;
        (wind_base + p.wind_gradient_ms * (grad_col * u + grad_row * v)).max(WIND_FLOOR_MS)
    };
    let rain_at = |r: usize, c: usize| -> f64 {
        cells
            .iter()
            .map(|cell| {
                let dr = r as f64 - cell.row;
                let dc = c as f64 - cell.col;
                cell.amp * (-(dr * dr + dc * dc) / (2.0 * cell.sigma_px * cell.sigma_px)).exp()
            })
            .sum()
    };

    let mut wind = Array2::<f32>::zeros((n, n));
    let mut rain_truth = Array2::<f32>::zeros((n, n));
    let mut land_mask = Array2::<f32>::from_elem((n, n), 1.0);
    let mut incidence = Array2::<f32>::zeros((n, n));
    let mut nesz = Array2::<f32>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            wind[[r, c]] = wind_at(r, c) as f32;
            rain_truth[[r, c]] = rain_at(r, c) as f32;
            if has_land {
                let dr = r as f64 - land_row;
                let dc = c as f64 - land_col;
                if dr * dr + dc * dc <= land_radius * land_radius {
                    land_mask[[r, c]] = 0.0;
                }
            }
            incidence[[r, c]] = (incidence_base + 3.0 * (c as f64 / nf - 0.5)) as f32;
            nesz[[r, c]] =
                (p.noise_db + 0.4 * (2.0 * PI * (r as f64 + c as f64) / n as f64).sin()) as f32;
        }
    }

    // Backscatter: monotone wind response, a saturating tanh-shaped rain
    // signature (VV's vanishing under strong wind), multiplicative speckle.
    let mut ssr_vv = Array2::<f32>::zeros((n, n));
    let mut ssr_vh = Array2::<f32>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let w = f64::from(wind[[r, c]]);
            let rr = f64::from(rain_truth[[r, c]]);
            let rain_shape = (rr / RAIN_COUPLING_SCALE_MMH).tanh();
            let sat_vv = 1.0 / (1.0 + (w / p.vv_saturation_ms).powi(4));
            let vv = (w / 10.0).powf(0.8) * (1.0 + p.coupling_vv * sat_vv * rain_shape);
            let vh = (w / 10.0).powf(1.3) * (1.0 + p.coupling_vh * rain_shape) + VH_PEDESTAL;
            let eps_vv = if p.noise_amplitude > 0.0 {
                draw_range(&mut rng, (-p.noise_amplitude, p.noise_amplitude))
            } else {
                0.0
            };
            let eps_vh = if p.noise_amplitude > 0.0 {
                draw_range(&mut rng, (-p.noise_amplitude, p.noise_amplitude))
            } else {
                0.0
            };
            ssr_vv[[r, c]] = (vv * (1.0 + eps_vv)) as f32;
            ssr_vh[[r, c]] = (vh * (1.0 + eps_vh)) as f32;
        }
    }

    // The delivered label is the truth displaced by the jitter vector,
    // emulating collocation misalignment; pixels shifted in from outside
    // the scene are dry.
    let mut rain_label = Array2::<f32>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let sr = r as i64 - jitter_px.0;
            let sc = c as i64 - jitter_px.1;
            if sr >= 0 && sc >= 0 && (sr as usize) < n && (sc as usize) < n {
                rain_label[[r, c]] = rain_truth[[sr as usize, sc as usize]];
            }
        }
    }

    let deg_per_px_lat = px_km / KM_PER_DEG;
    let deg_per_px_lon = px_km / (KM_PER_DEG * p.origin_lat_deg.to_radians().cos());
    let transform = GeoTransform::north_up(
        p.origin_lon_deg,
        p.origin_lat_deg,
        deg_per_px_lon,
        -deg_per_px_lat,
    );
    let timestamp = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap()
        + Duration::hours((p.seed % 720) as i64);
    let mut raster = GeoRaster::new(n, n, p.resolution_m, transform, timestamp);
    let add = |raster: &mut GeoRaster, name: &str, data: Array2<f32>| {
        raster
            .add_channel(name, data)
            .expect("fresh raster accepts each channel once");
    };
    add(&mut raster, channels::SSR_VV, ssr_vv);
    add(&mut raster, channels::SSR_VH, ssr_vh);
    add(&mut raster, channels::LAND_MASK, land_mask);
    add(&mut raster, channels::RAIN, rain_label);
    add(&mut raster, RAIN_TRUTH_CHANNEL, rain_truth.clone());
    add(&mut raster, channels::INCIDENCE, incidence);
    add(&mut raster, channels::NESZ, nesz);
    add(&mut raster, channels::WIND_PRIOR, wind);
    let (station_lon, station_lat) = raster.transform.apply(station_col, station_row);
    raster.set_station(station_lat, station_lon, &p.iw_id());
    raster.metadata.insert(IW_ID_KEY.into(), p.iw_id());

    Ok(Scene {
        raster,
        rain_truth,
        jitter_px,
        station: (station_lat, station_lon),
    })
}

/// Generate `n_scenes` scenes with consecutive seeds, stepping the scene
/// origin so acquisitions spread across geographic cells. Returns
/// (source name, scene) pairs; source names double as container filenames.
pub fn synth_scene_set(
    p: &SceneParams,
    n_scenes: usize,
) -> Result<Vec<(String, Scene)>, SynthError> {
    if n_scenes == 0 {
        return Err(SynthError::BadParams("need at least one scene".into()));
    }
    let mut out = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene_params = SceneParams {
            seed: p.seed.wrapping_add(i as u64),
            origin_lon_deg: p.origin_lon_deg + (i % 5) as f64 * 2.0,
            origin_lat_deg: p.origin_lat_deg + ((i / 5) % 5) as f64 * 2.0,
            ..p.clone()
        };
        let source = format!("{}.bin", scene_params.iw_id());
        out.push((source, generate_scene(&scene_params)?));
    }
    Ok(out)
}

/// Run generated scenes through the real dataset pipeline:
/// extract → label → cap → partition. With fewer than three acquisitions
/// the leak-free partition is undefined (its own precondition), so
/// everything lands in the training subset instead.
pub fn manifest_from_scenes(
    scenes: &[(String, Scene)],
    cfg: &DatasetConfig,
) -> Result<DatasetManifest, SynthError> {
    let mut extracted = Vec::new();
    for (source, scene) in scenes {
        extracted.extend(extract_patches(&scene.raster, source, &cfg.extract)?);
    }
    let (records, histogram) = if extracted.is_empty() {
        (
            Vec::new(),
            WindHistogram {
                bin_width_ms: cfg.bin_width_ms,
                counts: Vec::new(),
            },
        )
    } else {
        cap_rainless(extracted, cfg.bin_width_ms, cfg.cap_fraction, cfg.seed)?
    };
    let iw_count = records
        .iter()
        .map(|r| r.iw_id.as_str())
        .collect::<std::collections::BTreeSet<&str>>()
        .len();
    let split: BTreeMap<String, Subset> = if iw_count >= 3 {
        partition(
            &records,
            cfg.fractions,
            cfg.partition_iterations,
            cfg.partition_restarts,
            cfg.seed,
        )?
        .split
    } else {
        records
            .iter()
            .map(|r| (r.iw_id.clone(), Subset::Train))
            .collect()
    };
    let manifest = DatasetManifest {
        records,
        split,
        histogram,
        config: cfg.clone(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Generate scenes and build a manifest plus an in-memory patch store over
/// them in one call. Convenience wrapper around [`synth_scene_set`] and
/// [`manifest_from_scenes`].
pub fn synth_dataset(
    p: &SceneParams,
    n_scenes: usize,
    cfg: &DatasetConfig,
) -> Result<(DatasetManifest, PatchStore), SynthError> {
    let scenes = synth_scene_set(p, n_scenes)?;
    let manifest = manifest_from_scenes(&scenes, cfg)?;
    let mut store = PatchStore::new(Path::new("."));
    for (source, scene) in scenes {
        store.insert(&source, scene.raster);
    }
    Ok((manifest, store))
}
