//! Patch dataset construction: extraction, labeling, rainless capping, and
//! leak-free train/validation/test partitioning.
//!
//! Rasters are cut into overlapping square patches; each patch gets a
//! ten-way class label combining a rain flag (more than 5% of its ocean
//! area raining harder than 3 mm/h) with a five-interval wind class. The
//! heavily over-represented rainless population is capped per 0.5 m/s wind
//! bin, and the split into train/validation/test keeps every acquisition
//! (IW id) whole inside a single subset so no scene leaks across the
//! boundary.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{load_raster, ContainerError};
use crate::geo::{haversine_km, GeoError, GeoRaster};

/// Raster channel names shared across the pipeline.
pub mod channels {
    pub const SSR_VV: &str = "ssr_vv";
    pub const SSR_VH: &str = "ssr_vh";
    /// 1 over ocean, 0 over land.
    pub const LAND_MASK: &str = "land_mask";
    /// Collocated precipitation rate, mm/h; negative = missing.
    pub const RAIN: &str = "rain";
    pub const INCIDENCE: &str = "incidence";
    pub const NESZ: &str = "nesz";
    /// A-priori model wind speed, m/s.
    pub const WIND_PRIOR: &str = "wind_prior";
}

/// Rain-rate threshold for a raining pixel, mm/h (strictly greater counts).
pub const RAIN_RATE_THRESHOLD: f64 = 3.0;
/// Fraction of ocean area that must rain for the patch to be flagged
/// (strictly greater counts).
pub const RAIN_FRACTION_THRESHOLD: f64 = 0.05;
/// Wind-class edges, m/s; intervals are half-open [lo, hi).
pub const WIND_CLASS_EDGES: [f64; 4] = [2.0, 6.0, 10.0, 15.0];
/// Metadata key carrying the acquisition id on rasters.
pub const IW_ID_KEY: &str = "iw_id";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("raster {rows}×{cols} px is smaller than one {size_px} px patch")]
    RasterTooSmall {
        rows: usize,
        cols: usize,
        size_px: usize,
    },
    #[error("need at least 3 distinct acquisitions to partition, found {found}")]
    InsufficientGroups { found: usize },
    #[error("no records supplied")]
    EmptyRecords,
    #[error("raster metadata lacks `{IW_ID_KEY}`")]
    MissingIwId,
    #[error("station filter requested but raster carries no station location")]
    MissingStation,
    #[error("land mask holds {value} at ({row}, {col}); only 0 and 1 are allowed")]
    BadLandMask { value: f32, row: usize, col: usize },
    #[error("patch window [{row_off}+{size_px}, {col_off}+{size_px}] exceeds raster {rows}×{cols}")]
    WindowOutOfBounds {
        row_off: usize,
        col_off: usize,
        size_px: usize,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("failed to {action} manifest {path}: {source}")]
    ManifestIo {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} is not valid JSON: {source}")]
    ManifestJson {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest record {index} has class_id {class_id}, expected {expected}")]
    BadClassId {
        index: usize,
        class_id: u8,
        expected: u8,
    },
    #[error("record references acquisition {iw_id} absent from the split map")]
    UnsplitIw { iw_id: String },
}

/// Wind class for a speed in m/s: five half-open intervals split at
/// 2, 6, 10 and 15 m/s.
pub fn wind_class_of(wind_ms: f64) -> u8 {
    WIND_CLASS_EDGES.iter().filter(|e| wind_ms >= **e).count() as u8
}

/// Label computed from a patch's rain raster, land mask and wind speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchLabel {
    pub rain_flag: bool,
    pub wind_class: u8,
    pub class_id: u8,
    /// Fraction of ocean pixels raining above the rate threshold.
    pub rain_fraction: f64,
    /// Fraction of ocean pixels with missing rain observations.
    pub missing_fraction: f64,
    /// Fraction of all pixels that are ocean.
    pub ocean_fraction: f64,
}

/// Classify one patch. Missing rain gates (negative values) count as
/// not-raining for the flag but are tallied into `missing_fraction`; both
/// rain fractions use ocean pixels as the denominator. A patch with no
/// ocean at all gets `rain_flag = false`.
pub fn label_patch(
    rain: ArrayView2<f32>,
    land_mask: ArrayView2<f32>,
    wind_ms: f64,
) -> PatchLabel {
    let mut ocean = 0usize;
    let mut raining = 0usize;
    let mut missing = 0usize;
    for (r, m) in rain.iter().zip(land_mask.iter()) {
        if *m > 0.5 {
            ocean += 1;
            if *r < 0.0 {
                missing += 1;
            } else if f64::from(*r) > RAIN_RATE_THRESHOLD {
                raining += 1;
            }
        }
    }
    let rain_fraction = if ocean > 0 {
        raining as f64 / ocean as f64
    } else {
        0.0
    };
    let missing_fraction = if ocean > 0 {
        missing as f64 / ocean as f64
    } else {
        0.0
    };
    let rain_flag = rain_fraction > RAIN_FRACTION_THRESHOLD;
    let wind_class = wind_class_of(wind_ms);
    PatchLabel {
        rain_flag,
        wind_class,
        class_id: wind_class + 5 * rain_flag as u8,
        rain_fraction,
        missing_fraction,
        ocean_fraction: ocean as f64 / rain.len() as f64,
    }
}

/// One labelled patch, referencing a window of a stored raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchRecord {
    /// Raster container file the pixels live in (path relative to the
    /// manifest, or an in-memory key).
    pub source: String,
    pub iw_id: String,
    pub row_off: usize,
    pub col_off: usize,
    pub size_px: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Great-circle distance from patch centre to the radar station, km;
    /// absent when the source raster carries no station.
    pub station_km: Option<f64>,
    /// Patch-mean incidence angle, degrees.
    pub incidence_deg: f64,
    /// Patch-mean noise floor, dB.
    pub nesz_db: f64,
    /// Patch-mean a-priori wind speed, m/s (the model's scalar input).
    pub wind_prior_ms: f64,
    /// Patch-max a-priori wind speed, m/s (drives the class label).
    pub wind_max_ms: f64,
    pub ocean_fraction: f64,
    pub rain_fraction: f64,
    pub missing_fraction: f64,
    pub rain_flag: bool,
    pub wind_class: u8,
    pub class_id: u8,
}

/// Extraction geometry and filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub size_km: f64,
    pub stride_km: f64,
    /// Drop patches whose centre is farther than this from the station;
    /// `None` disables the filter.
    pub max_station_km: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            size_km: 25.0,
            stride_km: 12.5,
            max_station_km: Some(175.0),
        }
    }
}

/// Cut a raster into overlapping patches on the stride grid and label each.
///
/// Patch size and offsets are rounded from the kilometre geometry to whole
/// pixels; a patch starts at `round(k · stride)` for k = 0, 1, … as long as
/// it still fits. Scalars are patch means; the label wind is the patch max.
pub fn extract_patches(
    raster: &GeoRaster,
    source: &str,
    cfg: &ExtractConfig,
) -> Result<Vec<PatchRecord>, DatasetError> {
    let iw_id = raster
        .metadata
        .get(IW_ID_KEY)
        .ok_or(DatasetError::MissingIwId)?
        .clone();
    let size_px = (cfg.size_km * 1000.0 / raster.resolution_m).round() as usize;
    let stride_px = cfg.stride_km * 1000.0 / raster.resolution_m;
    if size_px == 0 || raster.rows() < size_px || raster.cols() < size_px {
        return Err(DatasetError::RasterTooSmall {
            rows: raster.rows(),
            cols: raster.cols(),
            size_px,
        });
    }
    let station = raster.station();
    if station.is_none() && cfg.max_station_km.is_some() {
        return Err(DatasetError::MissingStation);
    }

    let ssr_vv = raster.channel(channels::SSR_VV)?;
    let _ = ssr_vv; // presence check; pixels stay in the container
    raster.channel(channels::SSR_VH)?;
    let land = raster.channel(channels::LAND_MASK)?;
    let rain = raster.channel(channels::RAIN)?;
    let incidence = raster.channel(channels::INCIDENCE)?;
    let nesz = raster.channel(channels::NESZ)?;
    let wind = raster.channel(channels::WIND_PRIOR)?;
    for ((row, col), v) in land.indexed_iter() {
        if *v != 0.0 && *v != 1.0 {
            return Err(DatasetError::BadLandMask { value: *v, row, col });
        }
    }

    let offsets = |dim: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let off = (k as f64 * stride_px).round() as usize;
            if off + size_px > dim {
                break;
            }
            out.push(off);
            k += 1;
        }
        out
    };

    let mut records = Vec::new();
    for &row_off in &offsets(raster.rows()) {
        for &col_off in &offsets(raster.cols()) {
            let (center_lon, center_lat) = raster.transform.apply(
                col_off as f64 + size_px as f64 / 2.0,
                row_off as f64 + size_px as f64 / 2.0,
            );
            let station_km =
                station.map(|(slat, slon)| haversine_km(slat, slon, center_lat, center_lon));
            if let (Some(max_km), Some(d)) = (cfg.max_station_km, station_km) {
                if d > max_km {
                    continue;
                }
            }
            let win = s![row_off..row_off + size_px, col_off..col_off + size_px];
            let mean = |a: &Array2<f32>| -> f64 {
                let v = a.slice(win);
                v.iter().map(|x| f64::from(*x)).sum::<f64>() / v.len() as f64
            };
            let wind_win = wind.slice(win);
            let wind_max_ms = wind_win
                .iter()
                .fold(f64::MIN, |m, v| m.max(f64::from(*v)));
            let label = label_patch(rain.slice(win), land.slice(win), wind_max_ms);
            // All-land windows carry no usable signal or label.
            if label.ocean_fraction == 0.0 {
                continue;
            }
            records.push(PatchRecord {
                source: source.to_string(),
                iw_id: iw_id.clone(),
                row_off,
                col_off,
                size_px,
                center_lat,
                center_lon,
                station_km,
                incidence_deg: mean(incidence),
                nesz_db: mean(nesz),
                wind_prior_ms: mean(wind),
                wind_max_ms,
                ocean_fraction: label.ocean_fraction,
                rain_fraction: label.rain_fraction,
                missing_fraction: label.missing_fraction,
                rain_flag: label.rain_flag,
                wind_class: label.wind_class,
                class_id: label.class_id,
            });
        }
    }
    Ok(records)
}

/// Wind-speed histogram with fixed-width bins starting at zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WindHistogram {
    pub bin_width_ms: f64,
    pub counts: Vec<usize>,
}

impl WindHistogram {
    pub fn build(records: &[PatchRecord], bin_width_ms: f64) -> Self {
        let mut counts = Vec::new();
        for r in records {
            let bin = (r.wind_max_ms.max(0.0) / bin_width_ms).floor() as usize;
            if counts.len() <= bin {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        WindHistogram {
            bin_width_ms,
            counts,
        }
    }

    pub fn largest_bin(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Subsample rainless patches so no wind bin keeps more than
/// `cap_fraction × (largest bin of the pre-cap histogram)` of them.
/// Rain-flagged records are never removed; selection within a bin is a
/// seeded uniform draw; surviving records keep their original order.
/// Returns the reduced records and the pre-cap histogram.
pub fn cap_rainless(
    records: Vec<PatchRecord>,
    bin_width_ms: f64,
    cap_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatchRecord>, WindHistogram), DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyRecords);
    }
    let full = WindHistogram::build(&records, bin_width_ms);
    let cap = (cap_fraction * full.largest_bin() as f64).floor() as usize;

    let mut rainless_by_bin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !r.rain_flag {
            let bin = (r.wind_max_ms.max(0.0) / bin_width_ms).floor() as usize;
            rainless_by_bin.entry(bin).or_default().push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; records.len()];
    for (_bin, members) in rainless_by_bin {
        if members.len() > cap {
            for m in &members {
                keep[*m] = false;
            }
            for chosen in rand::seq::index::sample(&mut rng, members.len(), cap) {
                keep[members[chosen]] = true;
            }
        }
    }
    let reduced = records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    Ok((reduced, full))
}

/// Subset assignment for one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn index(self) -> usize {
        match self {
            Subset::Train => 0,
            Subset::Val => 1,
            Subset::Test => 2,
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        })
    }
}

/// Per-acquisition aggregate used by the partition search.
#[derive(Debug, Clone)]
pub struct IwGroup {
    pub iw_id: String,
    pub class_counts: [f64; 10],
    pub n: f64,
}

/// Group records by acquisition id, sorted by id for determinism.
pub fn iw_groups(records: &[PatchRecord]) -> Vec<IwGroup> {
    let mut map: BTreeMap<&str, ([f64; 10], f64)> = BTreeMap::new();
    for r in records {
        let e = map.entry(&r.iw_id).or_insert(([0.0; 10], 0.0));
        e.0[r.class_id as usize] += 1.0;
        e.1 += 1.0;
    }
    map.into_iter()
        .map(|(iw_id, (class_counts, n))| IwGroup {
            iw_id: iw_id.to_string(),
            class_counts,
            n,
        })
        .collect()
}

/// Weight of the subset-size penalty relative to the distribution term.
const FRACTION_PENALTY_WEIGHT: f64 = 2.0;

/// Partition objective: the summed L1 distance between each subset's
/// 10-class distribution and the global distribution, plus a weighted
/// penalty on deviation from the target patch fractions. An empty subset
/// contributes an L1 distance of exactly 1.
pub fn partition_objective(groups: &[IwGroup], assignment: &[usize], fractions: [f64; 3]) -> f64 {
    let mut global = [0.0f64; 10];
    let mut sub_counts = [[0.0f64; 10]; 3];
    let mut sub_n = [0.0f64; 3];
    let mut total = 0.0f64;
    for (g, a) in groups.iter().zip(assignment) {
        for c in 0..10 {
            global[c] += g.class_counts[c];
            sub_counts[*a][c] += g.class_counts[c];
        }
        sub_n[*a] += g.n;
        total += g.n;
    }
    let mut obj = 0.0;
    for s in 0..3 {
        for c in 0..10 {
            let gd = global[c] / total;
            let sd = if sub_n[s] > 0.0 {
                sub_counts[s][c] / sub_n[s]
            } else {
                0.0
            };
            obj += (sd - gd).abs();
        }
        obj += FRACTION_PENALTY_WEIGHT * (sub_n[s] / total - fractions[s]).abs();
    }
    obj
}

/// Result of the partition search.
#[derive(Debug, Clone)]
pub struct PartitionOutcome {
    pub split: BTreeMap<String, Subset>,
    pub objective: f64,
    /// Objective of the best of the 100 seeded random splits the search
    /// started from; the returned objective never exceeds it.
    pub best_random_objective: f64,
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize, fractions: [f64; 3]) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < fractions[0] {
                0
            } else if u < fractions[0] + fractions[1] {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Assign whole acquisitions to train/validation/test.
///
/// The search seeds itself with the best of 100 random splits and then
/// hill-climbs with single-acquisition moves and pairwise swaps, restarting
/// `restarts` times; it therefore never returns anything worse than the
/// random baseline. Requires at least three distinct acquisitions.
pub fn partition(
    records: &[PatchRecord],
    fractions: [f64; 3],
    iterations: usize,
    restarts: usize,
    seed: u64,
) -> Result<PartitionOutcome, DatasetError> {
    let groups = iw_groups(records);
    if groups.len() < 3 {
        return Err(DatasetError::InsufficientGroups {
            found: groups.len(),
        });
    }
    let n = groups.len();
    let mut master = ChaCha8Rng::seed_from_u64(seed);

    let mut best_random: Option<(f64, Vec<usize>)> = None;
    for _ in 0..100 {
        let a = random_assignment(&mut master, n, fractions);
        let obj = partition_objective(&groups, &a, fractions);
        if best_random.as_ref().map_or(true, |(b, _)| obj < *b) {
            best_random = Some((obj, a));
        }
    }
    let (best_random_objective, seed_assignment) = best_random.expect("100 draws");

    let mut best_obj = best_random_objective;
    let mut best_assign = seed_assignment.clone();
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(restart as u64 + 1)));
        let (mut cur, mut cur_obj) = if restart == 0 {
            (seed_assignment.clone(), best_random_objective)
        } else {
            let a = random_assignment(&mut rng, n, fractions);
            let o = partition_objective(&groups, &a, fractions);
            (a, o)
        };
        for _ in 0..iterations {
            let mut cand = cur.clone();
            if n >= 2 && rng.gen_bool(0.5) {
                // Swap the subsets of two acquisitions.
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                cand.swap(i, j);
            } else {
                // Move one acquisition to a different subset.
                let i = rng.gen_range(0..n);
                let delta = rng.gen_range(1..3);
                cand[i] = (cand[i] + delta) % 3;
            }
            let obj = partition_objective(&groups, &cand, fractions);
            if obj < cur_obj {
                cur = cand;
                cur_obj = obj;
            }
        }
        if cur_obj < best_obj {
            best_obj = cur_obj;
            best_assign = cur;
        }
    }

    let split = groups
        .iter()
        .zip(&best_assign)
        .map(|(g, a)| (g.iw_id.clone(), Subset::ALL[*a]))
        .collect();
    Ok(PartitionOutcome {
        split,
        objective: best_obj,
        best_random_objective,
    })
}

/// Everything needed to rebuild a dataset deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub extract: ExtractConfig,
    pub bin_width_ms: f64,
    pub cap_fraction: f64,
    pub fractions: [f64; 3],
    pub partition_iterations: usize,
    pub partition_restarts: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            extract: ExtractConfig::default(),
            bin_width_ms: 0.5,
            cap_fraction: 0.2,
            fractions: [0.7, 0.1, 0.2],
            partition_iterations: 2000,
            partition_restarts: 4,
            seed: 0,
        }
    }
}

/// The dataset: capped records, the leak-free split, the pre-cap wind
/// histogram, and the configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<PatchRecord>,
    pub split: BTreeMap<String, Subset>,
    pub histogram: WindHistogram,
    pub config: DatasetConfig,
}

impl DatasetManifest {
    /// Check structural invariants: class arithmetic on every record and
    /// split coverage of every acquisition.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, r) in self.records.iter().enumerate() {
            let expected = r.wind_class + 5 * r.rain_flag as u8;
            if r.class_id != expected || r.wind_class > 4 {
                return Err(DatasetError::BadClassId {
                    index: i,
                    class_id: r.class_id,
                    expected,
                });
            }
            if !self.split.contains_key(&r.iw_id) {
                return Err(DatasetError::UnsplitIw {
                    iw_id: r.iw_id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Records assigned to one subset.
    pub fn subset_records(&self, subset: Subset) -> Vec<&PatchRecord> {
        self.records
            .iter()
            .filter(|r| self.split.get(&r.iw_id) == Some(&subset))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|source| DatasetError::ManifestIo {
            action: "write",
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::ManifestIo {
            action: "read",
            path: path.display().to_string(),
            source,
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| DatasetError::ManifestJson {
                path: path.display().to_string(),
                source,
            })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Build the full manifest from labelled rasters: extract, cap, partition.
pub fn build_manifest(
    rasters: &[(String, &GeoRaster)],
    cfg: &DatasetConfig,
) -> Result<DatasetManifest, DatasetError> {
    let mut records = Vec::new();
    for (source, raster) in rasters {
        records.extend(extract_patches(raster, source, &cfg.extract)?);
    }
    let (records, histogram) =
        cap_rainless(records, cfg.bin_width_ms, cfg.cap_fraction, cfg.seed)?;
    let outcome = partition(
        &records,
        cfg.fractions,
        cfg.partition_iterations,
        cfg.partition_restarts,
        cfg.seed,
    )?;
    let manifest = DatasetManifest {
        records,
        split: outcome.split,
        histogram,
        config: cfg.clone(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Pixel data for one patch, ready for model assembly.
#[derive(Debug, Clone)]
pub struct PatchData {
    pub ssr_vv: Array2<f32>,
    pub ssr_vh: Array2<f32>,
    /// 1 over ocean, 0 over land.
    pub land_mask: Array2<f32>,
    /// Rain rate with missing gates mapped to 0 mm/h.
    pub rain: Array2<f32>,
    /// Scalars in model order: incidence (deg), NESZ (dB), wind prior (m/s).
    pub scalars: [f64; 3],
}

/// Loads patch pixels from raster containers, caching whole rasters.
pub struct PatchStore {
    root: PathBuf,
    cache: HashMap<String, GeoRaster>,
}

impl PatchStore {
    /// `root` is the directory record sources are relative to.
    pub fn new(root: &Path) -> Self {
        PatchStore {
            root: root.to_path_buf(),
            cache: HashMap::new(),
        }
    }

    /// Register an in-memory raster under a source key (used by the
    /// synthetic pipeline and tests to skip the filesystem).
    pub fn insert(&mut self, source: &str, raster: GeoRaster) {
        self.cache.insert(source.to_string(), raster);
    }

    fn ensure_loaded(&mut self, source: &str) -> Result<(), DatasetError> {
        if !self.cache.contains_key(source) {
            let raster = load_raster(&self.root.join(source))?;
            self.cache.insert(source.to_string(), raster);
        }
        Ok(())
    }

    /// Metadata of a record's source raster (station id, acquisition id, …).
    pub fn source_metadata(
        &mut self,
        source: &str,
    ) -> Result<&BTreeMap<String, String>, DatasetError> {
        self.ensure_loaded(source)?;
        Ok(&self.cache[source].metadata)
    }

    /// Cut one record's window out of its source raster.
    pub fn patch(&mut self, rec: &PatchRecord) -> Result<PatchData, DatasetError> {
        self.ensure_loaded(&rec.source)?;
        let raster = &self.cache[&rec.source];
        if rec.row_off + rec.size_px > raster.rows() || rec.col_off + rec.size_px > raster.cols()
        {
            return Err(DatasetError::WindowOutOfBounds {
                row_off: rec.row_off,
                col_off: rec.col_off,
                size_px: rec.size_px,
                rows: raster.rows(),
                cols: raster.cols(),
            });
        }
        let win = s![
            rec.row_off..rec.row_off + rec.size_px,
            rec.col_off..rec.col_off + rec.size_px
        ];
        let cut = |name: &str| -> Result<Array2<f32>, DatasetError> {
            Ok(raster.channel(name)?.slice(win).to_owned())
        };
        let mut rain = cut(channels::RAIN)?;
        rain.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
        Ok(PatchData {
            ssr_vv: cut(channels::SSR_VV)?,
            ssr_vh: cut(channels::SSR_VH)?,
            land_mask: cut(channels::LAND_MASK)?,
            rain,
            scalars: [rec.incidence_deg, rec.nesz_db, rec.wind_prior_ms],
        })
    }
}
