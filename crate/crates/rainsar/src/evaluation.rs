//! Categorical and regression metrics: patch categorization, precision /
//! recall / F1 with honest handling of undefined cases, wind-binned analysis
//! with prevalence-matching likelihood weighting, seeded bootstrap confidence
//! intervals, ensemble uncertainty, and threshold / geographic aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ocean-pixel convention: mask values above this count as ocean.
const OCEAN_CUTOFF: f32 = 0.5;
/// Pixels whose ensemble mean rain rate is below this have no meaningful
/// relative spread.
pub const RELATIVE_STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch has no ocean pixels")]
    NoOcean,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("wind prior {value} m/s outside bins [{lo}, {hi})")]
    WindOutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("bad bins: {0}")]
    BadBins(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

// ---- categorization ----

/// Fraction of ocean pixels with rain strictly above `threshold_mmh`.
pub fn exceedance_fraction(
    rain: &Array2<f32>,
    ocean_mask: &Array2<f32>,
    threshold_mmh: f64,
) -> Result<f64, EvalError> {
    if rain.dim() != ocean_mask.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "rain {:?} vs mask {:?}",
            rain.dim(),
            ocean_mask.dim()
        )));
    }
    let mut ocean = 0usize;
    let mut above = 0usize;
    for (r, m) in rain.iter().zip(ocean_mask.iter()) {
        if *m > OCEAN_CUTOFF {
            ocean += 1;
            if f64::from(*r) > threshold_mmh {
                above += 1;
            }
        }
    }
    if ocean == 0 {
        return Err(EvalError::NoOcean);
    }
    Ok(above as f64 / ocean as f64)
}

/// A patch counts as raining when strictly more than `area_fraction` of its
/// ocean surface is strictly above `threshold_mmh` (exactly 5% is rainless).
pub fn categorize(
    rain: &Array2<f32>,
    ocean_mask: &Array2<f32>,
    threshold_mmh: f64,
    area_fraction: f64,
) -> Result<bool, EvalError> {
    Ok(exceedance_fraction(rain, ocean_mask, threshold_mmh)? > area_fraction)
}

// ---- precision / recall / F1 ----

/// Confusion counts; f64 so weighted variants share the arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionCounts {
    pub fn from_flags(truth: &[bool], pred: &[bool]) -> Result<Self, EvalError> {
        let ones = vec![1.0; truth.len()];
        Self::weighted(truth, pred, &ones)
    }

    /// Confusion counts where each sample contributes its weight.
    pub fn weighted(truth: &[bool], pred: &[bool], weights: &[f64]) -> Result<Self, EvalError> {
        if truth.len() != pred.len() || truth.len() != weights.len() {
            return Err(EvalError::LengthMismatch {
                left: truth.len(),
                right: pred.len().max(weights.len()),
            });
        }
        let mut c = ConfusionCounts::default();
        for ((t, p), w) in truth.iter().zip(pred).zip(weights) {
            match (t, p) {
                (true, true) => c.tp += w,
                (false, true) => c.fp += w,
                (true, false) => c.fn_ += w,
                (false, false) => c.tn += w,
            }
        }
        Ok(c)
    }

    /// Precision, recall and F1. Ratios with empty denominators are absent
    /// rather than silently zero: precision needs a positive prediction,
    /// recall a positive truth, and F1 a positive anywhere.
    pub fn prf(&self) -> PrfValues {
        let precision = (self.tp + self.fp > 0.0).then(|| self.tp / (self.tp + self.fp));
        let recall = (self.tp + self.fn_ > 0.0).then(|| self.tp / (self.tp + self.fn_));
        let denom = 2.0 * self.tp + self.fp + self.fn_;
        let f1 = (denom > 0.0).then(|| 2.0 * self.tp / denom);
        PrfValues {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfValues {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Precision, recall, F1 from boolean truth/prediction pairs.
pub fn prf(truth: &[bool], pred: &[bool]) -> Result<PrfValues, EvalError> {
    Ok(ConfusionCounts::from_flags(truth, pred)?.prf())
}

// ---- per-patch evaluation records ----

/// Everything the aggregate metrics need from one evaluated patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchEval {
    pub iw_id: String,
    pub wind_prior_ms: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub station_id: Option<String>,
    /// Raining per the headline threshold, from ground truth.
    pub truth_flag: bool,
    /// Raining per the headline threshold, from the prediction.
    pub pred_flag: bool,
    /// Maximum rain rate over ocean pixels (mm/h).
    pub max_true: f64,
    pub max_pred: f64,
    /// Mean rain rate over ocean pixels (mm/h).
    pub mean_true: f64,
    pub mean_pred: f64,
    /// Ocean fraction strictly above each sweep threshold, truth.
    pub truth_above: Vec<f64>,
    /// Same for the prediction.
    pub pred_above: Vec<f64>,
}

/// Identity fields for [`evaluate_patch`].
#[derive(Debug, Clone, Default)]
pub struct PatchIdentity {
    pub iw_id: String,
    pub wind_prior_ms: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub station_id: Option<String>,
}

/// Reduce one truth/prediction pair to the summary record used by every
/// aggregate metric. `thresholds` is the sweep list; the headline flags use
/// `rain_threshold`/`area_fraction`.
pub fn evaluate_patch(
    truth: &Array2<f32>,
    pred: &Array2<f32>,
    ocean_mask: &Array2<f32>,
    identity: PatchIdentity,
    thresholds: &[f64],
    rain_threshold: f64,
    area_fraction: f64,
) -> Result<PatchEval, EvalError> {
    if truth.dim() != pred.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "truth {:?} vs pred {:?}",
            truth.dim(),
            pred.dim()
        )));
    }
    let truth_flag = categorize(truth, ocean_mask, rain_threshold, area_fraction)?;
    let pred_flag = categorize(pred, ocean_mask, rain_threshold, area_fraction)?;
    let mut max_true = f64::NEG_INFINITY;
    let mut max_pred = f64::NEG_INFINITY;
    let mut sum_true = 0.0;
    let mut sum_pred = 0.0;
    let mut ocean = 0usize;
    for ((t, p), m) in truth.iter().zip(pred.iter()).zip(ocean_mask.iter()) {
        if *m > OCEAN_CUTOFF {
            ocean += 1;
            max_true = max_true.max(f64::from(*t));
            max_pred = max_pred.max(f64::from(*p));
            sum_true += f64::from(*t);
            sum_pred += f64::from(*p);
        }
    }
    debug_assert!(ocean > 0, "categorize already rejected all-land patches");
    let truth_above = thresholds
        .iter()
        .map(|t| exceedance_fraction(truth, ocean_mask, *t))
        .collect::<Result<Vec<f64>, _>>()?;
    let pred_above = thresholds
        .iter()
        .map(|t| exceedance_fraction(pred, ocean_mask, *t))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(PatchEval {
        iw_id: identity.iw_id,
        wind_prior_ms: identity.wind_prior_ms,
        center_lat: identity.center_lat,
        center_lon: identity.center_lon,
        station_id: identity.station_id,
        truth_flag,
        pred_flag,
        max_true,
        max_pred,
        mean_true: sum_true / ocean as f64,
        mean_pred: sum_pred / ocean as f64,
        truth_above,
        pred_above,
    })
}

// ---- wind-binned metrics with likelihood weighting ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindBinMetrics {
    pub lo: f64,
    pub hi: f64,
    pub support_pos: usize,
    pub support_neg: usize,
    /// Plain PRF over the bin; absent when the bin is empty.
    pub unweighted: Option<PrfValues>,
    /// PRF after reweighting the bin's rain prevalence to the reference;
    /// absent for empty or single-class bins.
    pub weighted: Option<PrfValues>,
    /// Bootstrap 95% interval on the weighted F1 (unweighted when weighting
    /// is degenerate).
    pub f1_ci: Option<(f64, f64)>,
    pub note: Option<String>,
}

/// Per-truth-class weights that move the bin's rain prevalence onto
/// `reference`. Total mass is preserved exactly:
/// (r/p)·pos + ((1−r)/(1−p))·neg = r·n + (1−r)·n = n.
fn prevalence_weights(truth: &[bool], reference: f64) -> Option<(f64, f64)> {
    let n = truth.len();
    let pos = truth.iter().filter(|t| **t).count();
    if pos == 0 || pos == n {
        return None;
    }
    let p = pos as f64 / n as f64;
    Some((reference / p, (1.0 - reference) / (1.0 - p)))
}

fn weighted_prf(truth: &[bool], pred: &[bool], reference: f64) -> Option<PrfValues> {
    let (w_pos, w_neg) = prevalence_weights(truth, reference)?;
    let weights: Vec<f64> = truth
        .iter()
        .map(|t| if *t { w_pos } else { w_neg })
        .collect();
    Some(
        ConfusionCounts::weighted(truth, pred, &weights)
            .expect("lengths checked")
            .prf(),
    )
}

fn bin_index(edges: &[f64], value: f64) -> Result<usize, EvalError> {
    let lo = edges[0];
    let hi = *edges.last().expect("validated non-empty");
    if value < lo || value >= hi {
        return Err(EvalError::WindOutOfRange { value, lo, hi });
    }
    Ok(edges[1..edges.len() - 1]
        .iter()
        .take_while(|e| value >= **e)
        .count())
}

fn validate_edges(edges: &[f64], what: &str) -> Result<(), EvalError> {
    if edges.len() < 2 {
        return Err(EvalError::BadBins(format!(
            "{what} needs at least two edges"
        )));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadBins(format!(
            "{what} edges must be strictly ascending"
        )));
    }
    Ok(())
}

/// Per-wind-bin PRF with prevalence-matching weighting and a bootstrap CI on
/// the F1. `reference_prevalence` defaults to the global rain prevalence of
/// `patches`.
pub fn wind_binned_metrics(
    patches: &[PatchEval],
    bin_edges: &[f64],
    reference_prevalence: Option<f64>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<WindBinMetrics>, EvalError> {
    validate_edges(bin_edges, "wind bins")?;
    if patches.is_empty() {
        return Err(EvalError::EmptyInput("no patches to bin"));
    }
    let global_pos = patches.iter().filter(|p| p.truth_flag).count();
    let reference =
        reference_prevalence.unwrap_or(global_pos as f64 / patches.len() as f64);

    let mut bins: Vec<Vec<&PatchEval>> = vec![Vec::new(); bin_edges.len() - 1];
    for p in patches {
        bins[bin_index(bin_edges, p.wind_prior_ms)?].push(p);
    }

    let mut out = Vec::with_capacity(bins.len());
    for (i, members) in bins.iter().enumerate() {
        let lo = bin_edges[i];
        let hi = bin_edges[i + 1];
        let truth: Vec<bool> = members.iter().map(|p| p.truth_flag).collect();
        let pred: Vec<bool> = members.iter().map(|p| p.pred_flag).collect();
        let support_pos = truth.iter().filter(|t| **t).count();
        let support_neg = truth.len() - support_pos;
        if members.is_empty() {
            out.push(WindBinMetrics {
                lo,
                hi,
                support_pos,
                support_neg,
                unweighted: None,
                weighted: None,
                f1_ci: None,
                note: Some("empty bin".into()),
            });
            continue;
        }
        let unweighted = prf(&truth, &pred)?;
        let weighted = weighted_prf(&truth, &pred, reference);
        let note = (weighted.is_none())
            .then(|| "single-class bin: likelihood weighting undefined".to_string());
        // Bootstrap the F1 the bin actually reports.
        let weighting_defined = weighted.is_some();
        let f1_of = |idx: &[usize]| -> Option<f64> {
            let t: Vec<bool> = idx.iter().map(|j| truth[*j]).collect();
            let p: Vec<bool> = idx.iter().map(|j| pred[*j]).collect();
            if weighting_defined {
                weighted_prf(&t, &p, reference)?.f1
            } else {
                ConfusionCounts::from_flags(&t, &p).ok()?.prf().f1
            }
        };
        let f1_ci = bootstrap_ci(members.len(), f1_of, resamples, level, seed ^ i as u64);
        out.push(WindBinMetrics {
            lo,
            hi,
            support_pos,
            support_neg,
            unweighted: Some(unweighted),
            weighted,
            f1_ci,
            note,
        });
    }
    Ok(out)
}

// ---- bootstrap ----

/// Percentile bootstrap interval for a statistic over index resamples.
///
/// Each of the `resamples` draws gets its own generator seeded from the
/// master stream, so the set of resamples is independent of evaluation
/// order. `metric` receives indices drawn with replacement from `0..n` and
/// may return `None` for resamples where it is undefined; the interval is
/// absent when fewer than half the resamples define it.
pub fn bootstrap_ci<F>(
    n: usize,
    metric: F,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Option<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 || resamples == 0 || !(0.0..1.0).contains(&level) {
        return None;
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let resample_seeds: Vec<u64> = (0..resamples).map(|_| master.gen::<u64>()).collect();
    let mut values: Vec<f64> = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; n];
    for s in resample_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        if let Some(v) = metric(&idx) {
            if v.is_finite() {
                values.push(v);
            }
        }
    }
    if values.len() * 2 < resamples {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let alpha = (1.0 - level) / 2.0;
    Some((quantile(&values, alpha), quantile(&values, 1.0 - alpha)))
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bootstrap CI of the mean of `values`.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Option<(f64, f64)> {
    bootstrap_ci(
        values.len(),
        |idx| {
            let sum: f64 = idx.iter().map(|i| values[*i]).sum();
            Some(sum / idx.len() as f64)
        },
        resamples,
        level,
        seed,
    )
}

// ---- regression statistics ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterStats {
    pub pcc: f64,
    pub rmse_mmh: f64,
    /// Ordinary-least-squares slope of prediction on truth.
    pub slope: f64,
    pub n: usize,
}

/// Pearson correlation, RMSE (mm/h) and OLS slope of `pred` on `truth`.
pub fn scatter_stats(truth: &[f64], pred: &[f64]) -> Result<ScatterStats, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    let n = truth.len();
    if n < 2 {
        return Err(EvalError::EmptyInput("scatter needs at least two points"));
    }
    let nf = n as f64;
    let mean_t: f64 = truth.iter().sum::<f64>() / nf;
    let mean_p: f64 = pred.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_t = 0.0;
    let mut var_p = 0.0;
    let mut sq_err = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        let dt = t - mean_t;
        let dp = p - mean_p;
        cov += dt * dp;
        var_t += dt * dt;
        var_p += dp * dp;
        sq_err += (p - t) * (p - t);
    }
    if var_t == 0.0 || var_p == 0.0 {
        return Err(EvalError::DegenerateInput(
            "constant series has no correlation".into(),
        ));
    }
    Ok(ScatterStats {
        pcc: cov / (var_t.sqrt() * var_p.sqrt()),
        rmse_mmh: (sq_err / nf).sqrt(),
        slope: cov / var_t,
        n,
    })
}

// ---- ensemble uncertainty ----

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: Array2<f64>,
    /// Population standard deviation across runs.
    pub std: Array2<f64>,
    /// std/mean; NaN where the mean is below [`RELATIVE_STD_EPSILON`].
    pub relative: Array2<f64>,
    /// Number of pixels whose relative spread is absent.
    pub absent_pixels: usize,
}

/// Per-pixel mean, population std and relative std across K ≥ 2 runs.
pub fn ensemble_stats(runs: &[Array2<f32>]) -> Result<EnsembleStats, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::EmptyInput("ensemble needs at least two runs"));
    }
    let dim = runs[0].dim();
    for (k, r) in runs.iter().enumerate() {
        if r.dim() != dim {
            return Err(EvalError::ShapeMismatch(format!(
                "run {k} is {:?}, run 0 is {dim:?}",
                r.dim()
            )));
        }
    }
    let kf = runs.len() as f64;
    let mut mean = Array2::<f64>::zeros(dim);
    for r in runs {
        mean.zip_mut_with(r, |m, v| *m += f64::from(*v) / kf);
    }
    let mut var = Array2::<f64>::zeros(dim);
    for r in runs {
        ndarray::Zip::from(&mut var).and(&mean).and(r).for_each(|s, m, v| {
            let d = f64::from(*v) - m;
            *s += d * d / kf;
        });
    }
    let std = var.mapv(f64::sqrt);
    let mut absent_pixels = 0usize;
    let mut relative = Array2::<f64>::zeros(dim);
    ndarray::Zip::from(&mut relative)
        .and(&std)
        .and(&mean)
        .for_each(|r, s, m| {
            if *m < RELATIVE_STD_EPSILON {
                *r = f64::NAN;
                absent_pixels += 1;
            } else {
                *r = s / m;
            }
        });
    Ok(EnsembleStats {
        mean,
        std,
        relative,
        absent_pixels,
    })
}

// ---- threshold sweep ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub prf: PrfValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestThreshold {
    pub bin_lo: f64,
    pub bin_hi: f64,
    /// Threshold with the highest F1 (first maximum on ties); absent when no
    /// threshold yields a defined F1.
    pub threshold: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best: Vec<BestThreshold>,
}

/// PRF per (wind bin, threshold): each patch is re-categorized at every
/// threshold for both truth and prediction. Expects the patches' exceedance
/// tables to match `thresholds`.
pub fn threshold_sweep(
    patches: &[PatchEval],
    thresholds: &[f64],
    wind_bin_edges: &[f64],
    area_fraction: f64,
) -> Result<SweepTable, EvalError> {
    validate_edges(wind_bin_edges, "wind bins")?;
    if thresholds.is_empty() {
        return Err(EvalError::BadBins("no thresholds to sweep".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadBins("thresholds must be strictly ascending".into()));
    }
    for p in patches {
        if p.truth_above.len() != thresholds.len() || p.pred_above.len() != thresholds.len() {
            return Err(EvalError::LengthMismatch {
                left: p.truth_above.len(),
                right: thresholds.len(),
            });
        }
    }
    let mut bins: Vec<Vec<&PatchEval>> = vec![Vec::new(); wind_bin_edges.len() - 1];
    for p in patches {
        bins[bin_index(wind_bin_edges, p.wind_prior_ms)?].push(p);
    }
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for (i, members) in bins.iter().enumerate() {
        let bin_lo = wind_bin_edges[i];
        let bin_hi = wind_bin_edges[i + 1];
        let mut best_here: Option<(f64, f64)> = None; // (threshold, f1)
        for (k, t) in thresholds.iter().enumerate() {
            let truth: Vec<bool> = members.iter().map(|p| p.truth_above[k] > area_fraction).collect();
            let pred: Vec<bool> = members.iter().map(|p| p.pred_above[k] > area_fraction).collect();
            let counts = ConfusionCounts::from_flags(&truth, &pred)?;
            let prf = counts.prf();
            if let Some(f1) = prf.f1 {
                // First maximum wins ties, so strictly-greater replaces.
                if best_here.map_or(true, |(_, b)| f1 > b) {
                    best_here = Some((*t, f1));
                }
            }
            rows.push(SweepRow {
                bin_lo,
                bin_hi,
                threshold: *t,
                counts,
                prf,
            });
        }
        best.push(BestThreshold {
            bin_lo,
            bin_hi,
            threshold: best_here.map(|(t, _)| t),
            f1: best_here.map(|(_, f)| f),
        });
    }
    Ok(SweepTable { rows, best })
}

// ---- geographic grouping ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub support_pos: usize,
    pub support_neg: usize,
    pub prf: PrfValues,
}

fn grouped_prf<K: Fn(&PatchEval) -> Option<String>>(
    patches: &[PatchEval],
    key_of: K,
) -> BTreeMap<String, GroupMetrics> {
    let mut groups: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for p in patches {
        if let Some(key) = key_of(p) {
            let entry = groups.entry(key).or_default();
            entry.0.push(p.truth_flag);
            entry.1.push(p.pred_flag);
        }
    }
    groups
        .into_iter()
        .map(|(key, (truth, pred))| {
            let support_pos = truth.iter().filter(|t| **t).count();
            let support_neg = truth.len() - support_pos;
            let prf = ConfusionCounts::from_flags(&truth, &pred)
                .expect("aligned by construction")
                .prf();
            (
                key,
                GroupMetrics {
                    support_pos,
                    support_neg,
                    prf,
                },
            )
        })
        .collect()
}

/// PRF per ground-radar station; patches without a station are skipped.
pub fn station_metrics(patches: &[PatchEval]) -> BTreeMap<String, GroupMetrics> {
    grouped_prf(patches, |p| p.station_id.clone())
}

/// PRF per fixed-stride geographic cell keyed "lat0,lon0" (cell origin in
/// degrees).
pub fn region_cell_metrics(
    patches: &[PatchEval],
    stride_deg: f64,
) -> BTreeMap<String, GroupMetrics> {
    grouped_prf(patches, |p| {
        let lat0 = (p.center_lat / stride_deg).floor() * stride_deg;
        let lon0 = (p.center_lon / stride_deg).floor() * stride_deg;
        Some(format!("{lat0},{lon0}"))
    })
}

// ---- the aggregate report ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// Sweep thresholds (mm/h), ascending.
    pub thresholds: Vec<f64>,
    /// Wind-bin edges (m/s), ascending.
    pub wind_bin_edges: Vec<f64>,
    /// Headline rain threshold for the categorical flags.
    pub rain_threshold: f64,
    /// Ocean-area fraction a patch must exceed to count as raining.
    pub area_fraction: f64,
    /// Rain prevalence the wind bins are reweighted to; defaults to the
    /// evaluated set's own prevalence.
    pub reference_prevalence: Option<f64>,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
    pub seed: u64,
    pub region_stride_deg: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            thresholds: vec![1.0, 3.0, 10.0],
            wind_bin_edges: vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            rain_threshold: 3.0,
            area_fraction: 0.05,
            reference_prevalence: None,
            bootstrap_resamples: 1000,
            confidence_level: 0.95,
            seed: 0,
            region_stride_deg: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub counts: ConfusionCounts,
    pub prf: PrfValues,
    /// Bootstrap CI on the F1, clamped to contain the point estimate.
    pub f1_ci: Option<(f64, f64)>,
    /// Scatter statistics of per-patch maxima (pred on true).
    pub max_scatter: Option<ScatterStats>,
}

/// Scene-free summary of multi-checkpoint ensemble spread.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub runs: usize,
    /// Mean of std/mean over pixels with a defined relative spread.
    pub mean_relative_std: f64,
    /// Fraction of pixels whose mean was too small for a relative spread.
    pub absent_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ReportConfig,
    pub n_patches: usize,
    pub global: GlobalMetrics,
    pub wind_bins: Vec<WindBinMetrics>,
    pub stations: BTreeMap<String, GroupMetrics>,
    pub region_cells: BTreeMap<String, GroupMetrics>,
    pub sweep: SweepTable,
    /// Filled when several checkpoints were evaluated together.
    #[serde(default)]
    pub ensemble: Option<EnsembleSummary>,
    pub notes: Vec<String>,
}

/// Build the full report from per-patch records.
pub fn build_report(
    patches: &[PatchEval],
    config: &ReportConfig,
) -> Result<MetricsReport, EvalError> {
    if patches.is_empty() {
        return Err(EvalError::EmptyInput("no patches to report on"));
    }
    let mut notes = Vec::new();
    let truth: Vec<bool> = patches.iter().map(|p| p.truth_flag).collect();
    let pred: Vec<bool> = patches.iter().map(|p| p.pred_flag).collect();
    let counts = ConfusionCounts::from_flags(&truth, &pred)?;
    let global_prf = counts.prf();
    let f1_ci = bootstrap_ci(
        patches.len(),
        |idx| {
            let t: Vec<bool> = idx.iter().map(|i| truth[*i]).collect();
            let p: Vec<bool> = idx.iter().map(|i| pred[*i]).collect();
            ConfusionCounts::from_flags(&t, &p).ok()?.prf().f1
        },
        config.bootstrap_resamples,
        config.confidence_level,
        config.seed,
    )
    // The reported interval always brackets the point estimate.
    .map(|(lo, hi)| match global_prf.f1 {
        Some(point) => (lo.min(point), hi.max(point)),
        None => (lo, hi),
    });

    let max_true: Vec<f64> = patches.iter().map(|p| p.max_true).collect();
    let max_pred: Vec<f64> = patches.iter().map(|p| p.max_pred).collect();
    let max_scatter = match scatter_stats(&max_true, &max_pred) {
        Ok(s) => Some(s),
        Err(e) => {
            notes.push(format!("max-rain scatter unavailable: {e}"));
            None
        }
    };

    let wind_bins = wind_binned_metrics(
        patches,
        &config.wind_bin_edges,
        config.reference_prevalence,
        config.bootstrap_resamples,
        config.confidence_level,
        config.seed,
    )?;
    let sweep = threshold_sweep(
        patches,
        &config.thresholds,
        &config.wind_bin_edges,
        config.area_fraction,
    )?;

    Ok(MetricsReport {
        config: config.clone(),
        n_patches: patches.len(),
        global: GlobalMetrics {
            counts,
            prf: global_prf,
            f1_ci,
            max_scatter,
        },
        wind_bins,
        stations: station_metrics(patches),
        region_cells: region_cell_metrics(patches, config.region_stride_deg),
        sweep,
        ensemble: None,
        notes,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        write_file(path, &text)
    }

    /// Write the CSV table set next to the JSON: global, wind bins, sweep,
    /// best thresholds, stations, region cells.
    pub fn save_csv_tables(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut global = String::from(
            "n_patches,tp,fp,fn,tn,precision,recall,f1,f1_ci_lo,f1_ci_hi,pcc,rmse_mmh,slope\n",
        );
        let c = &self.global.counts;
        let s = self.global.max_scatter.as_ref();
        global.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.n_patches,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            opt_cell(self.global.prf.precision),
            opt_cell(self.global.prf.recall),
            opt_cell(self.global.prf.f1),
            opt_cell(self.global.f1_ci.map(|ci| ci.0)),
            opt_cell(self.global.f1_ci.map(|ci| ci.1)),
            opt_cell(s.map(|x| x.pcc)),
            opt_cell(s.map(|x| x.rmse_mmh)),
            opt_cell(s.map(|x| x.slope)),
        ));
        write_file(&dir.join("global.csv"), &global)?;

        let mut wind = String::from(
            "lo,hi,support_pos,support_neg,precision,recall,f1,w_precision,w_recall,w_f1,f1_ci_lo,f1_ci_hi,note\n",
        );
        for b in &self.wind_bins {
            let u = b.unweighted.as_ref();
            let w = b.weighted.as_ref();
            wind.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                b.lo,
                b.hi,
                b.support_pos,
                b.support_neg,
                opt_cell(u.and_then(|x| x.precision)),
                opt_cell(u.and_then(|x| x.recall)),
                opt_cell(u.and_then(|x| x.f1)),
                opt_cell(w.and_then(|x| x.precision)),
                opt_cell(w.and_then(|x| x.recall)),
                opt_cell(w.and_then(|x| x.f1)),
                opt_cell(b.f1_ci.map(|ci| ci.0)),
                opt_cell(b.f1_ci.map(|ci| ci.1)),
                b.note.clone().unwrap_or_default(),
            ));
        }
        write_file(&dir.join("wind_bins.csv"), &wind)?;

        let mut sweep =
            String::from("bin_lo,bin_hi,threshold,tp,fp,fn,tn,precision,recall,f1\n");
        for r in &self.sweep.rows {
            sweep.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.bin_lo,
                r.bin_hi,
                r.threshold,
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.counts.tn,
                opt_cell(r.prf.precision),
                opt_cell(r.prf.recall),
                opt_cell(r.prf.f1),
            ));
        }
        write_file(&dir.join("sweep.csv"), &sweep)?;

        let mut best = String::from("bin_lo,bin_hi,best_threshold,best_f1\n");
        for b in &self.sweep.best {
            best.push_str(&format!(
                "{},{},{},{}\n",
                b.bin_lo,
                b.bin_hi,
                opt_cell(b.threshold),
                opt_cell(b.f1),
            ));
        }
        write_file(&dir.join("best_thresholds.csv"), &best)?;

        for (name, groups) in [("stations.csv", &self.stations), ("region_cells.csv", &self.region_cells)] {
            let mut table = String::from("group,support_pos,support_neg,precision,recall,f1\n");
            for (key, m) in groups {
                table.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    key,
                    m.support_pos,
                    m.support_neg,
                    opt_cell(m.prf.precision),
                    opt_cell(m.prf.recall),
                    opt_cell(m.prf.f1),
                ));
            }
            write_file(&dir.join(name), &table)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: usize, cols: usize, fill: f32) -> Array2<f32> {
        Array2::from_elem((rows, cols), fill)
    }

    #[test]
    fn categorize_matches_area_convention() {
        let ocean = arr(4, 5, 1.0);
        assert!(categorize(&arr(4, 5, 10.0), &ocean, 3.0, 0.05).unwrap());
        assert!(!categorize(&arr(4, 5, 0.0), &ocean, 3.0, 0.05).unwrap());
        // Exactly 5% above the threshold is not enough: 1 of 20 pixels.
        let mut rain = arr(4, 5, 0.0);
        rain[[0, 0]] = 10.0;
        assert!(!categorize(&rain, &ocean, 3.0, 0.05).unwrap());
        // Two of twenty (10%) is.
        rain[[0, 1]] = 10.0;
        assert!(categorize(&rain, &ocean, 3.0, 0.05).unwrap());
        // Rain exactly at the threshold does not count (strict inequality).
        assert!(!categorize(&arr(4, 5, 3.0), &ocean, 3.0, 0.05).unwrap());
    }

    #[test]
    fn categorize_rejects_all_land_patches() {
        let err = categorize(&arr(2, 2, 5.0), &arr(2, 2, 0.0), 3.0, 0.05).unwrap_err();
        assert!(matches!(err, EvalError::NoOcean));
    }

    #[test]
    fn categorize_ignores_land_pixels() {
        // Rain over land must not flip the category.
        let mut rain = arr(2, 2, 0.0);
        rain[[0, 0]] = 50.0;
        let mut ocean = arr(2, 2, 1.0);
        ocean[[0, 0]] = 0.0;
        assert!(!categorize(&rain, &ocean, 3.0, 0.05).unwrap());
    }

    #[test]
    fn prf_hand_counts() {
        let truth = [true, true, true, true, false, false];
        let pred = [true, true, false, false, true, false];
        let v = prf(&truth, &pred).unwrap();
        assert_eq!(v.precision, Some(2.0 / 3.0));
        assert_eq!(v.recall, Some(0.5));
        assert_eq!(v.f1, Some(4.0 / 7.0));
    }

    #[test]
    fn prf_perfect_prediction() {
        let z = [true, false, true];
        let v = prf(&z, &z).unwrap();
        assert_eq!(v.precision, Some(1.0));
        assert_eq!(v.recall, Some(1.0));
        assert_eq!(v.f1, Some(1.0));
    }

    #[test]
    fn prf_degenerate_cases_are_absent_not_zero() {
        // No positive predictions: precision absent, recall 0, F1 0.
        let v = prf(&[true, true, false], &[false, false, false]).unwrap();
        assert_eq!(v.precision, None);
        assert_eq!(v.recall, Some(0.0));
        assert_eq!(v.f1, Some(0.0));
        // No positives anywhere: everything absent.
        let v = prf(&[false, false], &[false, false]).unwrap();
        assert_eq!(v.precision, None);
        assert_eq!(v.recall, None);
        assert_eq!(v.f1, None);
    }

    #[test]
    fn f1_equals_harmonic_mean_of_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let truth: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.4)).collect();
            let pred: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.5)).collect();
            let v = prf(&truth, &pred).unwrap();
            if let (Some(p), Some(r)) = (v.precision, v.recall) {
                if p + r > 0.0 {
                    let harmonic = 2.0 * p * r / (p + r);
                    assert!((v.f1.unwrap() - harmonic).abs() < 1e-12);
                }
            }
        }
    }

    fn eval_patch(wind: f64, truth_flag: bool, pred_flag: bool) -> PatchEval {
        PatchEval {
            iw_id: "IW".into(),
            wind_prior_ms: wind,
            center_lat: 30.0,
            center_lon: -80.0,
            station_id: Some("KJAX".into()),
            truth_flag,
            pred_flag,
            max_true: if truth_flag { 20.0 } else { 0.5 },
            max_pred: if pred_flag { 18.0 } else { 0.4 },
            mean_true: 1.0,
            mean_pred: 1.0,
            truth_above: vec![],
            pred_above: vec![],
        }
    }

    #[test]
    fn prevalence_weights_match_hand_computation() {
        // Bin prevalence 0.5, reference 0.25: rain ×0.5, rainless ×1.5.
        let truth = [true, true, false, false];
        let (w_pos, w_neg) = prevalence_weights(&truth, 0.25).unwrap();
        assert_eq!(w_pos, 0.5);
        assert_eq!(w_neg, 1.5);
        // Total mass preserved: 2·0.5 + 2·1.5 = 4.
        assert_eq!(w_pos * 2.0 + w_neg * 2.0, 4.0);
        // Single-class bins have no defined reweighting.
        assert!(prevalence_weights(&[true, true], 0.25).is_none());
        assert!(prevalence_weights(&[false, false], 0.25).is_none());
    }

    #[test]
    fn reweighting_to_own_prevalence_is_identity() {
        let truth = [true, true, false, false, false, true];
        let pred = [true, false, true, false, false, true];
        let plain = prf(&truth, &pred).unwrap();
        let weighted = weighted_prf(&truth, &pred, 0.5).unwrap();
        assert!((weighted.precision.unwrap() - plain.precision.unwrap()).abs() < 1e-12);
        assert!((weighted.recall.unwrap() - plain.recall.unwrap()).abs() < 1e-12);
        assert!((weighted.f1.unwrap() - plain.f1.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wind_bins_report_empty_and_single_class_as_absent() {
        let patches = vec![
            eval_patch(2.0, true, true),
            eval_patch(3.0, false, false),
            eval_patch(2.5, true, false),
            eval_patch(9.0, true, true), // single-class bin [8,12)
        ];
        let bins =
            wind_binned_metrics(&patches, &[0.0, 4.0, 8.0, 12.0], None, 50, 0.95, 1).unwrap();
        assert_eq!(bins.len(), 3);
        assert!(bins[0].unweighted.is_some());
        assert!(bins[0].weighted.is_some());
        // [4,8) is empty.
        assert_eq!(bins[1].support_pos + bins[1].support_neg, 0);
        assert!(bins[1].unweighted.is_none());
        assert!(bins[1].note.as_deref() == Some("empty bin"));
        // [8,12) has only raining patches: weighting undefined.
        assert!(bins[2].unweighted.is_some());
        assert!(bins[2].weighted.is_none());
        assert!(bins[2].note.is_some());
    }

    #[test]
    fn out_of_range_wind_is_an_error() {
        let patches = vec![eval_patch(25.0, true, true)];
        let err = wind_binned_metrics(&patches, &[0.0, 20.0], None, 10, 0.95, 1).unwrap_err();
        assert!(matches!(err, EvalError::WindOutOfRange { value, .. } if value == 25.0));
    }

    #[test]
    fn bootstrap_constant_metric_collapses_to_a_point() {
        let ci = bootstrap_ci(10, |_| Some(0.7), 100, 0.95, 42).unwrap();
        assert_eq!(ci, (0.7, 0.7));
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let values: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_mean_ci(&values, 200, 0.95, 9).unwrap();
        let b = bootstrap_mean_ci(&values, 200, 0.95, 9).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_mean_ci(&values, 200, 0.95, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_two_samples_is_defined() {
        let ci = bootstrap_mean_ci(&[1.0, 3.0], 100, 0.95, 5).unwrap();
        assert!(ci.0 >= 1.0 && ci.1 <= 3.0 && ci.0 <= ci.1);
    }

    #[test]
    fn bootstrap_interval_widens_as_samples_shrink() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..1.0)).collect();
        let wide = bootstrap_mean_ci(&values, 400, 0.95, 7).unwrap();
        let narrow_subset = &values[..50];
        let narrow = bootstrap_mean_ci(narrow_subset, 400, 0.95, 7).unwrap();
        assert!(
            narrow.1 - narrow.0 >= wide.1 - wide.0,
            "50-sample CI {narrow:?} should be wider than 400-sample CI {wide:?}"
        );
    }

    #[test]
    fn scatter_stats_on_exact_and_scaled_predictions() {
        let truth: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = scatter_stats(&truth, &truth).unwrap();
        assert!((s.pcc - 1.0).abs() < 1e-12);
        assert_eq!(s.rmse_mmh, 0.0);
        assert!((s.slope - 1.0).abs() < 1e-12);

        let scaled: Vec<f64> = truth.iter().map(|t| 0.69 * t).collect();
        let s = scatter_stats(&truth, &scaled).unwrap();
        assert!((s.slope - 0.69).abs() < 1e-12);
        assert!((s.pcc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_pcc_is_invariant_under_positive_affine_maps() {
        let truth = [1.0, 4.0, 2.0, 8.0, 5.0];
        let pred = [0.5, 3.0, 2.5, 7.0, 4.0];
        let base = scatter_stats(&truth, &pred).unwrap();
        let scaled_pred: Vec<f64> = pred.iter().map(|p| 2.5 * p + 3.0).collect();
        let scaled_truth: Vec<f64> = truth.iter().map(|t| 0.3 * t + 1.0).collect();
        let s1 = scatter_stats(&truth, &scaled_pred).unwrap();
        let s2 = scatter_stats(&scaled_truth, &pred).unwrap();
        assert!((s1.pcc - base.pcc).abs() < 1e-12);
        assert!((s2.pcc - base.pcc).abs() < 1e-12);
    }

    #[test]
    fn scatter_rejects_constant_series() {
        let err = scatter_stats(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, EvalError::DegenerateInput(_)));
    }

    #[test]
    fn scatter_matches_alternative_moment_formulation() {
        // Cross-check the centered-sum implementation against raw moments.
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let truth: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..40.0)).collect();
        let pred: Vec<f64> = truth
            .iter()
            .map(|t| 0.8 * t + rng.gen_range(-3.0..3.0))
            .collect();
        let s = scatter_stats(&truth, &pred).unwrap();
        let n = truth.len() as f64;
        let (mut st, mut sp, mut stt, mut spp, mut stp, mut sq) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (t, p) in truth.iter().zip(&pred) {
            st += t;
            sp += p;
            stt += t * t;
            spp += p * p;
            stp += t * p;
            sq += (p - t) * (p - t);
        }
        let cov = stp / n - (st / n) * (sp / n);
        let var_t = stt / n - (st / n) * (st / n);
        let var_p = spp / n - (sp / n) * (sp / n);
        assert!((s.pcc - cov / (var_t.sqrt() * var_p.sqrt())).abs() < 1e-10);
        assert!((s.slope - cov / var_t).abs() < 1e-10);
        assert!((s.rmse_mmh - (sq / n).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn ensemble_stats_hand_case() {
        let runs = vec![arr(2, 2, 1.0), arr(2, 2, 3.0)];
        let e = ensemble_stats(&runs).unwrap();
        assert_eq!(e.mean[[0, 0]], 2.0);
        assert_eq!(e.std[[1, 1]], 1.0);
        assert_eq!(e.relative[[0, 1]], 0.5);
        assert_eq!(e.absent_pixels, 0);
    }

    #[test]
    fn ensemble_identical_runs_have_zero_spread() {
        let runs = vec![arr(3, 3, 7.5); 4];
        let e = ensemble_stats(&runs).unwrap();
        assert!(e.std.iter().all(|v| *v == 0.0));
        assert!(e.relative.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ensemble_flags_near_zero_means_as_absent() {
        let runs = vec![arr(1, 2, 0.0), arr(1, 2, 0.0)];
        let e = ensemble_stats(&runs).unwrap();
        assert_eq!(e.absent_pixels, 2);
        assert!(e.relative.iter().all(|v| v.is_nan()));
        assert!(ensemble_stats(&[arr(1, 2, 0.0)]).is_err());
        assert!(ensemble_stats(&[arr(1, 2, 0.0), arr(2, 1, 0.0)]).is_err());
    }

    fn sweep_patch(wind: f64, truth_above: Vec<f64>, pred_above: Vec<f64>) -> PatchEval {
        PatchEval {
            truth_above,
            pred_above,
            ..eval_patch(wind, true, true)
        }
    }

    #[test]
    fn sweep_perfect_predictor_scores_one_where_both_classes_occur() {
        // Exceedance identical for truth and prediction at both thresholds;
        // patch 0 rains at both, patch 1 at neither.
        let patches = vec![
            sweep_patch(2.0, vec![0.5, 0.3], vec![0.5, 0.3]),
            sweep_patch(3.0, vec![0.0, 0.0], vec![0.0, 0.0]),
        ];
        let table = threshold_sweep(&patches, &[1.0, 3.0], &[0.0, 20.0], 0.05).unwrap();
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.prf.f1, Some(1.0));
        }
        assert_eq!(table.best.len(), 1);
        // First maximum on ties: the lower threshold wins.
        assert_eq!(table.best[0].threshold, Some(1.0));
    }

    #[test]
    fn half_scale_predictor_shifts_thresholds_by_two() {
        // With pred = 0.5·truth pixelwise, the fraction of prediction above
        // t equals the fraction of truth above 2t. Thresholds [1, 2]:
        // pred_above[1.0] must equal truth_above[2.0] for every patch, so
        // prediction flags at 1 reproduce truth flags at 2.
        let ocean = arr(1, 10, 1.0);
        let mut truth = arr(1, 10, 0.0);
        for j in 0..10 {
            truth[[0, j]] = j as f32 * 0.5; // 0.0 .. 4.5
        }
        let pred = truth.mapv(|v| 0.5 * v);
        let thresholds = [1.0, 2.0];
        let p = evaluate_patch(
            &truth,
            &pred,
            &ocean,
            PatchIdentity::default(),
            &thresholds,
            3.0,
            0.05,
        )
        .unwrap();
        assert_eq!(p.pred_above[0], p.truth_above[1]);
        let flag_pred_at_1 = p.pred_above[0] > 0.05;
        let flag_truth_at_2 = p.truth_above[1] > 0.05;
        assert_eq!(flag_pred_at_1, flag_truth_at_2);
    }

    #[test]
    fn single_threshold_sweep_is_one_row_per_bin() {
        let patches = vec![sweep_patch(2.0, vec![0.4], vec![0.2])];
        let table = threshold_sweep(&patches, &[3.0], &[0.0, 20.0], 0.05).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.best.len(), 1);
    }

    #[test]
    fn evaluate_patch_uses_ocean_pixels_only() {
        let mut truth = arr(2, 2, 0.0);
        truth[[0, 0]] = 30.0; // land pixel
        truth[[1, 1]] = 8.0;
        let mut pred = arr(2, 2, 1.0);
        pred[[0, 0]] = 99.0; // land pixel
        let mut ocean = arr(2, 2, 1.0);
        ocean[[0, 0]] = 0.0;
        let p = evaluate_patch(
            &truth,
            &pred,
            &ocean,
            PatchIdentity::default(),
            &[3.0],
            3.0,
            0.05,
        )
        .unwrap();
        assert_eq!(p.max_true, 8.0);
        assert_eq!(p.max_pred, 1.0);
        assert!((p.mean_true - 8.0 / 3.0).abs() < 1e-12);
        assert!(p.truth_flag);
        assert!(!p.pred_flag);
    }

    #[test]
    fn report_builds_saves_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut patches = Vec::new();
        for i in 0..40 {
            let wind = rng.gen_range(0.5..19.5);
            let truth_flag = rng.gen_bool(0.4);
            let pred_flag = if truth_flag {
                rng.gen_bool(0.8)
            } else {
                rng.gen_bool(0.1)
            };
            let mut p = eval_patch(wind, truth_flag, pred_flag);
            p.center_lat = 28.0 + (i % 3) as f64 * 4.0;
            p.max_true += rng.gen_range(0.0..5.0);
            p.max_pred += rng.gen_range(0.0..5.0);
            p.truth_above = vec![0.5, 0.3, 0.1];
            p.pred_above = vec![0.4, 0.25, 0.05];
            patches.push(p);
        }
        let cfg = ReportConfig {
            bootstrap_resamples: 100,
            ..ReportConfig::default()
        };
        let report = build_report(&patches, &cfg).unwrap();
        // Structural invariants.
        for v in [
            report.global.prf.precision,
            report.global.prf.recall,
            report.global.prf.f1,
        ] {
            let v = v.unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        let (lo, hi) = report.global.f1_ci.unwrap();
        let point = report.global.prf.f1.unwrap();
        assert!(lo <= point && point <= hi);
        assert_eq!(report.wind_bins.len(), 5);
        assert!(report.stations.contains_key("KJAX"));
        assert!(!report.region_cells.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        report.save_json(&json_path).unwrap();
        report.save_csv_tables(dir.path()).unwrap();
        for f in [
            "global.csv",
            "wind_bins.csv",
            "sweep.csv",
            "best_thresholds.csv",
            "stations.csv",
            "region_cells.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let text = std::fs::read_to_string(&json_path).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.n_patches, 40);
        assert_eq!(back.global.prf.f1, report.global.prf.f1);
    }
}
