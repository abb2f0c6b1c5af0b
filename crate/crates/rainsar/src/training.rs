//! Multi-objective training: the five-component loss, class-balanced
//! replacement sampling, the adversarial loop, and the validation schedule.
//!
//! One training run is strictly sequential — sample, forward, backward,
//! step — with every random draw taken from seeded generators, so a fixed
//! seed reproduces the run (bitwise in f64 mode).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    DatasetError, DatasetManifest, PatchRecord, PatchStore, Subset, RAIN_RATE_THRESHOLD,
};
use crate::model::{
    save_checkpoint, BoundDiscriminator, CheckpointInfo, Discriminator, Model, ModelError,
};
use crate::tensor::optim::{OptimError, ParamUpdate, RmsProp, RmsPropConfig};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Wind classes × rain flag.
pub const CLASS_COUNT: usize = 10;
/// The discriminator trains only on samples closer than this to the radar
/// station, where ground truth is most reliable.
pub const DISC_MAX_STATION_KM: f64 = 80.0;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("class {class_id} has no records to sample from")]
    EmptyClass { class_id: u8 },
    #[error("non-finite {component} at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },
    #[error("invalid training setup: {reason}")]
    BadSetup { reason: String },
    #[error("patch from '{key}' is {found_px} px, batch expects {expected_px} px")]
    MixedPatchSizes {
        key: String,
        found_px: usize,
        expected_px: usize,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Weights of the five loss components:
/// total = a·L_rr + b·L_seg + c·L_max + d·L_mean + e·L_D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            a: 5.0,
            b: 1.0 / 15.0,
            c: 1.0 / 40.0,
            d: 1.0 / 40.0,
            e: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let all = [self.a, self.b, self.c, self.d, self.e];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainingError::BadSetup {
                reason: format!("loss weights must be finite and ≥ 0, got {all:?}"),
            });
        }
        Ok(())
    }

    pub fn adversarial(&self) -> bool {
        self.e > 0.0
    }
}

impl std::str::FromStr for LossWeights {
    type Err = String;

    /// Parse "a,b,c,d,e".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(format!("expected 5 comma-separated weights, got {}", parts.len()));
        }
        let mut vals = [0.0f64; 5];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p.parse().map_err(|e| format!("bad weight '{p}': {e}"))?;
        }
        Ok(LossWeights {
            a: vals[0],
            b: vals[1],
            c: vals[2],
            d: vals[3],
            e: vals[4],
        })
    }
}

/// Input-ablation switch: the named input is zeroed at batch assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropInput {
    /// ssr_vv image channel.
    Vv,
    /// ssr_vh image channel.
    Vh,
    /// land-mask image channel (the loss mask itself is never dropped).
    Mask,
    /// noise-floor scalar.
    Nesz,
    /// incidence-angle scalar.
    Inc,
    /// wind-prior scalar.
    Wspd,
}

impl DropInput {
    pub const ALL: [DropInput; 6] = [
        DropInput::Vv,
        DropInput::Vh,
        DropInput::Mask,
        DropInput::Nesz,
        DropInput::Inc,
        DropInput::Wspd,
    ];
}

impl std::str::FromStr for DropInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vv" => Ok(DropInput::Vv),
            "vh" => Ok(DropInput::Vh),
            "mask" => Ok(DropInput::Mask),
            "nesz" => Ok(DropInput::Nesz),
            "inc" => Ok(DropInput::Inc),
            "wspd" => Ok(DropInput::Wspd),
            other => Err(format!(
                "unknown input '{other}' (expected vv|vh|mask|nesz|inc|wspd)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Samples per batch; must divide evenly into the 10 classes.
    pub batch_size: usize,
    /// Batches between validations.
    pub validation_every: usize,
    /// Balanced batches per validation pass.
    pub validation_batches: usize,
    /// Total validations; training stops after the last.
    pub max_validations: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 20,
            validation_every: 512,
            validation_batches: 256,
            max_validations: 100,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 || self.batch_size % CLASS_COUNT != 0 {
            return Err(TrainingError::BadSetup {
                reason: format!(
                    "batch_size {} must be a positive multiple of {CLASS_COUNT}",
                    self.batch_size
                ),
            });
        }
        if self.validation_every == 0 || self.validation_batches == 0 || self.max_validations == 0
        {
            return Err(TrainingError::BadSetup {
                reason: "validation_every, validation_batches, max_validations must be ≥ 1".into(),
            });
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.batch_size / CLASS_COUNT
    }

    pub fn total_steps(&self) -> usize {
        self.validation_every * self.max_validations
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub drop_inputs: Vec<DropInput>,
    /// Use the signed per-patch mean difference for L_mean instead of its
    /// absolute value.
    pub signed_mean: bool,
    pub optimizer: RmsPropConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            weights: LossWeights::default(),
            drop_inputs: Vec::new(),
            signed_mean: false,
            optimizer: RmsPropConfig::default(),
        }
    }
}

// ---- sampling ----

/// Class pools: indices (into the given record slice) of sampleable records
/// per class. All-land patches are excluded — their masked losses carry no
/// signal.
pub fn class_pools(records: &[&PatchRecord]) -> [Vec<usize>; CLASS_COUNT] {
    let mut pools: [Vec<usize>; CLASS_COUNT] = Default::default();
    for (i, r) in records.iter().enumerate() {
        if r.ocean_fraction > 0.0 && (r.class_id as usize) < CLASS_COUNT {
            pools[r.class_id as usize].push(i);
        }
    }
    pools
}

/// Fill empty classes by borrowing the nearest wind class with the same
/// rain flag (preferring the lower neighbor on ties). Returns the patched
/// pools and a human-readable note per merge. Errors only when a rain flag
/// has no records at all.
pub fn merge_empty_classes(
    pools: [Vec<usize>; CLASS_COUNT],
    ) -> Result<([Vec<usize>; CLASS_COUNT], Vec<String>), TrainingError> {
    let mut out = pools.clone();
    let mut log = Vec::new();
    for c in 0..CLASS_COUNT {
        if !pools[c].is_empty() {
            continue;
        }
        let wind = c % 5;
        let rain = c / 5;
        let mut donor = None;
        'search: for delta in 1..5usize {
            for cand_wind in [wind.checked_sub(delta), Some(wind + delta)]
                .into_iter()
                .flatten()
            {
                if cand_wind > 4 {
                    continue;
                }
                let cand = rain * 5 + cand_wind;
                if !pools[cand].is_empty() {
                    donor = Some(cand);
                    break 'search;
                }
            }
        }
        match donor {
            Some(d) => {
                log.push(format!(
                    "class {c} is empty; sampling borrows class {d} (nearest wind class, same rain flag)"
                ));
                out[c] = pools[d].clone();
            }
            None => return Err(TrainingError::EmptyClass { class_id: c as u8 }),
        }
    }
    Ok((out, log))
}

/// Draw `per_class` records uniformly with replacement from every class, in
/// class order. Pools must be non-empty (see [`merge_empty_classes`]).
pub fn balanced_sample(
    pools: &[Vec<usize>; CLASS_COUNT],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TrainingError> {
    let mut batch = Vec::with_capacity(per_class * CLASS_COUNT);
    for (c, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(TrainingError::EmptyClass { class_id: c as u8 });
        }
        for _ in 0..per_class {
            batch.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    Ok(batch)
}

// ---- batch assembly ----

/// Model-ready tensors for one batch.
pub struct BatchTensors<T> {
    /// [N, 3, H, W]: ssr_vv, ssr_vh, land mask (ablations may zero some).
    pub x_im: Tensor<T>,
    /// [N, 3]: incidence, nesz, wind prior (ablations may zero some).
    pub x_sc: Tensor<T>,
    /// [N, 1, H, W]: rain truth, missing already mapped to 0.
    pub y: Tensor<T>,
    /// [N, 1, H, W]: 1 over ocean — the loss mask, never ablated.
    pub mask: Tensor<T>,
}

/// Cut and stack the records' pixel data. Dropped inputs are zeroed here,
/// at assembly, so the network architecture never changes across ablations.
pub fn assemble_batch<T: Real>(
    records: &[&PatchRecord],
    store: &mut PatchStore,
    drop: &[DropInput],
) -> Result<BatchTensors<T>, TrainingError> {
    if records.is_empty() {
        return Err(TrainingError::BadSetup {
            reason: "empty batch".into(),
        });
    }
    let size = records[0].size_px;
    let plane = size * size;
    let n = records.len();
    let dropped = |d: DropInput| drop.contains(&d);
    let mut x_im = vec![T::zero(); n * 3 * plane];
    let mut x_sc = vec![T::zero(); n * 3];
    let mut y = vec![T::zero(); n * plane];
    let mut mask = vec![T::zero(); n * plane];
    for (i, rec) in records.iter().enumerate() {
        let data = store.patch(rec)?;
        if data.rain.dim() != (size, size) {
            return Err(TrainingError::MixedPatchSizes {
                key: rec.source.clone(),
                found_px: data.rain.dim().0,
                expected_px: size,
            });
        }
        let mut write_plane = |channel: usize, src: &ndarray::Array2<f32>, zero: bool| {
            let base = (i * 3 + channel) * plane;
            for (j, v) in src.iter().enumerate() {
                x_im[base + j] = if zero { T::zero() } else { T::cast(*v as f64) };
            }
        };
        write_plane(0, &data.ssr_vv, dropped(DropInput::Vv));
        write_plane(1, &data.ssr_vh, dropped(DropInput::Vh));
        write_plane(2, &data.land_mask, dropped(DropInput::Mask));
        for (j, v) in data.rain.iter().enumerate() {
            y[i * plane + j] = T::cast(*v as f64);
        }
        for (j, v) in data.land_mask.iter().enumerate() {
            mask[i * plane + j] = T::cast(*v as f64);
        }
        let sc = [
            (data.scalars[0], DropInput::Inc),
            (data.scalars[1], DropInput::Nesz),
            (data.scalars[2], DropInput::Wspd),
        ];
        for (j, (v, d)) in sc.iter().enumerate() {
            x_sc[i * 3 + j] = if dropped(*d) { T::zero() } else { T::cast(*v) };
        }
    }
    Ok(BatchTensors {
        x_im: Tensor::from_vec(&[n, 3, size, size], x_im),
        x_sc: Tensor::from_vec(&[n, 3], x_sc),
        y: Tensor::from_vec(&[n, 1, size, size], y),
        mask: Tensor::from_vec(&[n, 1, size, size], mask),
    })
}

// ---- losses ----

/// Graph nodes of the loss components and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_rr: Var,
    pub l_seg: Var,
    pub l_max: Var,
    pub l_mean: Var,
    pub l_d: Option<Var>,
    pub total: Var,
}

/// Evaluated loss values for logging and checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_rr: f64,
    pub l_seg: f64,
    pub l_max: f64,
    pub l_mean: f64,
    pub l_d: Option<f64>,
    pub total: f64,
}

/// The weighted combination: a·L_rr + b·L_seg + c·L_max + d·L_mean + e·L_D.
pub fn loss_total(
    l_rr: f64,
    l_seg: f64,
    l_max: f64,
    l_mean: f64,
    l_d: f64,
    w: &LossWeights,
) -> f64 {
    w.a * l_rr + w.b * l_seg + w.c * l_max + w.d * l_mean + w.e * l_d
}

/// Build all loss components over a batch.
///
/// - L_rr: batch mean of per-sample √(masked MSE of `y_rr` vs `y_true`);
/// - L_seg: masked binary cross-entropy of the segmentation logits against
///   (y_true > 3 mm/h), computed stably from logits;
/// - L_max: batch mean of (masked max y_true − masked max y_rr)²;
/// - L_mean: batch mean of |masked mean (y_true − y_rr)| (signed variant by
///   flag);
/// - L_D: mean discriminator score of `y_rr`, when a discriminator is bound.
///
/// Samples whose mask is empty contribute exactly zero to every masked
/// component. Every component value is checked finite; the first non-finite
/// one is reported by name with the training step.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    mask: Var,
    seg_logits: Var,
    y_rr: Var,
    disc: Option<&BoundDiscriminator<'_, T>>,
    weights: &LossWeights,
    signed_mean: bool,
    step: usize,
) -> Result<(LossNodes, LossValues), TrainingError> {
    // L_rr
    let resid = g.sub(y_rr, y_true)?;
    let sq = g.square(resid);
    let mse = g.masked_mean_per_sample(sq, mask)?;
    let rmse = g.sqrt(mse);
    let l_rr = g.mean_all(rmse)?;

    // L_seg: targets are constants derived from the truth raster.
    let thresh = T::cast(RAIN_RATE_THRESHOLD);
    let target_data: Vec<T> = g
        .value(y_true)
        .iter()
        .map(|v| if *v > thresh { T::one() } else { T::zero() })
        .collect();
    let shape = g.value(y_true).shape().to_vec();
    let target = g.leaf(Tensor::from_vec(&shape, target_data), false);
    // softplus(z) − t·z = −[t·log σ(z) + (1−t)·log(1−σ(z))], stable in z.
    let sp = g.softplus(seg_logits);
    let tz = g.mul(target, seg_logits)?;
    let bce = g.sub(sp, tz)?;
    let bce_per_sample = g.masked_mean_per_sample(bce, mask)?;
    let l_seg = g.mean_all(bce_per_sample)?;

    // L_max
    let max_true = g.masked_max_per_sample(y_true, mask)?;
    let max_pred = g.masked_max_per_sample(y_rr, mask)?;
    let max_diff = g.sub(max_true, max_pred)?;
    let max_sq = g.square(max_diff);
    let l_max = g.mean_all(max_sq)?;

    // L_mean
    let diff = g.sub(y_true, y_rr)?;
    let per_sample_mean = g.masked_mean_per_sample(diff, mask)?;
    let l_mean = if signed_mean {
        g.mean_all(per_sample_mean)?
    } else {
        let abs = g.abs(per_sample_mean);
        g.mean_all(abs)?
    };

    // L_D
    let l_d = match disc {
        Some(d) => {
            let scores = d.score(g, y_rr)?;
            Some(g.mean_all(scores)?)
        }
        None => None,
    };

    let mut total = g.mul_scalar(l_rr, T::cast(weights.a));
    let t = g.mul_scalar(l_seg, T::cast(weights.b));
    total = g.add(total, t)?;
    let t = g.mul_scalar(l_max, T::cast(weights.c));
    total = g.add(total, t)?;
    let t = g.mul_scalar(l_mean, T::cast(weights.d));
    total = g.add(total, t)?;
    if let Some(ld) = l_d {
        let t = g.mul_scalar(ld, T::cast(weights.e));
        total = g.add(total, t)?;
    }

    let item = |v: Var| g.value(v).item().to_f64_lossy();
    let values = LossValues {
        l_rr: item(l_rr),
        l_seg: item(l_seg),
        l_max: item(l_max),
        l_mean: item(l_mean),
        l_d: l_d.map(item),
        total: item(total),
    };
    for (name, v) in [
        ("L_rr", values.l_rr),
        ("L_seg", values.l_seg),
        ("L_max", values.l_max),
        ("L_mean", values.l_mean),
        ("L_D", values.l_d.unwrap_or(0.0)),
        ("total loss", values.total),
    ] {
        if !v.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                component: name,
                step,
            });
        }
    }

    Ok((
        LossNodes {
            l_rr,
            l_seg,
            l_max,
            l_mean,
            l_d,
            total,
        },
        values,
    ))
}

// ---- the training loop ----

#[derive(Debug, Clone, Serialize)]
pub struct ValidationRow {
    pub validation: usize,
    pub step: usize,
    pub train: LossValues,
    pub val: LossValues,
    pub wall_clock_s: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub validations: Vec<ValidationRow>,
    /// Index into `validations` of the best (lowest) validation total.
    pub best_validation: usize,
    pub best_val_total: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Class-merge and adversarial-availability notes.
    pub notes: Vec<String>,
}

#[derive(Default)]
struct LossAccum {
    l_rr: f64,
    l_seg: f64,
    l_max: f64,
    l_mean: f64,
    l_d: f64,
    has_d: bool,
    total: f64,
    count: usize,
}

impl LossAccum {
    fn add(&mut self, v: &LossValues) {
        self.l_rr += v.l_rr;
        self.l_seg += v.l_seg;
        self.l_max += v.l_max;
        self.l_mean += v.l_mean;
        if let Some(d) = v.l_d {
            self.l_d += d;
            self.has_d = true;
        }
        self.total += v.total;
        self.count += 1;
    }

    fn mean(&self) -> LossValues {
        let n = self.count.max(1) as f64;
        LossValues {
            l_rr: self.l_rr / n,
            l_seg: self.l_seg / n,
            l_max: self.l_max / n,
            l_mean: self.l_mean / n,
            l_d: self.has_d.then_some(self.l_d / n),
            total: self.total / n,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(row: &ValidationRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        row.validation,
        row.step,
        row.train.l_rr,
        row.train.l_seg,
        row.train.l_max,
        row.train.l_mean,
        fmt_opt(row.train.l_d),
        row.train.total,
        row.val.l_rr,
        row.val.l_seg,
        row.val.l_max,
        row.val.l_mean,
        fmt_opt(row.val.l_d),
        row.val.total,
        row.wall_clock_s,
    )
}

pub const LOG_HEADER: &str = "validation,step,train_l_rr,train_l_seg,train_l_max,train_l_mean,train_l_d,train_total,val_l_rr,val_l_seg,val_l_max,val_l_mean,val_l_d,val_total,wall_clock_s\n";

/// Collect gradients for bound parameters, preserving parameter order.
fn collect_grads<T: Real>(
    g: &Graph<T>,
    vars: impl Iterator<Item = Var>,
    shapes: &[Vec<usize>],
) -> Vec<Tensor<T>> {
    vars.enumerate()
        .map(|(i, v)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shapes[i]))
        })
        .collect()
}

fn step_params<T: Real>(
    opt: &mut RmsProp<T>,
    params: &mut [crate::model::Parameter<T>],
    grads: &[Tensor<T>],
) -> Result<(), OptimError> {
    let mut entries: Vec<ParamUpdate<'_, T>> = params
        .iter_mut()
        .zip(grads)
        .map(|(p, g)| ParamUpdate {
            name: p.name.as_str(),
            param: &mut p.value,
            grad: g,
        })
        .collect();
    opt.step(&mut entries)
}

/// One forward + loss evaluation with frozen parameters (validation).
#[allow(clippy::too_many_arguments)]
fn frozen_losses<T: Real>(
    model: &Model<T>,
    disc: Option<&Discriminator<T>>,
    batch: &BatchTensors<T>,
    weights: &LossWeights,
    signed_mean: bool,
    step: usize,
) -> Result<LossValues, TrainingError> {
    let mut g: Graph<T> = Graph::new();
    let bound = model.bind(&mut g, false);
    let bound_disc = disc.map(|d| d.bind(&mut g, false));
    let out = bound.forward(&mut g, &batch.x_im, &batch.x_sc)?;
    let yv = g.leaf(batch.y.clone(), false);
    let mv = g.leaf(batch.mask.clone(), false);
    let (_, values) = build_losses(
        &mut g,
        yv,
        mv,
        out.seg_logits,
        out.y_rr,
        bound_disc.as_ref(),
        weights,
        signed_mean,
        step,
    )?;
    Ok(values)
}

/// Run the full training schedule. The best checkpoint (lowest validation
/// total) is kept at `out_dir/best.ckpt`; the per-validation log is written
/// to `out_dir/training_log.csv` as it goes.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    manifest: &DatasetManifest,
    store: &mut PatchStore,
    model: &mut Model<T>,
    disc: &mut Discriminator<T>,
    schedule: &TrainSchedule,
    options: &TrainOptions,
    out_dir: &Path,
) -> Result<TrainReport, TrainingError> {
    schedule.validate()?;
    options.weights.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| TrainingError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let log_path = out_dir.join("training_log.csv");
    let checkpoint_path = out_dir.join("best.ckpt");
    let mut log_file = fs::File::create(&log_path).map_err(|source| TrainingError::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    log_file
        .write_all(LOG_HEADER.as_bytes())
        .map_err(|source| TrainingError::Io {
            path: log_path.display().to_string(),
            source,
        })?;

    let mut notes = Vec::new();

    let train_recs = manifest.subset_records(Subset::Train);
    let val_recs = manifest.subset_records(Subset::Val);
    let (train_pools, merge_log) = merge_empty_classes(class_pools(&train_recs))?;
    notes.extend(merge_log.into_iter().map(|m| format!("train: {m}")));
    let (val_pools, merge_log) = merge_empty_classes(class_pools(&val_recs))?;
    notes.extend(merge_log.into_iter().map(|m| format!("val: {m}")));

    // Adversarial setup: the discriminator trains on near-station samples.
    let close_recs: Vec<&PatchRecord> = train_recs
        .iter()
        .filter(|r| r.station_km.is_some_and(|d| d < DISC_MAX_STATION_KM))
        .copied()
        .collect();
    let mut adversarial = options.weights.adversarial();
    let close_pools = if adversarial {
        if close_recs.is_empty() {
            notes.push(format!(
                "no training records within {DISC_MAX_STATION_KM} km of a station; adversarial term disabled"
            ));
            adversarial = false;
            None
        } else {
            let (pools, merge_log) = merge_empty_classes(class_pools(&close_recs))?;
            notes.extend(merge_log.into_iter().map(|m| format!("discriminator: {m}")));
            Some(pools)
        }
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    // Validation draws come from an independent stream so the training
    // sequence does not depend on the validation cadence.
    let mut val_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5EED_1DE5_u64);

    let mut opt_model: RmsProp<T> = RmsProp::new(options.optimizer);
    let mut opt_disc: RmsProp<T> = RmsProp::new(options.optimizer);

    let per_class = schedule.per_class();
    let started = Instant::now();
    let mut train_accum = LossAccum::default();
    let mut validations: Vec<ValidationRow> = Vec::new();
    let mut best: Option<(usize, f64)> = None;

    let model_shapes: Vec<Vec<usize>> =
        model.params().iter().map(|p| p.value.shape().to_vec()).collect();
    let disc_shapes: Vec<Vec<usize>> =
        disc.params().iter().map(|p| p.value.shape().to_vec()).collect();

    for step in 1..=schedule.total_steps() {
        let batch_idx = balanced_sample(&train_pools, per_class, &mut rng)?;
        let batch_records: Vec<&PatchRecord> =
            batch_idx.iter().map(|i| train_recs[*i]).collect();
        let batch = assemble_batch::<T>(&batch_records, store, &options.drop_inputs)?;

        // Discriminator step: push real rain maps low and generated maps
        // high under the hinge objective, so the generator's L_D = E[D(ŷ)]
        // (which it minimizes) rewards realistic predictions.
        if adversarial {
            let pools = close_pools.as_ref().expect("set when adversarial");
            let close_idx = balanced_sample(pools, per_class, &mut rng)?;
            let close_batch_records: Vec<&PatchRecord> =
                close_idx.iter().map(|i| close_recs[*i]).collect();
            let close = assemble_batch::<T>(&close_batch_records, store, &options.drop_inputs)?;

            // Generate fakes with frozen weights, detached from the D graph.
            let fake = {
                let mut g: Graph<T> = Graph::new();
                let bound = model.bind(&mut g, false);
                let out = bound.forward(&mut g, &close.x_im, &close.x_sc)?;
                g.value(out.y_rr).clone()
            };

            let mut g: Graph<T> = Graph::new();
            let bound_disc = disc.bind(&mut g, true);
            let real_var = g.leaf(close.y.clone(), false);
            let fake_var = g.leaf(fake, false);
            let s_real = bound_disc.score(&mut g, real_var)?;
            let s_fake = bound_disc.score(&mut g, fake_var)?;
            let real_shift = g.add_scalar(s_real, T::one());
            let real_hinge = g.relu(real_shift);
            let real_term = g.mean_all(real_hinge)?;
            let fake_neg = g.neg(s_fake);
            let fake_shift = g.add_scalar(fake_neg, T::one());
            let fake_hinge = g.relu(fake_shift);
            let fake_term = g.mean_all(fake_hinge)?;
            let d_loss = g.add(real_term, fake_term)?;
            if !g.value(d_loss).item().is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    component: "discriminator loss",
                    step,
                });
            }
            g.backward(d_loss)?;
            let grads = collect_grads(&g, bound_disc.param_vars().map(|(_, v)| v), &disc_shapes);
            drop(g);
            step_params(&mut opt_disc, disc.params_mut(), &grads)?;
        }

        // Generator step on the full objective.
        let values = {
            let mut g: Graph<T> = Graph::new();
            let bound = model.bind(&mut g, true);
            let bound_disc = if adversarial {
                Some(disc.bind(&mut g, false))
            } else {
                None
            };
            let out = bound.forward(&mut g, &batch.x_im, &batch.x_sc)?;
            let yv = g.leaf(batch.y.clone(), false);
            let mv = g.leaf(batch.mask.clone(), false);
            let (nodes, values) = build_losses(
                &mut g,
                yv,
                mv,
                out.seg_logits,
                out.y_rr,
                bound_disc.as_ref(),
                &options.weights,
                options.signed_mean,
                step,
            )?;
            g.backward(nodes.total)?;
            let grads = collect_grads(&g, bound.param_vars().map(|(_, v)| v), &model_shapes);
            drop(g);
            step_params(&mut opt_model, model.params_mut(), &grads)?;
            values
        };
        train_accum.add(&values);

        if step % schedule.validation_every == 0 {
            let validation = validations.len() + 1;
            let mut val_accum = LossAccum::default();
            for _ in 0..schedule.validation_batches {
                let idx = balanced_sample(&val_pools, per_class, &mut val_rng)?;
                let recs: Vec<&PatchRecord> = idx.iter().map(|i| val_recs[*i]).collect();
                let vb = assemble_batch::<T>(&recs, store, &options.drop_inputs)?;
                let vals = frozen_losses(
                    model,
                    adversarial.then_some(&*disc),
                    &vb,
                    &options.weights,
                    options.signed_mean,
                    step,
                )?;
                val_accum.add(&vals);
            }
            let row = ValidationRow {
                validation,
                step,
                train: train_accum.mean(),
                val: val_accum.mean(),
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            log_file
                .write_all(csv_row(&row).as_bytes())
                .and_then(|_| log_file.flush())
                .map_err(|source| TrainingError::Io {
                    path: log_path.display().to_string(),
                    source,
                })?;

            let improved = best.is_none_or(|(_, b)| row.val.total < b);
            if improved {
                best = Some((validations.len(), row.val.total));
                let info = CheckpointInfo {
                    model: model.config().clone(),
                    optimizer: options.optimizer,
                    rng_seed: schedule.seed,
                    rng_word_pos: rng.get_word_pos(),
                };
                let params: Vec<(&str, &Tensor<T>)> = model
                    .params()
                    .iter()
                    .chain(disc.params().iter())
                    .map(|p| (p.name.as_str(), &p.value))
                    .collect();
                let accs: Vec<(&str, &Tensor<T>)> = opt_model
                    .accumulators()
                    .iter()
                    .chain(opt_disc.accumulators().iter())
                    .map(|(n, t)| (n.as_str(), t))
                    .collect();
                save_checkpoint(&checkpoint_path, &info, &params, &accs)?;
            }
            validations.push(row);
            train_accum = LossAccum::default();
        }
    }

    let (best_validation, best_val_total) = best.expect("at least one validation ran");
    Ok(TrainReport {
        validations,
        best_validation,
        best_val_total,
        checkpoint_path,
        log_path,
        notes,
    })
}
