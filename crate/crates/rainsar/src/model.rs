//! Three-headed fully-convolutional rain-retrieval network.
//!
//! An encoder/decoder with skip connections consumes three image channels
//! (ssr_vv, ssr_vh, land mask); three per-patch scalars (incidence, nesz,
//! wind prior) are spatialized to constant maps and concatenated at the
//! bottleneck. Two 1×1 heads emit a rain/no-rain probability map and a
//! non-negative rain-rate map. A separate strided-conv discriminator scores
//! rain maps during adversarial training.
//!
//! Final head layers are zero-initialized so an untrained model is exactly
//! neutral: probability 0.5 everywhere and a flat rain field.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, ContainerKind};
use crate::tensor::optim::RmsPropConfig;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    BadConfig { reason: String },
    #[error("{what}: expected {expected}, got {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Activation that enforces y_rr ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrActivation {
    /// Smooth near zero (default).
    Softplus,
    /// Exactly zero at zero logits.
    Relu,
}

/// How the non-negative head output maps to a rain rate in mm/h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrTransform {
    /// Head output parameterizes log(1 + rate); rate = expm1(head). The
    /// compression tames rainfall's heavy tail (default).
    Log1p,
    /// Head output is the rate directly.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Image input channels (ssr_vv, ssr_vh, land_mask).
    pub image_channels: usize,
    /// Per-patch scalar inputs (incidence, nesz, wind prior).
    pub scalar_inputs: usize,
    /// Encoder levels; total downsampling stride is 2^depth.
    pub depth: usize,
    /// Channel width of the first level; level i is base_channels · 2^i.
    pub base_channels: usize,
    pub rr_activation: RrActivation,
    pub rr_transform: RrTransform,
    /// Divisors normalizing the scalar inputs before spatialization.
    pub scalar_scale: Vec<f64>,
    /// Discriminator conv widths (each layer strides by 2).
    pub disc_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 3,
            scalar_inputs: 3,
            depth: 3,
            base_channels: 16,
            rr_activation: RrActivation::Softplus,
            rr_transform: RrTransform::Log1p,
            scalar_scale: vec![45.0, 30.0, 17.5],
            disc_channels: vec![8, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::BadConfig { reason });
        if self.depth < 1 {
            return fail("depth must be ≥ 1".into());
        }
        if self.base_channels == 0 {
            return fail("base_channels must be > 0".into());
        }
        if self.image_channels == 0 {
            return fail("image_channels must be > 0".into());
        }
        if self.scalar_scale.len() != self.scalar_inputs {
            return fail(format!(
                "scalar_scale has {} entries for {} scalar inputs",
                self.scalar_scale.len(),
                self.scalar_inputs
            ));
        }
        if self.scalar_scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return fail("scalar_scale entries must be finite and positive".into());
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return fail("disc_channels must be non-empty and positive".into());
        }
        Ok(())
    }

    /// Channel width of encoder/decoder level `i` (bottleneck at i = depth).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Widths (a, b) of the two convolutions in the block at `level`; both
    /// convs of a block share the level width.
    pub fn level_widths(&self, level: usize) -> (usize, usize) {
        (self.width(level), self.width(level))
    }

    /// Total downsampling stride 2^depth; input spatial dims must divide it.
    pub fn total_stride(&self) -> usize {
        1 << self.depth
    }

    /// Closed-form count of the main network's parameters.
    pub fn parameter_count(&self) -> usize {
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let mut n = 0;
        let mut in_ch = self.image_channels;
        for i in 0..self.depth {
            let w = self.width(i);
            n += conv(w, in_ch, 3) + conv(w, w, 3);
            in_ch = w;
        }
        let wb = self.width(self.depth);
        n += conv(wb, in_ch + self.scalar_inputs, 3) + conv(wb, wb, 3);
        for i in (0..self.depth).rev() {
            let w = self.width(i);
            let up_in = self.width(i + 1);
            n += up_in * w * 4 + w; // transposed conv 2×2
            n += conv(w, 2 * w, 3) + conv(w, w, 3);
        }
        n += 2 * (self.width(0) + 1); // two 1×1 heads
        n
    }

    /// Closed-form count of the discriminator's parameters.
    pub fn discriminator_parameter_count(&self) -> usize {
        let mut n = 0;
        let mut in_ch = 1;
        for c in &self.disc_channels {
            n += c * in_ch * 9 + c;
            in_ch = *c;
        }
        n + in_ch + 1 // 1×1 score head
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Draw He-uniform values (limit √(6 / fan_in)) in f64 and cast, so the
/// initialization stream is identical across training precisions.
fn he_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::cast(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data)
}

struct ConvRef {
    w: usize,
    b: usize,
}

struct Layout {
    enc: Vec<(ConvRef, ConvRef)>,
    bottleneck: (ConvRef, ConvRef),
    dec: Vec<(ConvRef, ConvRef, ConvRef)>, // (up, conv1, conv2), level depth-1 .. 0
    head_seg: ConvRef,
    head_rr: ConvRef,
}

/// Parameter factory shared by random and zero initialization.
struct Builder<T: Real> {
    params: Vec<Parameter<T>>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Real> Builder<T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> ConvRef {
        let shape = [cout, cin, k, k];
        let w = match (&mut self.rng, zero) {
            (Some(rng), false) => he_uniform(rng, &shape, cin * k * k),
            _ => Tensor::zeros(&shape),
        };
        self.params.push(Parameter {
            name: format!("{name}.w"),
            value: w,
        });
        self.params.push(Parameter {
            name: format!("{name}.b"),
            value: Tensor::zeros(&[cout]),
        });
        ConvRef {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }

    /// Transposed conv weights are stored [cin, cout, k, k].
    fn tconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvRef {
        let shape = [cin, cout, k, k];
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let w = match &mut self.rng {
            Some(rng) => he_uniform(rng, &shape, fan_in),
            None => Tensor::zeros(&shape),
        };
        self.params.push(Parameter {
            name: format!("{name}.w"),
            value: w,
        });
        self.params.push(Parameter {
            name: format!("{name}.b"),
            value: Tensor::zeros(&[cout]),
        });
        ConvRef {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }
}

/// The rain-retrieval network: configuration plus named parameters.
pub struct Model<T: Real> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Seeded random initialization (head layers zero).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// All-zero parameters (checkpoint-loading skeleton).
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let mut enc = Vec::new();
        let mut in_ch = config.image_channels;
        for i in 0..config.depth {
            let w = config.width(i);
            let c1 = b.conv(&format!("enc{i}.conv1"), w, in_ch, 3, false);
            let c2 = b.conv(&format!("enc{i}.conv2"), w, w, 3, false);
            enc.push((c1, c2));
            in_ch = w;
        }
        let wb = config.width(config.depth);
        let bottleneck = (
            b.conv(
                "bottleneck.conv1",
                wb,
                in_ch + config.scalar_inputs,
                3,
                false,
            ),
            b.conv("bottleneck.conv2", wb, wb, 3, false),
        );
        let mut dec = Vec::new();
        for i in (0..config.depth).rev() {
            let w = config.width(i);
            let up = b.tconv(&format!("dec{i}.up"), config.width(i + 1), w, 2, 2);
            let c1 = b.conv(&format!("dec{i}.conv1"), w, 2 * w, 3, false);
            let c2 = b.conv(&format!("dec{i}.conv2"), w, w, 3, false);
            dec.push((up, c1, c2));
        }
        let head_seg = b.conv("head_seg", 1, config.width(0), 1, true);
        let head_rr = b.conv("head_rr", 1, config.width(0), 1, true);
        Ok(Model {
            config,
            params: b.params,
            layout: Layout {
                enc,
                bottleneck,
                dec,
                head_seg,
                head_rr,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Leaf every parameter into `g`; gradients are tracked iff `trainable`.
    pub fn bind<'m>(&'m self, g: &mut Graph<T>, trainable: bool) -> BoundModel<'m, T> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        BoundModel { model: self, vars }
    }
}

/// Heads of one forward pass, as graph nodes.
pub struct ModelOutput {
    /// Per-pixel rain probability in (0, 1), [N, 1, H, W].
    pub y_seg: Var,
    /// Pre-sigmoid segmentation logits (for stable cross-entropy).
    pub seg_logits: Var,
    /// Per-pixel rain rate ≥ 0 in mm/h, [N, 1, H, W].
    pub y_rr: Var,
}

/// A model whose parameters are leafed into one graph.
pub struct BoundModel<'m, T: Real> {
    model: &'m Model<T>,
    vars: Vec<Var>,
}

impl<T: Real> BoundModel<'_, T> {
    /// Parameter (name, graph node) pairs, aligned with `Model::params`.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.model
            .params
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| (p.name.as_str(), *v))
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        c1: &ConvRef,
        c2: &ConvRef,
    ) -> Result<Var, TensorError> {
        let h = g.conv2d(x, self.vars[c1.w], Some(self.vars[c1.b]), 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, self.vars[c2.w], Some(self.vars[c2.b]), 1, 1)?;
        Ok(g.relu(h))
    }

    /// Run the network. `x_im`: [N, image_channels, H, W] with H and W
    /// divisible by the total stride; `x_sc`: [N, scalar_inputs], finite.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x_im: &Tensor<T>,
        x_sc: &Tensor<T>,
    ) -> Result<ModelOutput, ModelError> {
        let cfg = &self.model.config;
        let stride = cfg.total_stride();
        let ims = x_im.shape();
        if ims.len() != 4 || ims[1] != cfg.image_channels {
            return Err(ModelError::ShapeMismatch {
                what: "image input",
                expected: format!("[N, {}, H, W]", cfg.image_channels),
                found: format!("{ims:?}"),
            });
        }
        let (n, h, w) = (ims[0], ims[2], ims[3]);
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(ModelError::ShapeMismatch {
                what: "image input",
                expected: format!("spatial dims divisible by {stride}"),
                found: format!("{h}×{w}"),
            });
        }
        let scs = x_sc.shape();
        if scs != [n, cfg.scalar_inputs] {
            return Err(ModelError::ShapeMismatch {
                what: "scalar input",
                expected: format!("[{n}, {}]", cfg.scalar_inputs),
                found: format!("{scs:?}"),
            });
        }
        if x_sc.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput {
                what: "scalar inputs",
            });
        }

        // Normalize scalars by their configured scales.
        let mut sc = x_sc.clone();
        for (i, v) in sc.data_mut().iter_mut().enumerate() {
            let s = cfg.scalar_scale[i % cfg.scalar_inputs];
            *v = *v / T::cast(s);
        }

        let mut cur = g.leaf(x_im.clone(), false);
        let mut skips = Vec::with_capacity(cfg.depth);
        for (c1, c2) in &self.model.layout.enc {
            cur = self.block(g, cur, c1, c2)?;
            skips.push(cur);
            cur = g.max_pool2d(cur, 2, 2)?;
        }

        let sc_leaf = g.leaf(sc, false);
        let maps = g.broadcast_scalar_to_map(sc_leaf, h / stride, w / stride)?;
        cur = g.concat_channels(&[cur, maps])?;
        let (b1, b2) = &self.model.layout.bottleneck;
        cur = self.block(g, cur, b1, b2)?;

        for (lvl, (up, c1, c2)) in self.model.layout.dec.iter().enumerate() {
            cur = g.conv2d_transposed(cur, self.vars[up.w], Some(self.vars[up.b]), 2)?;
            let skip = skips[cfg.depth - 1 - lvl];
            cur = g.concat_channels(&[cur, skip])?;
            cur = self.block(g, cur, c1, c2)?;
        }

        let hs = &self.model.layout.head_seg;
        let seg_logits = g.conv2d(cur, self.vars[hs.w], Some(self.vars[hs.b]), 1, 0)?;
        let y_seg = g.sigmoid(seg_logits);

        let hr = &self.model.layout.head_rr;
        let rr_logits = g.conv2d(cur, self.vars[hr.w], Some(self.vars[hr.b]), 1, 0)?;
        let rr_nonneg = match cfg.rr_activation {
            RrActivation::Softplus => g.softplus(rr_logits),
            RrActivation::Relu => g.relu(rr_logits),
        };
        let y_rr = match cfg.rr_transform {
            RrTransform::Log1p => g.expm1(rr_nonneg),
            RrTransform::Identity => rr_nonneg,
        };

        Ok(ModelOutput {
            y_seg,
            seg_logits,
            y_rr,
        })
    }
}

/// Training-time discriminator: strided convolutions over log(1 + rain),
/// zero-initialized 1×1 score head, mean score per sample.
pub struct Discriminator<T: Real> {
    channels: Vec<usize>,
    params: Vec<Parameter<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, None)
    }

    fn build(config: &ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let mut in_ch = 1;
        for (j, c) in config.disc_channels.iter().enumerate() {
            b.conv(&format!("disc.conv{j}"), *c, in_ch, 3, false);
            in_ch = *c;
        }
        b.conv("disc.head", 1, in_ch, 1, true);
        Ok(Discriminator {
            channels: config.disc_channels.clone(),
            params: b.params,
        })
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn bind<'m>(&'m self, g: &mut Graph<T>, trainable: bool) -> BoundDiscriminator<'m, T> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        BoundDiscriminator { disc: self, vars }
    }
}

pub struct BoundDiscriminator<'m, T: Real> {
    disc: &'m Discriminator<T>,
    vars: Vec<Var>,
}

impl<T: Real> BoundDiscriminator<'_, T> {
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.disc
            .params
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| (p.name.as_str(), *v))
    }

    /// Score a batch of rain maps [N, 1, H, W] → per-sample scores [N].
    /// Spatial dims must survive one stride-2 conv per layer (H, W ≥ 2 per
    /// level).
    pub fn score(&self, g: &mut Graph<T>, rain: Var) -> Result<Var, ModelError> {
        let rs = g.value(rain).shape().to_vec();
        if rs.len() != 4 || rs[1] != 1 {
            return Err(ModelError::ShapeMismatch {
                what: "discriminator input",
                expected: "[N, 1, H, W]".into(),
                found: format!("{rs:?}"),
            });
        }
        // log(1 + rate) compresses the heavy tail; rates are ≥ 0 so the
        // shifted log is well-conditioned.
        let shifted = g.add_scalar(rain, T::one());
        let mut cur = g.log(shifted);
        for j in 0..self.disc.channels.len() {
            let w = self.vars[2 * j];
            let b = self.vars[2 * j + 1];
            cur = g.conv2d(cur, w, Some(b), 2, 1).map_err(ModelError::Tensor)?;
            cur = g.relu(cur);
        }
        let hw = self.vars[2 * self.disc.channels.len()];
        let hb = self.vars[2 * self.disc.channels.len() + 1];
        let map = g.conv2d(cur, hw, Some(hb), 1, 0).map_err(ModelError::Tensor)?;
        let ms = g.value(map).shape().to_vec();
        let ones = g.leaf(Tensor::filled(&ms, T::one()), false);
        g.masked_mean_per_sample(map, ones).map_err(ModelError::Tensor)
    }
}

// ---- checkpoints ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header of a checkpoint container; parameter and accumulator blocks
/// follow as little-endian f32, concatenated in header order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub optimizer: RmsPropConfig,
    pub rng_seed: u64,
    /// ChaCha word position, decimal string (u128).
    pub rng_word_pos: String,
    pub params: Vec<TensorDesc>,
    pub accumulators: Vec<TensorDesc>,
}

pub struct CheckpointInfo {
    pub model: ModelConfig,
    pub optimizer: RmsPropConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Write a checkpoint: named parameters and optimizer accumulators, stored
/// as f32 regardless of the training precision.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    info: &CheckpointInfo,
    params: &[(&str, &Tensor<T>)],
    accumulators: &[(&str, &Tensor<T>)],
) -> Result<(), ModelError> {
    let describe = |list: &[(&str, &Tensor<T>)]| {
        list.iter()
            .map(|(n, t)| TensorDesc {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect::<Vec<_>>()
    };
    let meta = CheckpointMeta {
        model: info.model.clone(),
        optimizer: info.optimizer,
        rng_seed: info.rng_seed,
        rng_word_pos: info.rng_word_pos.to_string(),
        params: describe(params),
        accumulators: describe(accumulators),
    };
    let meta_value = serde_json::to_value(&meta).map_err(|e| ContainerError::Meta {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut payload = Vec::new();
    for (_, t) in params.iter().chain(accumulators.iter()) {
        for v in t.iter() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    container::write_container(path, ContainerKind::Checkpoint, &meta_value, &payload)?;
    Ok(())
}

/// A checkpoint read back into memory (f32 tensors keyed by name).
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub accumulators: BTreeMap<String, Tensor<f32>>,
}

impl LoadedCheckpoint {
    pub fn rng_word_pos(&self) -> Result<u128, ModelError> {
        self.meta
            .rng_word_pos
            .parse()
            .map_err(|_| ModelError::Checkpoint {
                path: String::new(),
                reason: format!("bad rng_word_pos '{}'", self.meta.rng_word_pos),
            })
    }

    /// Rebuild the model, converting stored f32 values to the requested
    /// precision. Every expected parameter must be present with its shape.
    pub fn build_model<T: Real>(&self) -> Result<Model<T>, ModelError> {
        let mut model = Model::<T>::zeros(self.meta.model.clone())?;
        fill_params(model.params_mut(), &self.params, "model parameter")?;
        Ok(model)
    }

    pub fn build_discriminator<T: Real>(&self) -> Result<Discriminator<T>, ModelError> {
        let mut disc = Discriminator::<T>::zeros(&self.meta.model)?;
        fill_params(disc.params_mut(), &self.params, "discriminator parameter")?;
        Ok(disc)
    }
}

fn fill_params<T: Real>(
    dst: &mut [Parameter<T>],
    src: &BTreeMap<String, Tensor<f32>>,
    what: &str,
) -> Result<(), ModelError> {
    for p in dst {
        let stored = src.get(&p.name).ok_or_else(|| ModelError::Checkpoint {
            path: String::new(),
            reason: format!("missing {what} '{}'", p.name),
        })?;
        if stored.shape() != p.value.shape() {
            return Err(ModelError::Checkpoint {
                path: String::new(),
                reason: format!(
                    "{what} '{}' has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = Tensor::from_vec(
            stored.shape(),
            stored.iter().map(|v| T::cast(*v as f64)).collect(),
        );
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let p = path.display().to_string();
    let raw = container::read_container(path)?;
    if raw.kind != ContainerKind::Checkpoint {
        return Err(ContainerError::WrongKind {
            path: p,
            found: raw.kind,
            expected: ContainerKind::Checkpoint,
        }
        .into());
    }
    let meta: CheckpointMeta =
        serde_json::from_value(raw.meta.clone()).map_err(|e| ModelError::Checkpoint {
            path: p.clone(),
            reason: format!("bad header: {e}"),
        })?;
    let total: usize = meta
        .params
        .iter()
        .chain(meta.accumulators.iter())
        .map(|d| d.shape.iter().product::<usize>())
        .sum();
    let values = container::le_to_f32s(&raw.payload).ok_or_else(|| ModelError::Checkpoint {
        path: p.clone(),
        reason: "payload is not a whole number of f32 values".into(),
    })?;
    if values.len() != total {
        return Err(ModelError::Checkpoint {
            path: p,
            reason: format!("payload holds {} values, header declares {total}", values.len()),
        });
    }
    let mut offset = 0;
    let mut take = |descs: &[TensorDesc]| {
        let mut out = BTreeMap::new();
        for d in descs {
            let n: usize = d.shape.iter().product();
            out.insert(
                d.name.clone(),
                Tensor::from_vec(&d.shape, values[offset..offset + n].to_vec()),
            );
            offset += n;
        }
        out
    };
    let params = take(&meta.params);
    let accumulators = take(&meta.accumulators);
    Ok(LoadedCheckpoint {
        meta,
        params,
        accumulators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 2,
            disc_channels: vec![2],
            ..ModelConfig::default()
        }
    }

    fn random_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, c, h, w],
            (0..n * c * h * w).map(|_| rng.gen_range(-1.0..2.0)).collect(),
        )
    }

    #[test]
    fn zero_initialized_heads_are_neutral() {
        let model: Model<f64> = Model::new(tiny_config(), 7).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x_im = random_image(1, 3, 8, 8, 1);
        let x_sc = Tensor::from_vec(&[1, 3], vec![35.0, -25.0, 8.0]);
        let out = bound.forward(&mut g, &x_im, &x_sc).unwrap();
        assert!(g.value(out.y_seg).iter().all(|v| *v == 0.5));
        // The rain head is zero-initialized too, so the rain field is flat.
        let rr = g.value(out.y_rr).data();
        assert!(rr.iter().all(|v| *v == rr[0]));
    }

    #[test]
    fn relu_identity_config_gives_exactly_zero_rain_at_init() {
        let config = ModelConfig {
            rr_activation: RrActivation::Relu,
            rr_transform: RrTransform::Identity,
            ..tiny_config()
        };
        let model: Model<f64> = Model::new(config, 7).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x_im = random_image(2, 3, 8, 8, 2);
        let x_sc = Tensor::from_vec(&[2, 3], vec![35.0, -25.0, 8.0, 40.0, -22.0, 3.0]);
        let out = bound.forward(&mut g, &x_im, &x_sc).unwrap();
        assert!(g.value(out.y_rr).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn outputs_are_probabilities_and_nonnegative_rates() {
        // Perturb the head weights away from zero and verify the activation
        // guarantees.
        let mut model: Model<f64> = Model::new(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for p in model.params_mut() {
            if p.name.starts_with("head") {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-2.0..2.0);
                }
            }
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x_im = random_image(2, 3, 8, 8, 4);
        let x_sc = Tensor::from_vec(&[2, 3], vec![35.0, -25.0, 8.0, 20.0, -30.0, 15.0]);
        let out = bound.forward(&mut g, &x_im, &x_sc).unwrap();
        assert!(g
            .value(out.y_seg)
            .iter()
            .all(|v| *v > 0.0 && *v < 1.0));
        assert!(g.value(out.y_rr).iter().all(|v| *v >= 0.0));
        assert_eq!(g.value(out.y_rr).shape(), &[2, 1, 8, 8]);
        assert_eq!(g.value(out.y_seg).shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_non_finite_scalars() {
        let model: Model<f64> = Model::new(tiny_config(), 7).unwrap();
        let x_sc = Tensor::from_vec(&[1, 3], vec![35.0, -25.0, 8.0]);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let bad_channels = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        assert!(matches!(
            bound.forward(&mut g, &bad_channels, &x_sc),
            Err(ModelError::ShapeMismatch { .. })
        ));

        let odd = Tensor::<f64>::zeros(&[1, 3, 7, 8]);
        assert!(matches!(
            bound.forward(&mut g, &odd, &x_sc),
            Err(ModelError::ShapeMismatch { .. })
        ));

        let ok_im = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let bad_sc = Tensor::from_vec(&[1, 3], vec![35.0, f64::NAN, 8.0]);
        assert!(matches!(
            bound.forward(&mut g, &ok_im, &bad_sc),
            Err(ModelError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (depth, base) in [(1usize, 2usize), (2, 4), (3, 16)] {
            let config = ModelConfig {
                depth,
                base_channels: base,
                ..ModelConfig::default()
            };
            let model: Model<f64> = Model::new(config.clone(), 0).unwrap();
            let actual: usize = model.params().iter().map(|p| p.value.numel()).sum();
            assert_eq!(actual, config.parameter_count(), "depth {depth} base {base}");
        }
        let config = ModelConfig {
            disc_channels: vec![4, 8],
            ..ModelConfig::default()
        };
        let disc: Discriminator<f64> = Discriminator::new(&config, 0).unwrap();
        let actual: usize = disc.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(actual, config.discriminator_parameter_count());
    }

    #[test]
    fn zero_initialized_discriminator_scores_zero() {
        let disc: Discriminator<f64> = Discriminator::zeros(&tiny_config()).unwrap();
        let mut g = Graph::new();
        let bound = disc.bind(&mut g, false);
        let rain = g.leaf(Tensor::zeros(&[2, 1, 8, 8]), false);
        let score = bound.score(&mut g, rain).unwrap();
        assert_eq!(g.value(score).data(), &[0.0, 0.0]);
    }

    #[test]
    fn discriminator_scores_real_and_fake_shapes_alike() {
        let disc: Discriminator<f64> = Discriminator::new(&tiny_config(), 11).unwrap();
        let mut g = Graph::new();
        let bound = disc.bind(&mut g, false);
        let real = g.leaf(random_image(3, 1, 8, 8, 5).clone(), false);
        let fake = g.leaf(random_image(3, 1, 8, 8, 6).clone(), false);
        let sr = bound.score(&mut g, real).unwrap();
        let sf = bound.score(&mut g, fake).unwrap();
        assert_eq!(g.value(sr).shape(), &[3]);
        assert_eq!(g.value(sf).shape(), &[3]);
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let a: Model<f32> = Model::new(tiny_config(), 42).unwrap();
        let b: Model<f32> = Model::new(tiny_config(), 42).unwrap();
        let c: Model<f32> = Model::new(tiny_config(), 43).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_parameters_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model: Model<f32> = Model::new(tiny_config(), 21).unwrap();
        let disc: Discriminator<f32> = Discriminator::new(&tiny_config(), 22).unwrap();
        let info = CheckpointInfo {
            model: tiny_config(),
            optimizer: RmsPropConfig::default(),
            rng_seed: 21,
            rng_word_pos: 123456789012345678901u128,
        };
        let params: Vec<(&str, &Tensor<f32>)> = model
            .params()
            .iter()
            .chain(disc.params().iter())
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        let acc = Tensor::from_vec(&[2], vec![0.5f32, 0.25]);
        save_checkpoint(&path, &info, &params, &[("enc0.conv1.b", &acc)]).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.rng_seed, 21);
        assert_eq!(loaded.rng_word_pos().unwrap(), 123456789012345678901u128);
        assert_eq!(loaded.accumulators["enc0.conv1.b"].data(), acc.data());

        let restored: Model<f32> = loaded.build_model().unwrap();
        for (orig, back) in model.params().iter().zip(restored.params()) {
            assert_eq!(orig.value.data(), back.value.data(), "{}", orig.name);
        }
        let rdisc: Discriminator<f32> = loaded.build_discriminator().unwrap();
        for (orig, back) in disc.params().iter().zip(rdisc.params()) {
            assert_eq!(orig.value.data(), back.value.data(), "{}", orig.name);
        }
    }

    #[test]
    fn checkpoint_missing_parameter_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.ckpt");
        let model: Model<f32> = Model::new(tiny_config(), 21).unwrap();
        let info = CheckpointInfo {
            model: tiny_config(),
            optimizer: RmsPropConfig::default(),
            rng_seed: 0,
            rng_word_pos: 0,
        };
        // Drop the last parameter.
        let params: Vec<(&str, &Tensor<f32>)> = model
            .params()
            .iter()
            .take(model.params().len() - 1)
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        save_checkpoint(&path, &info, &params, &[]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(matches!(
            loaded.build_model::<f32>(),
            Err(ModelError::Checkpoint { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let mut c = ModelConfig::default();
        c.depth = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.base_channels = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.scalar_scale = vec![45.0];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.disc_channels = vec![];
        assert!(c.validate().is_err());
    }
}
