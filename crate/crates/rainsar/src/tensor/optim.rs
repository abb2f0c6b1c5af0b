//! RMSProp with gradient clipping.
//!
//! The update order is fixed: verify finiteness, clip, then apply the
//! running-average update. Squared-gradient accumulators are part of the
//! training state and are exposed for checkpointing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Real, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
    #[error("gradient shape {grad:?} does not match parameter '{name}' shape {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

/// How gradients are clipped before the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale the whole gradient set so its joint L2 norm is at most the
    /// threshold.
    GlobalNorm,
    /// Clamp each gradient value independently to ±threshold.
    PerValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub clip_mode: ClipMode,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 1e-5,
            decay: 0.9,
            epsilon: 1e-8,
            clip_threshold: 1.0,
            clip_mode: ClipMode::GlobalNorm,
        }
    }
}

/// One parameter update: the optimizer owns nothing but accumulators, so
/// callers pass the parameter tensor and its gradient per step.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

pub struct RmsProp<T: Real> {
    config: RmsPropConfig,
    accumulators: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Squared-gradient accumulators, keyed by parameter name (present only
    /// for parameters that have been stepped at least once).
    pub fn accumulators(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.accumulators
    }

    /// Restore an accumulator from a checkpoint.
    pub fn set_accumulator(&mut self, name: &str, acc: Tensor<T>) {
        self.accumulators.insert(name.to_string(), acc);
    }

    /// Apply one RMSProp step to every entry. All gradients are validated
    /// and clipped jointly before any parameter moves, so a failure leaves
    /// parameters untouched.
    pub fn step(&mut self, entries: &mut [ParamUpdate<'_, T>]) -> Result<(), OptimError> {
        for e in entries.iter() {
            if e.grad.shape() != e.param.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: e.name.to_string(),
                    param: e.param.shape().to_vec(),
                    grad: e.grad.shape().to_vec(),
                });
            }
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: e.name.to_string(),
                });
            }
        }

        // Clip. For the global-norm mode the norm is accumulated in f64 so
        // the scale factor does not depend on the training precision.
        let threshold = self.config.clip_threshold;
        let scale: Option<T> = match self.config.clip_mode {
            ClipMode::GlobalNorm => {
                let mut sq = 0.0f64;
                for e in entries.iter() {
                    for g in e.grad.iter() {
                        let g = g.to_f64_lossy();
                        sq += g * g;
                    }
                }
                let norm = sq.sqrt();
                if norm > threshold {
                    Some(T::cast(threshold / norm))
                } else {
                    None
                }
            }
            ClipMode::PerValue => None,
        };

        let decay = T::cast(self.config.decay);
        let keep = T::one() - decay;
        let lr = T::cast(self.config.learning_rate);
        let eps = T::cast(self.config.epsilon);
        let bound = T::cast(threshold);

        for e in entries.iter_mut() {
            let acc = self
                .accumulators
                .entry(e.name.to_string())
                .or_insert_with(|| Tensor::zeros(e.param.shape()));
            for ((p, a), g) in e
                .param
                .data_mut()
                .iter_mut()
                .zip(acc.data_mut())
                .zip(e.grad.iter())
            {
                let g = match (self.config.clip_mode, scale) {
                    (ClipMode::GlobalNorm, Some(s)) => *g * s,
                    (ClipMode::GlobalNorm, None) => *g,
                    (ClipMode::PerValue, _) => (*g).max(-bound).min(bound),
                };
                *a = decay * *a + keep * g * g;
                *p -= lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_step(
        cfg: RmsPropConfig,
        param0: f64,
        grad: f64,
    ) -> (RmsProp<f64>, Tensor<f64>) {
        let mut opt = RmsProp::new(cfg);
        let mut p = Tensor::from_vec(&[1], vec![param0]);
        let g = Tensor::from_vec(&[1], vec![grad]);
        opt.step(&mut [ParamUpdate {
            name: "w",
            param: &mut p,
            grad: &g,
        }])
        .unwrap();
        (opt, p)
    }

    #[test]
    fn hand_computed_first_step_with_norm_clipping() {
        // A lone gradient of 2 exceeds the unit norm bound, so it clips to
        // 1; the accumulator becomes 0.1 and the step is lr/(sqrt(0.1)+eps).
        let cfg = RmsPropConfig::default();
        let (opt, p) = single_step(cfg, 1.0, 2.0);
        let acc = opt.accumulators()["w"].data()[0];
        assert!((acc - 0.1).abs() < 1e-15);
        let expected = 1.0 - 1e-5 / (0.1f64.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn small_gradients_are_not_rescaled() {
        // Joint norm 0.5 < 1.0: the gradient passes through unchanged.
        let cfg = RmsPropConfig::default();
        let (opt, p) = single_step(cfg, 0.0, 0.5);
        let acc = opt.accumulators()["w"].data()[0];
        assert!((acc - 0.1 * 0.25).abs() < 1e-15);
        let expected = -1e-5 * 0.5 / ((0.1f64 * 0.25).sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn global_norm_spans_all_parameters() {
        // Two parameters with gradient 3 and 4: joint norm 5, so both scale
        // by 1/5.
        let mut opt: RmsProp<f64> = RmsProp::new(RmsPropConfig::default());
        let mut p1 = Tensor::from_vec(&[1], vec![0.0]);
        let mut p2 = Tensor::from_vec(&[1], vec![0.0]);
        let g1 = Tensor::from_vec(&[1], vec![3.0]);
        let g2 = Tensor::from_vec(&[1], vec![4.0]);
        opt.step(&mut [
            ParamUpdate {
                name: "a",
                param: &mut p1,
                grad: &g1,
            },
            ParamUpdate {
                name: "b",
                param: &mut p2,
                grad: &g2,
            },
        ])
        .unwrap();
        assert!((opt.accumulators()["a"].data()[0] - 0.1 * 0.36).abs() < 1e-15);
        assert!((opt.accumulators()["b"].data()[0] - 0.1 * 0.64).abs() < 1e-15);
    }

    #[test]
    fn per_value_mode_clamps_independently() {
        let cfg = RmsPropConfig {
            clip_mode: ClipMode::PerValue,
            clip_threshold: 0.25,
            ..RmsPropConfig::default()
        };
        let mut opt: RmsProp<f64> = RmsProp::new(cfg);
        let mut p = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let g = Tensor::from_vec(&[2], vec![10.0, -10.0]);
        opt.step(&mut [ParamUpdate {
            name: "w",
            param: &mut p,
            grad: &g,
        }])
        .unwrap();
        let acc = opt.accumulators()["w"].data();
        assert!((acc[0] - 0.1 * 0.0625).abs() < 1e-15);
        assert!((acc[1] - 0.1 * 0.0625).abs() < 1e-15);
        assert!(p.data()[0] < 0.0 && p.data()[1] > 0.0);
        assert!((p.data()[0] + p.data()[1]).abs() < 1e-18);
    }

    #[test]
    fn accumulator_decays_toward_zero_gradient() {
        let mut opt: RmsProp<f64> = RmsProp::new(RmsPropConfig::default());
        let mut p = Tensor::from_vec(&[1], vec![1.0]);
        let g1 = Tensor::from_vec(&[1], vec![0.5]);
        let g0 = Tensor::from_vec(&[1], vec![0.0]);
        opt.step(&mut [ParamUpdate {
            name: "w",
            param: &mut p,
            grad: &g1,
        }])
        .unwrap();
        let a1 = opt.accumulators()["w"].data()[0];
        opt.step(&mut [ParamUpdate {
            name: "w",
            param: &mut p,
            grad: &g0,
        }])
        .unwrap();
        let a2 = opt.accumulators()["w"].data()[0];
        assert!((a2 - 0.9 * a1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_named_and_leaves_parameters_alone() {
        let mut opt: RmsProp<f64> = RmsProp::new(RmsPropConfig::default());
        let mut p1 = Tensor::from_vec(&[1], vec![1.0]);
        let mut p2 = Tensor::from_vec(&[1], vec![2.0]);
        let g_ok = Tensor::from_vec(&[1], vec![0.1]);
        let g_bad = Tensor::from_vec(&[1], vec![f64::NAN]);
        let err = opt
            .step(&mut [
                ParamUpdate {
                    name: "encoder.w",
                    param: &mut p1,
                    grad: &g_ok,
                },
                ParamUpdate {
                    name: "head.w",
                    param: &mut p2,
                    grad: &g_bad,
                },
            ])
            .unwrap_err();
        match err {
            OptimError::NonFiniteGradient { name } => assert_eq!(name, "head.w"),
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(p1.data()[0], 1.0);
        assert_eq!(p2.data()[0], 2.0);
        assert!(opt.accumulators().is_empty());
    }
}
