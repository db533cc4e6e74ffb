//! Feature-statistics perturbations: MixPatch and the DSU / MixStyle baselines.
//!
//! Every perturbation reduces to an [`AdainTarget`]: a patch partition plus
//! the statistics each patch of each channel should be renormalized to. The
//! model applies targets through a differentiable AdaIN node in which the
//! target statistics are constants.

mod baselines;
mod mixpatch;
mod partition;
mod stats;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

pub use baselines::{dsu_perturb, dsu_target, mixstyle_perturb, mixstyle_target, mixstyle_with};
pub use mixpatch::{mixpatch, mixpatch_target};
pub use partition::{make_partition, PatchBounds, PatchPartition, SplitScheme};
pub(crate) use stats::adain_patches_backward;
pub use stats::{
    apply_adain_patches, apply_shuffle, draw_noise, patch_statistics, perturb_stats, perturb_stats_with, shuffle_stats,
    stats_uncertainty, AdainTarget, NoiseDraws, PatchStats, ShuffleRecord, UncertaintyStats,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    pub scheme: SplitScheme,
    pub eps: f64,
    /// Probability that a training batch is perturbed at all.
    pub apply_probability: f64,
    pub noise_enabled: bool,
    pub shuffle_enabled: bool,
    pub clamp_floor: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            scheme: SplitScheme::P2UdRandom,
            eps: DEFAULT_EPS,
            apply_probability: 0.5,
            noise_enabled: true,
            shuffle_enabled: true,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.clamp_floor > 0.0) {
            return Err(Error::Config(format!(
                "clamp_floor must be positive, got {}",
                self.clamp_floor
            )));
        }
        Ok(())
    }

    /// With both shuffle and noise off MixPatch reproduces its input.
    pub fn is_identity(&self) -> bool {
        !self.noise_enabled && !self.shuffle_enabled
    }
}

/// Which feature-level perturbation fills the F and IF routes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMethod {
    #[default]
    MixPatch,
    Dsu,
    MixStyle,
}

impl fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMethod::MixPatch => "mixpatch",
            FeatureMethod::Dsu => "dsu",
            FeatureMethod::MixStyle => "mixstyle",
        })
    }
}

impl FromStr for FeatureMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixpatch" => Ok(FeatureMethod::MixPatch),
            "dsu" => Ok(FeatureMethod::Dsu),
            "mixstyle" => Ok(FeatureMethod::MixStyle),
            _ => Err(Error::Config(format!(
                "unknown feature method {s:?}; valid: mixpatch, dsu, mixstyle"
            ))),
        }
    }
}

/// Decides, for a feature map leaving a block, which statistics to impose.
pub trait FeaturePerturbation<T: Scalar> {
    fn plan(&mut self, f: &Tensor<T>, block: usize) -> Result<Option<AdainTarget<T>>>;
}

pub struct MixPatchHook {
    pub cfg: PerturbConfig,
    pub rng: Rng,
}

impl<T: Scalar> FeaturePerturbation<T> for MixPatchHook {
    fn plan(&mut self, f: &Tensor<T>, _block: usize) -> Result<Option<AdainTarget<T>>> {
        if self.cfg.is_identity() {
            return Ok(None);
        }
        Ok(mixpatch_target(f, &self.cfg, &mut self.rng)?.map(|(target, _)| target))
    }
}

pub struct DsuHook {
    pub cfg: PerturbConfig,
    pub rng: Rng,
}

impl<T: Scalar> FeaturePerturbation<T> for DsuHook {
    fn plan(&mut self, f: &Tensor<T>, _block: usize) -> Result<Option<AdainTarget<T>>> {
        if !self.rng.bernoulli(self.cfg.apply_probability)? {
            return Ok(None);
        }
        dsu_target(f, &mut self.rng, self.cfg.eps, self.cfg.clamp_floor).map(Some)
    }
}

pub struct MixStyleHook {
    pub cfg: PerturbConfig,
    pub alpha: f64,
    pub rng: Rng,
}

impl<T: Scalar> FeaturePerturbation<T> for MixStyleHook {
    fn plan(&mut self, f: &Tensor<T>, _block: usize) -> Result<Option<AdainTarget<T>>> {
        if !self.rng.bernoulli(self.cfg.apply_probability)? {
            return Ok(None);
        }
        mixstyle_target(f, &mut self.rng, self.alpha, self.cfg.eps).map(Some)
    }
}

pub const MIXSTYLE_ALPHA: f64 = 0.1;

pub fn feature_hook<T: Scalar>(
    method: FeatureMethod,
    cfg: &PerturbConfig,
    rng: Rng,
) -> Box<dyn FeaturePerturbation<T>> {
    let cfg = cfg.clone();
    match method {
        FeatureMethod::MixPatch => Box::new(MixPatchHook { cfg, rng }),
        FeatureMethod::Dsu => Box::new(DsuHook { cfg, rng }),
        FeatureMethod::MixStyle => Box::new(MixStyleHook {
            cfg,
            alpha: MIXSTYLE_ALPHA,
            rng,
        }),
    }
}

/// Wraps another perturbation and records every target it produces.
pub struct Recording<'a, T: Scalar> {
    pub inner: &'a mut dyn FeaturePerturbation<T>,
    pub targets: Vec<Option<AdainTarget<T>>>,
}

impl<'a, T: Scalar> Recording<'a, T> {
    pub fn new(inner: &'a mut dyn FeaturePerturbation<T>) -> Self {
        Self {
            inner,
            targets: Vec::new(),
        }
    }
}

impl<T: Scalar> FeaturePerturbation<T> for Recording<'_, T> {
    fn plan(&mut self, f: &Tensor<T>, block: usize) -> Result<Option<AdainTarget<T>>> {
        let t = self.inner.plan(f, block)?;
        self.targets.push(t.clone());
        Ok(t)
    }
}

/// Replays recorded targets in order, holding them fixed regardless of the
/// incoming feature map.
pub struct Replay<T: Scalar> {
    targets: VecDeque<Option<AdainTarget<T>>>,
}

impl<T: Scalar> Replay<T> {
    pub fn new(targets: Vec<Option<AdainTarget<T>>>) -> Self {
        Self {
            targets: targets.into(),
        }
    }
}

impl<T: Scalar> FeaturePerturbation<T> for Replay<T> {
    fn plan(&mut self, _f: &Tensor<T>, _block: usize) -> Result<Option<AdainTarget<T>>> {
        self.targets
            .pop_front()
            .ok_or_else(|| Error::invalid("replay exhausted"))
    }
}
