//! The toy two-frame network, its multi-task loss, the optimizer, two-stage
//! training and inference.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::association::AssociationConfig;
use crate::density::LossWeights;
use crate::localization::LocalizationConfig;
use crate::{Error, Result};

pub mod adam;
pub mod infer;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;

pub use adam::Adam;
pub use infer::{infer, infer_sequence, PairInference, SequenceInference};
pub use loss::{multi_task_loss, LossParts};
pub use model::{forward, FrameOutputs};
pub use params::{ParamSpec, ParamStore};
pub use train::{train_stage, Sequence, StepLog, TrainConfig};

/// Learning rate used when training a pretrained large backbone.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-6;

/// Subnets removed for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Localization subnet (removing it also removes association).
    pub localization: bool,
    /// Association subnet and its loss.
    pub association: bool,
    /// Relation term of the neighboring context loss.
    pub relation: bool,
    /// Backward (cycle) half of the neighboring context loss.
    pub cycle: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        localization: true,
        association: true,
        relation: true,
        cycle: true,
    };
    pub const NO_CYCLE: Self = Self { cycle: false, ..Self::FULL };
    pub const NO_RELATION: Self = Self {
        relation: false,
        cycle: false,
        ..Self::FULL
    };
    pub const NO_ASSOCIATION: Self = Self {
        association: false,
        relation: false,
        cycle: false,
        ..Self::FULL
    };
    pub const NO_LOCALIZATION: Self = Self {
        localization: false,
        association: false,
        relation: false,
        cycle: false,
    };

    pub fn association_active(&self) -> bool {
        self.localization && self.association
    }

    /// The five named variants, full model first.
    pub const VARIANTS: [(&'static str, Self); 5] = [
        ("full", Self::FULL),
        ("no_cyc", Self::NO_CYCLE),
        ("no_rel", Self::NO_RELATION),
        ("no_ass", Self::NO_ASSOCIATION),
        ("no_loc", Self::NO_LOCALIZATION),
    ];

    pub fn name(&self) -> Option<&'static str> {
        Self::VARIANTS.iter().find(|(_, a)| a == self).map(|(n, _)| *n)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::VARIANTS.iter().find(|(n, _)| *n == name).map(|(_, a)| *a)
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Backbone widths of the three groups (strides 1, 2, 4).
    pub widths: [usize; 3],
    pub max_disp: usize,
    pub loss_weights: LossWeights,
    /// Density heads regress `density_scale` times the density map.
    pub density_scale: f64,
    pub localization: LocalizationConfig,
    pub association: AssociationConfig,
    /// Frame pairs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub attention: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            max_disp: 4,
            loss_weights: LossWeights::default(),
            density_scale: 100.0,
            localization: LocalizationConfig::default(),
            association: AssociationConfig::default(),
            batch_size: 4,
            learning_rate: 1e-4,
            clip_norm: Some(10.0),
            attention: true,
            ablation: Ablation::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("ModelConfig", reason));
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] > w[1]) {
            return bad("widths must be positive and ascending");
        }
        let l = &self.localization;
        let a = &self.association;
        let radii = [l.match_radius, l.nms_radius, a.match_radius, a.neighborhood_radius];
        if radii.iter().any(|&r| !(r > 0.0)) {
            return bad("radii must be positive");
        }
        if l.top_m == 0 || a.beta == 0 || a.hidden == 0 {
            return bad("top_m, beta and hidden must be positive");
        }
        if !(self.density_scale > 0.0) {
            return bad("density scale must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        self.loss_weights.validate()
    }

    /// Association settings with the ablation flags applied.
    pub fn association_config(&self) -> AssociationConfig {
        AssociationConfig {
            use_relation: self.association.use_relation && self.ablation.relation,
            use_cycle: self.association.use_cycle && self.ablation.cycle,
            ..self.association
        }
    }

    /// Channels of the correlation volume at each scale.
    pub fn corr_channels(&self) -> usize {
        (2 * self.max_disp + 1) * (2 * self.max_disp + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Density and localization only.
    One,
    /// Association enabled, density heads frozen.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::invalid("Stage", alloc::format!("unknown stage {n}"))),
        }
    }
}

/// Prefix of parameters frozen in stage two.
pub const DENSITY_PREFIX: &str = "density.";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub stage: Stage,
    pub frozen: BTreeSet<String>,
}

impl ModelState {
    /// Seeded initialization of every parameter of the configured model.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: params::initialize(&model::param_specs(cfg), &mut rng),
            stage: Stage::One,
            frozen: BTreeSet::new(),
        })
    }

    /// Marks the state as stage two and freezes the density heads.
    pub fn enter_stage_two(&mut self) {
        self.stage = Stage::Two;
        self.frozen = self
            .params
            .keys()
            .filter(|k| k.starts_with(DENSITY_PREFIX))
            .cloned()
            .collect();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Parameter names in storage order.
    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }
}
