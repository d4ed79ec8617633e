//! Model and training configuration, parsed from and echoed to `key=value`.

use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, Config};
use crate::encoders::Encoder2DConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SimilarityConfig};
use crate::numcore::{LrSchedule, OptimizerKind};

use super::augment::{AugmentationSpec, AUGMENT_KEYS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub f2d: Encoder2DConfig,
    pub f3d_widths: Vec<usize>,
    pub head_hidden: usize,
    /// Shared output width `d` of both heads and of `u2d`.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { f2d: Encoder2DConfig::default(), f3d_widths: vec![64, 128, 256], head_hidden: 128, embed_dim: 64 }
    }
}

pub const MODEL_KEYS: &[&str] = &["f2d_widths", "image_width", "image_height", "f3d_widths", "head_hidden", "embed_dim"];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.f2d.validate()?;
        if self.f3d_widths.is_empty() || self.f3d_widths.contains(&0) {
            return Err(Error::contract(format!("f3d widths {:?} must be non-empty and positive", self.f3d_widths)));
        }
        if self.head_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::contract("head_hidden and embed_dim must be positive"));
        }
        Ok(())
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        let d = Self::default();
        let m = Self {
            f2d: Encoder2DConfig {
                widths: c.get_list("f2d_widths", d.f2d.widths)?,
                width: c.get_or("image_width", d.f2d.width)?,
                height: c.get_or("image_height", d.f2d.height)?,
            },
            f3d_widths: c.get_list("f3d_widths", d.f3d_widths)?,
            head_hidden: c.get_or("head_hidden", d.head_hidden)?,
            embed_dim: c.get_or("embed_dim", d.embed_dim)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write_config(&self, c: &mut Config) {
        c.set("f2d_widths", join_list(&self.f2d.widths));
        c.set("image_width", self.f2d.width);
        c.set("image_height", self.f2d.height);
        c.set("f3d_widths", join_list(&self.f3d_widths));
        c.set("head_hidden", self.head_hidden);
        c.set("embed_dim", self.embed_dim);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
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
            _ => Err(Error::contract(format!("stage {n} is neither 1 nor 2"))),
        }
    }
}

/// How a pixel-point batch is drawn from the available correspondences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairPolicy {
    /// All `k` entries from a single `(object, view)`.
    WithinObject,
    /// Entries spread evenly over every object present.
    CrossObject,
}

impl FromStr for PairPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within_object" => Ok(PairPolicy::WithinObject),
            "cross_object" => Ok(PairPolicy::CrossObject),
            _ => Err(Error::contract(format!("unknown pair policy {s:?}"))),
        }
    }
}

impl fmt::Display for PairPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairPolicy::WithinObject => "within_object",
            PairPolicy::CrossObject => "cross_object",
        })
    }
}

/// Which parameters feed the image side of the global transfer loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum G2dHead {
    /// A copy of the contrastive head, trained on its own from there.
    Separate,
    /// The contrastive head itself.
    Shared,
}

impl FromStr for G2dHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(G2dHead::Separate),
            "shared" => Ok(G2dHead::Shared),
            _ => Err(Error::contract(format!("unknown g2d head mode {s:?}"))),
        }
    }
}

impl fmt::Display for G2dHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            G2dHead::Separate => "separate",
            G2dHead::Shared => "shared",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Images per step in stage 1, objects per step in stage 2.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub tau: f64,
    pub weights: LossWeights,
    pub pair_policy: PairPolicy,
    /// Pixel-point pairs per step.
    pub pair_batch: usize,
    /// When positive, overrides `pair_batch` with `pairs_per_epoch / steps`.
    pub pairs_per_epoch: usize,
    pub bn_momentum_start: f64,
    pub bn_momentum_period: usize,
    pub bn_momentum_floor: f64,
    pub augmentation: AugmentationSpec,
    pub finetune_f2d: bool,
    pub g2d_head: G2dHead,
    pub train_g2d: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

pub const TRAIN_KEYS: &[&str] = &[
    "stage",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "momentum",
    "weight_decay",
    "schedule",
    "step_gamma",
    "step_period",
    "cosine_t_max",
    "cosine_lr_min",
    "tau",
    "lambda_glb",
    "lambda_pnt",
    "pair_policy",
    "pair_batch",
    "pairs_per_epoch",
    "bn_momentum_start",
    "bn_momentum_period",
    "bn_momentum_floor",
    "finetune_f2d",
    "g2d_head",
    "train_g2d",
    "seed",
];

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::One,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            tau: 0.5,
            weights: LossWeights::default(),
            pair_policy: PairPolicy::CrossObject,
            pair_batch: 64,
            pairs_per_epoch: 0,
            bn_momentum_start: 0.5,
            bn_momentum_period: 20,
            bn_momentum_floor: 0.01,
            augmentation: AugmentationSpec::default(),
            finetune_f2d: false,
            g2d_head: G2dHead::Separate,
            train_g2d: true,
            seed: 0,
            model: ModelConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self { stage: Stage::Two, schedule: LrSchedule::StepDecay { gamma: 0.7, period: 20 }, ..Self::stage1() }
    }

    pub fn defaults(stage: Stage) -> Self {
        match stage {
            Stage::One => Self::stage1(),
            Stage::Two => Self::stage2(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.augmentation.seed = seed;
        self
    }

    pub fn sim(&self) -> Result<SimilarityConfig> {
        SimilarityConfig::new(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pair_batch == 0 {
            return Err(Error::contract("epochs, batch_size and pair_batch must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::contract(format!("lr {} / weight decay {} invalid", self.lr, self.weight_decay)));
        }
        SimilarityConfig::new(self.tau)?;
        LossWeights::new(self.weights.global, self.weights.pointwise)?;
        match self.schedule {
            LrSchedule::StepDecay { period: 0, .. } => return Err(Error::contract("step_period must be >= 1")),
            LrSchedule::Cosine { t_max, .. } if t_max < self.epochs => {
                return Err(Error::contract(format!("cosine_t_max {t_max} shorter than {} epochs", self.epochs)))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.bn_momentum_start) || !(0.0..=1.0).contains(&self.bn_momentum_floor) {
            return Err(Error::contract("batchnorm momentum values must lie in [0, 1]"));
        }
        self.augmentation.validate()?;
        self.model.validate()
    }

    pub fn from_config(c: &Config, stage: Stage) -> Result<Self> {
        let mut known: Vec<&str> = TRAIN_KEYS.to_vec();
        known.extend_from_slice(AUGMENT_KEYS);
        known.extend_from_slice(MODEL_KEYS);
        c.check_known(&known)?;
        let stage = match c.get("stage") {
            Some(s) => Stage::from_number(s.parse().map_err(|_| Error::contract(format!("stage {s:?} is not a number")))?)?,
            None => stage,
        };
        let d = Self::defaults(stage);
        let optimizer = match c.get("optimizer").unwrap_or("adam") {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::sgd(c.get_or("momentum", 0.9)?),
            other => return Err(Error::contract(format!("unknown optimizer {other:?}"))),
        };
        let schedule = match c.get("schedule") {
            None => d.schedule,
            Some("constant") => LrSchedule::Constant,
            Some("step") => LrSchedule::StepDecay { gamma: c.get_or("step_gamma", 0.7)?, period: c.get_or("step_period", 20)? },
            Some("cosine") => LrSchedule::Cosine {
                t_max: c.get_or("cosine_t_max", c.get_or("epochs", d.epochs)?)?,
                lr_min: c.get_or("cosine_lr_min", 0.0)?,
            },
            Some(other) => return Err(Error::contract(format!("unknown schedule {other:?}"))),
        };
        let seed = c.get_or("seed", d.seed)?;
        let cfg = Self {
            stage,
            epochs: c.get_or("epochs", d.epochs)?,
            batch_size: c.get_or("batch_size", d.batch_size)?,
            optimizer,
            lr: c.get_or("lr", d.lr)?,
            weight_decay: c.get_or("weight_decay", d.weight_decay)?,
            schedule,
            tau: c.get_or("tau", d.tau)?,
            weights: LossWeights::new(c.get_or("lambda_glb", d.weights.global)?, c.get_or("lambda_pnt", d.weights.pointwise)?)?,
            pair_policy: c.get_or("pair_policy", d.pair_policy)?,
            pair_batch: c.get_or("pair_batch", d.pair_batch)?,
            pairs_per_epoch: c.get_or("pairs_per_epoch", d.pairs_per_epoch)?,
            bn_momentum_start: c.get_or("bn_momentum_start", d.bn_momentum_start)?,
            bn_momentum_period: c.get_or("bn_momentum_period", d.bn_momentum_period)?,
            bn_momentum_floor: c.get_or("bn_momentum_floor", d.bn_momentum_floor)?,
            augmentation: AugmentationSpec::from_config(c, seed)?,
            finetune_f2d: c.get_or("finetune_f2d", d.finetune_f2d)?,
            g2d_head: c.get_or("g2d_head", d.g2d_head)?,
            train_g2d: c.get_or("train_g2d", d.train_g2d)?,
            seed,
            model: ModelConfig::from_config(c)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved echo; `from_config(to_config())` is the identity.
    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        c.set("stage", self.stage.number());
        c.set("epochs", self.epochs);
        c.set("batch_size", self.batch_size);
        match self.optimizer {
            OptimizerKind::Adam { .. } => c.set("optimizer", "adam"),
            OptimizerKind::SgdMomentum { momentum } => {
                c.set("optimizer", "sgd");
                c.set("momentum", momentum);
            }
        }
        c.set("lr", self.lr);
        c.set("weight_decay", self.weight_decay);
        match self.schedule {
            LrSchedule::Constant => c.set("schedule", "constant"),
            LrSchedule::StepDecay { gamma, period } => {
                c.set("schedule", "step");
                c.set("step_gamma", gamma);
                c.set("step_period", period);
            }
            LrSchedule::Cosine { t_max, lr_min } => {
                c.set("schedule", "cosine");
                c.set("cosine_t_max", t_max);
                c.set("cosine_lr_min", lr_min);
            }
        }
        c.set("tau", self.tau);
        c.set("lambda_glb", self.weights.global);
        c.set("lambda_pnt", self.weights.pointwise);
        c.set("pair_policy", self.pair_policy);
        c.set("pair_batch", self.pair_batch);
        c.set("pairs_per_epoch", self.pairs_per_epoch);
        c.set("bn_momentum_start", self.bn_momentum_start);
        c.set("bn_momentum_period", self.bn_momentum_period);
        c.set("bn_momentum_floor", self.bn_momentum_floor);
        self.augmentation.write_config(&mut c);
        c.set("finetune_f2d", self.finetune_f2d);
        c.set("g2d_head", self.g2d_head);
        c.set("train_g2d", self.train_g2d);
        c.set("seed", self.seed);
        self.model.write_config(&mut c);
        c
    }

    pub fn bn_momentum(&self, epoch: usize) -> f64 {
        crate::numcore::bn_momentum(epoch, self.bn_momentum_start, self.bn_momentum_period, self.bn_momentum_floor)
    }

    pub fn new_optimizer(&self) -> crate::numcore::OptimizerState {
        let mut st = crate::numcore::OptimizerState::new(self.optimizer, self.lr);
        st.weight_decay = self.weight_decay;
        st
    }
}
