//! Run configuration: every tunable in one flat, dotted-key JSON object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::losses::LossWeights;
use crate::mask::{Connectivity, MaskConfig, ThresholdMethod};
use crate::schedule::{make_schedule, DiffusionSchedule};
use crate::toy::VOCAB_SIZE;
use crate::training::{GradRouting, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    #[default]
    Otsu,
    Fixed,
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 3] = ["default", "paper-lr", "smoke"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "seed")]
    pub seed: u64,

    #[serde(rename = "schedule.steps")]
    pub schedule_steps: usize,
    #[serde(rename = "schedule.beta_start")]
    pub beta_start: f64,
    #[serde(rename = "schedule.beta_end")]
    pub beta_end: f64,

    #[serde(rename = "sampler.ddim_steps")]
    pub ddim_steps: usize,
    #[serde(rename = "sampler.eta")]
    pub eta: f64,
    #[serde(rename = "cfg.scale")]
    pub guidance_scale: f64,
    /// Guide each pathway before fusing instead of guiding the fused
    /// prediction once.
    #[serde(rename = "cfg.per_pathway")]
    pub cfg_per_pathway: bool,

    #[serde(rename = "model.image_size")]
    pub image_size: usize,
    #[serde(rename = "model.base_channels")]
    pub base_channels: usize,
    #[serde(rename = "model.channel_mults")]
    pub channel_mults: Vec<usize>,
    #[serde(rename = "model.attention_levels")]
    pub attention_levels: Vec<usize>,
    #[serde(rename = "model.heads")]
    pub heads: usize,
    #[serde(rename = "model.text_dim")]
    pub text_dim: usize,
    #[serde(rename = "model.time_dim")]
    pub time_dim: usize,
    #[serde(rename = "model.norm_groups")]
    pub norm_groups: usize,
    #[serde(rename = "model.image_null_key")]
    pub image_null_key: bool,

    #[serde(rename = "adapter.n_tokens")]
    pub adapter_tokens: usize,
    #[serde(rename = "adapter.hidden")]
    pub adapter_hidden: usize,
    #[serde(rename = "alpha.iea")]
    pub alpha_iea: f64,
    #[serde(rename = "alpha.tca")]
    pub alpha_tca: f64,

    #[serde(rename = "fusion.mode")]
    pub fusion_mode: FusionMode,
    /// Fuse two strengths of a single adapter instead of IEA and TCA.
    #[serde(rename = "fusion.training_free")]
    pub training_free: bool,
    #[serde(rename = "fusion.alpha_strong")]
    pub alpha_strong: f64,
    #[serde(rename = "fusion.alpha_weak")]
    pub alpha_weak: f64,
    #[serde(rename = "ffb.private_streams")]
    pub private_streams: bool,

    #[serde(rename = "mask.method")]
    pub mask_method: MaskMethod,
    #[serde(rename = "mask.tau")]
    pub mask_tau: f64,
    #[serde(rename = "mask.connectivity")]
    pub mask_connectivity: u32,
    /// Indices into the DDIM step sequence whose attention is recorded;
    /// `null` records every step.
    #[serde(rename = "mask.record_steps")]
    pub record_steps: Option<Vec<usize>>,
    /// Attention layer ids to record; `null` records every layer.
    #[serde(rename = "mask.record_layers")]
    pub record_layers: Option<Vec<String>>,

    #[serde(rename = "train.base_steps")]
    pub base_steps: usize,
    #[serde(rename = "train.adapter_steps")]
    pub adapter_steps: usize,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    /// Stage-1 learning rate.
    #[serde(rename = "train.lr")]
    pub lr: f64,
    /// Stage-2 learning rate.
    #[serde(rename = "train.adapter_lr")]
    pub adapter_lr: f64,
    #[serde(rename = "train.text_dropout")]
    pub text_dropout: f64,
    #[serde(rename = "train.flip_prob")]
    pub flip_prob: f64,
    /// Weight EMA decay for both stages; 0 disables.
    #[serde(rename = "train.ema_decay")]
    pub ema_decay: f64,
    #[serde(rename = "train.routing")]
    pub routing: GradRouting,
    #[serde(rename = "loss.w_iea")]
    pub w_iea: f64,
    #[serde(rename = "loss.w_tca")]
    pub w_tca: f64,
    #[serde(rename = "loss.w_fusion")]
    pub w_fusion: f64,

    #[serde(rename = "data.identities")]
    pub identities: usize,
    #[serde(rename = "data.per_identity")]
    pub per_identity: usize,
    #[serde(rename = "eval.images_per_prompt")]
    pub images_per_prompt: usize,

    #[serde(rename = "paths.dataset")]
    pub dataset_path: Option<String>,
    #[serde(rename = "paths.base_ckpt")]
    pub base_ckpt_path: Option<String>,
    #[serde(rename = "paths.adapter_ckpt")]
    pub adapter_ckpt_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let a = AdapterConfig::default();
        let t = TrainConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            eta: 0.0,
            guidance_scale: 5.0,
            cfg_per_pathway: false,
            image_size: b.image_size,
            base_channels: 16,
            channel_mults: b.channel_mults,
            attention_levels: b.attention_levels,
            heads: b.heads,
            text_dim: b.text_dim,
            time_dim: b.time_dim,
            norm_groups: b.norm_groups,
            image_null_key: b.image_null_key,
            adapter_tokens: a.n_tokens,
            adapter_hidden: a.hidden,
            alpha_iea: t.alpha_iea,
            alpha_tca: t.alpha_tca,
            fusion_mode: FusionMode::Blended,
            training_free: false,
            alpha_strong: 1.0,
            alpha_weak: 0.5,
            private_streams: false,
            mask_method: MaskMethod::Otsu,
            mask_tau: 0.5,
            mask_connectivity: 4,
            record_steps: None,
            record_layers: None,
            base_steps: 2500,
            adapter_steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            adapter_lr: 5e-4,
            text_dropout: t.text_dropout,
            flip_prob: t.flip_prob,
            ema_decay: 0.999,
            routing: GradRouting::PerPathway,
            w_iea: w.iea,
            w_tca: w.tca,
            w_fusion: w.fusion,
            identities: 30,
            per_identity: 12,
            images_per_prompt: 4,
            dataset_path: None,
            base_ckpt_path: None,
            adapter_ckpt_path: None,
        }
    }
}

impl RunConfig {
    /// Named starting points. `paper-lr` keeps the large-model learning
    /// rate of 1e-5; `smoke` is a seconds-long end-to-end run.
    pub fn preset(name: &str) -> Result<Self> {
        let d = Self::default();
        match name {
            "default" => Ok(d),
            "paper-lr" => Ok(Self { lr: 1e-5, adapter_lr: 1e-5, ..d }),
            "smoke" => Ok(Self {
                base_channels: 8,
                channel_mults: vec![1, 2],
                attention_levels: vec![1],
                text_dim: 16,
                time_dim: 16,
                norm_groups: 4,
                adapter_hidden: 16,
                ddim_steps: 4,
                base_steps: 10,
                adapter_steps: 10,
                batch_size: 4,
                ema_decay: 0.0,
                identities: 2,
                per_identity: 4,
                images_per_prompt: 1,
                ..d
            }),
            _ => Err(Error::Parameter(format!(
                "unknown preset `{name}` (expected one of {PRESETS:?})"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        self.backbone_config().validate()?;
        self.schedule()?;
        if self.ddim_steps == 0 || self.ddim_steps > self.schedule_steps {
            return fail(format!("sampler.ddim_steps {} outside [1, schedule.steps]", self.ddim_steps));
        }
        let finite = [
            ("sampler.eta", self.eta),
            ("cfg.scale", self.guidance_scale),
            ("alpha.iea", self.alpha_iea),
            ("alpha.tca", self.alpha_tca),
            ("fusion.alpha_strong", self.alpha_strong),
            ("fusion.alpha_weak", self.alpha_weak),
            ("train.lr", self.lr),
            ("train.adapter_lr", self.adapter_lr),
            ("loss.w_iea", self.w_iea),
            ("loss.w_tca", self.w_tca),
            ("loss.w_fusion", self.w_fusion),
        ];
        for (name, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.training_free && self.alpha_strong <= self.alpha_weak {
            return fail("fusion.alpha_strong must exceed fusion.alpha_weak".into());
        }
        if !(self.mask_tau > 0.0 && self.mask_tau <= 1.0) {
            return fail(format!("mask.tau {} outside (0, 1]", self.mask_tau));
        }
        Connectivity::from_count(self.mask_connectivity)?;
        if let Some(steps) = &self.record_steps {
            if steps.is_empty() || steps.iter().any(|&s| s >= self.ddim_steps) {
                return fail("mask.record_steps must be nonempty indices below sampler.ddim_steps".into());
            }
        }
        if let Some(layers) = &self.record_layers {
            let known = self.backbone_config().attention_layers();
            if let Some(bad) = layers.iter().find(|l| !known.contains(l)) {
                return fail(format!("mask.record_layers names unknown layer `{bad}`"));
            }
            if layers.is_empty() {
                return fail("mask.record_layers must not be empty".into());
            }
        }
        for (name, p) in [("train.text_dropout", self.text_dropout), ("train.flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("train.ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 || self.lr == 0.0 || self.adapter_lr == 0.0 {
            return fail("train.batch_size, train.lr and train.adapter_lr must be positive".into());
        }
        if self.images_per_prompt == 0 {
            return fail("eval.images_per_prompt must be positive".into());
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            attention_levels: self.attention_levels.clone(),
            heads: self.heads,
            text_dim: self.text_dim,
            time_dim: self.time_dim,
            vocab_size: VOCAB_SIZE,
            norm_groups: self.norm_groups,
            image_null_key: self.image_null_key,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            n_tokens: self.adapter_tokens,
            hidden: self.adapter_hidden,
            token_dim: self.text_dim,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            iea: self.w_iea,
            tca: self.w_tca,
            fusion: self.w_fusion,
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            threshold: match self.mask_method {
                MaskMethod::Otsu => ThresholdMethod::Otsu,
                MaskMethod::Fixed => ThresholdMethod::Fixed(self.mask_tau),
            },
            connectivity: Connectivity::from_count(self.mask_connectivity)
                .unwrap_or(Connectivity::Four),
        }
    }

    /// Stage-1 training settings.
    pub fn base_train_config(&self) -> TrainConfig {
        self.train_config(self.base_steps, self.lr)
    }

    /// Stage-2 training settings.
    pub fn adapter_train_config(&self) -> TrainConfig {
        self.train_config(self.adapter_steps, self.adapter_lr)
    }

    fn train_config(&self, steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            lr,
            text_dropout: self.text_dropout,
            flip_prob: self.flip_prob,
            ema_decay: self.ema_decay,
            seed: self.seed,
            weights: self.loss_weights(),
            fusion: self.fusion_mode,
            private_streams: self.private_streams,
            routing: self.routing,
            alpha_iea: self.alpha_iea,
            alpha_tca: self.alpha_tca,
        }
    }
}
