//! Run configuration file: TOML with one table per pipeline stage.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! clips_per_composition = 50
//!
//! [oap]
//! tau_in = 0.1
//!
//! [verb-finetune]
//! mode = "linear-probe"
//! ```
//!
//! Every key is optional except `seed` (which may come from `--seed`
//! instead); omitted keys take the defaults printed by `--dry-run`. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugConfig, PhotometricJitter};
use crate::bench::{
    AopConfig, BaselineConfig, DataConfig, EvalConfig, ExperimentConfig, SplitConfig, SynthSpec,
};
use crate::contrastive::{DenominatorPolicy, LossConfig};
use crate::encoder::{FinetuneMode, TrainConfig};
use crate::prompt::{CropStrategy, PromptConfig, SyntheticProviderConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("no seed: set `seed` in the config or pass --seed")]
    MissingSeed,
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker-count hint for stages that can parallelise.
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub oap: OapSection,
    #[serde(default, rename = "verb-finetune")]
    pub verb_finetune: VerbFinetuneSection,
    #[serde(default)]
    pub aop: AopSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Synthetic generator settings, or `annotations` plus `clips` to load an
/// existing corpus instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub annotations: Option<PathBuf>,
    pub clips: Option<PathBuf>,
    pub num_verbs: usize,
    pub num_objects: usize,
    pub num_novel: usize,
    pub verbs_per_base_object: usize,
    pub clips_per_composition: usize,
    pub novel_clips_per_composition: usize,
    pub train_ratio: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub distractors: usize,
    pub context_distractors: bool,
    pub scene_contrast: f32,
    pub noise: f32,
    pub hand: bool,
}

/// Rule-based split used for loaded corpora (`split` subcommand or
/// `data.annotations`); synthetic data carries its own split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub overlap: Vec<String>,
    pub k: usize,
    pub train_ratio: f64,
    pub tolerance: f64,
    pub max_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OapSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub queue_size: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub diff_channel: bool,
    pub tau_out: f64,
    pub tau_in: f64,
    pub lambda: f64,
    pub denominator: DenominatorPolicy,
    pub alpha: f32,
    pub guide_bag_size: usize,
    pub frames_per_clip: usize,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub blur_prob: f32,
    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerbFinetuneSection {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub lr: f64,
    pub jitter: bool,
    /// Cross-entropy baseline trained from scratch.
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
}

/// Shared by the novel-tuned and base-tuned prompt models except
/// `base_temporal` and `base_lr`, which apply to the base-tuned one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AopSection {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub crop_size: usize,
    pub token_noise: f64,
    pub tokens_per_word: usize,
    pub prefix_len: usize,
    pub postfix_len: usize,
    pub tokens_per_class: usize,
    pub context_init_std: f64,
    pub learn_context: bool,
    pub learn_vocab: bool,
    pub verb_conditioned: bool,
    pub base_temporal: bool,
    pub base_lr: f64,
    pub logit_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub strategy: CropStrategy,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub baseline: bool,
    pub ablation: bool,
}

macro_rules! default_from_experiment {
    ($($ty:ident => $field:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::from_experiment(&ExperimentConfig::default()).$field
            }
        }
    )*};
}

default_from_experiment!(
    DataSection => data,
    SplitSection => split,
    OapSection => oap,
    VerbFinetuneSection => verb_finetune,
    AopSection => aop,
    EvalSection => eval
);

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            ..Self::from_experiment(&ExperimentConfig::default())
        }
    }
}

impl RunConfig {
    pub fn from_experiment(e: &ExperimentConfig) -> Self {
        let s = &e.data.synth;
        let o = &e.oap;
        let p = &e.aop.novel;
        Self {
            seed: Some(e.seed),
            threads: None,
            data: DataSection {
                annotations: e.data.annotations.clone(),
                clips: e.data.clips.clone(),
                num_verbs: s.num_verbs,
                num_objects: s.num_objects,
                num_novel: s.num_novel,
                verbs_per_base_object: s.verbs_per_base_object,
                clips_per_composition: s.clips_per_composition,
                novel_clips_per_composition: s.novel_clips_per_composition,
                train_ratio: s.train_ratio,
                frames: s.frames,
                height: s.height,
                width: s.width,
                channels: s.channels,
                distractors: s.distractors,
                context_distractors: s.context_distractors,
                scene_contrast: s.scene_contrast,
                noise: s.noise,
                hand: s.hand,
            },
            split: SplitSection {
                overlap: e.split.overlap.clone(),
                k: e.split.k,
                train_ratio: e.split.train_ratio,
                tolerance: e.split.tolerance,
                max_attempts: e.split.max_attempts,
            },
            oap: OapSection {
                epochs: o.pretrain_epochs,
                batch_size: o.batch_size,
                lr: o.lr,
                weight_decay: o.weight_decay,
                warmup_epochs: o.warmup_epochs,
                momentum: o.momentum,
                queue_size: o.queue_size,
                hidden: o.hidden.clone(),
                embed_dim: o.embed_dim,
                diff_channel: o.diff_channel,
                tau_out: o.loss.tau_out,
                tau_in: o.loss.tau_in,
                lambda: o.loss.lambda,
                denominator: o.loss.policy,
                alpha: o.aug.alpha,
                guide_bag_size: o.aug.guide_bag_size,
                frames_per_clip: o.aug.frames_per_clip,
                brightness: o.aug.jitter.brightness,
                contrast: o.aug.jitter.contrast,
                saturation: o.aug.jitter.saturation,
                blur_prob: o.aug.jitter.blur_prob,
                blur_sigma_min: o.aug.jitter.blur_sigma.0,
                blur_sigma_max: o.aug.jitter.blur_sigma.1,
            },
            verb_finetune: VerbFinetuneSection {
                mode: o.finetune_mode,
                epochs: o.finetune_epochs,
                lr: o.finetune_lr,
                jitter: o.finetune_jitter,
                baseline_epochs: e.baseline.epochs,
                baseline_lr: e.baseline.lr,
            },
            aop: AopSection {
                token_dim: e.aop.provider.token_dim,
                embed_dim: e.aop.provider.embed_dim,
                crop_size: e.aop.provider.crop_size,
                token_noise: e.aop.token_noise,
                tokens_per_word: e.aop.tokens_per_word,
                prefix_len: p.prefix_len,
                postfix_len: p.postfix_len,
                tokens_per_class: p.tokens_per_class,
                context_init_std: p.context_init_std,
                learn_context: p.learn_context,
                learn_vocab: p.learn_vocab,
                verb_conditioned: p.verb_conditioned,
                base_temporal: e.aop.base.temporal,
                base_lr: e.aop.base.lr,
                logit_scale: p.logit_scale,
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                warmup_epochs: p.warmup_epochs,
                weight_decay: p.weight_decay,
                strategy: p.strategy,
                gamma: e.aop.gamma,
            },
            eval: EvalSection {
                baseline: e.eval.baseline,
                ablation: e.eval.ablation,
            },
        }
    }

    /// Parses a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.into(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.annotations, &mut cfg.data.clips]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The experiment this config describes, seed included.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let seed = self.seed.ok_or(ConfigError::MissingSeed)?;
        let d = &self.data;
        let o = &self.oap;
        let v = &self.verb_finetune;
        let a = &self.aop;
        let prompt = PromptConfig {
            prefix_len: a.prefix_len,
            postfix_len: a.postfix_len,
            tokens_per_class: a.tokens_per_class,
            context_init_std: a.context_init_std,
            learn_context: a.learn_context,
            learn_vocab: a.learn_vocab,
            verb_conditioned: a.verb_conditioned,
            temporal: false,
            logit_scale: a.logit_scale,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            warmup_epochs: a.warmup_epochs,
            weight_decay: a.weight_decay,
            strategy: a.strategy,
            seed,
        };
        let cfg = ExperimentConfig {
            seed,
            data: DataConfig {
                synth: SynthSpec {
                    num_verbs: d.num_verbs,
                    num_objects: d.num_objects,
                    num_novel: d.num_novel,
                    verbs_per_base_object: d.verbs_per_base_object,
                    clips_per_composition: d.clips_per_composition,
                    novel_clips_per_composition: d.novel_clips_per_composition,
                    train_ratio: d.train_ratio,
                    frames: d.frames,
                    height: d.height,
                    width: d.width,
                    channels: d.channels,
                    distractors: d.distractors,
                    context_distractors: d.context_distractors,
                    scene_contrast: d.scene_contrast,
                    noise: d.noise,
                    hand: d.hand,
                    seed,
                },
                annotations: d.annotations.clone(),
                clips: d.clips.clone(),
            },
            split: SplitConfig {
                overlap: self.split.overlap.clone(),
                k: self.split.k,
                train_ratio: self.split.train_ratio,
                tolerance: self.split.tolerance,
                max_attempts: self.split.max_attempts,
                seed,
            },
            oap: TrainConfig {
                pretrain_epochs: o.epochs,
                finetune_epochs: v.epochs,
                batch_size: o.batch_size,
                lr: o.lr,
                finetune_lr: v.lr,
                weight_decay: o.weight_decay,
                warmup_epochs: o.warmup_epochs,
                momentum: o.momentum,
                queue_size: o.queue_size,
                hidden: o.hidden.clone(),
                embed_dim: o.embed_dim,
                diff_channel: o.diff_channel,
                finetune_mode: v.mode,
                finetune_jitter: v.jitter,
                seed,
                loss: LossConfig {
                    tau_out: o.tau_out,
                    tau_in: o.tau_in,
                    lambda: o.lambda,
                    policy: o.denominator,
                },
                aug: AugConfig {
                    alpha: o.alpha,
                    guide_bag_size: o.guide_bag_size,
                    crop: None,
                    frames_per_clip: o.frames_per_clip,
                    jitter: PhotometricJitter {
                        brightness: o.brightness,
                        contrast: o.contrast,
                        saturation: o.saturation,
                        blur_prob: o.blur_prob,
                        blur_sigma: (o.blur_sigma_min, o.blur_sigma_max),
                    },
                },
            },
            baseline: BaselineConfig {
                epochs: v.baseline_epochs,
                lr: v.baseline_lr,
            },
            aop: AopConfig {
                provider: SyntheticProviderConfig {
                    token_dim: a.token_dim,
                    embed_dim: a.embed_dim,
                    crop_size: a.crop_size,
                    channels: d.channels,
                    seed,
                },
                token_noise: a.token_noise,
                tokens_per_word: a.tokens_per_word,
                base: PromptConfig {
                    temporal: a.base_temporal,
                    lr: a.base_lr,
                    ..prompt.clone()
                },
                novel: prompt,
                gamma: a.gamma,
            },
            eval: EvalConfig {
                baseline: self.eval.baseline,
                ablation: self.eval.ablation,
            },
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}
