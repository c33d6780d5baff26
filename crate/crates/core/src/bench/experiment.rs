//! End-to-end pipeline: data, split, contrastive pretraining, verb
//! fine-tuning, prompt training, classification and evaluation, for the
//! full method and for a cross-entropy / zero-shot baseline arm that shares
//! the data, split and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::{
    build_ov_split, evaluate, gen_synthetic_dataset, load_annotations, partition, read_clips,
    render_composition, write_annotations, write_clips, Appearance, BenchError, MetricsReport,
    Placement, SplitConfig, SplitSpec, SynthSpec, Verb,
};
use crate::augment::Clip;
use crate::bench::{AnnotationTable, LabelVocab};
use crate::encoder::{
    finetune_verb, predict_verbs, train_oap, write_checkpoint, Checkpoint, Classifier, Encoder,
    FinetuneMode, InputSpec, OapOutcome, TrainConfig, TrainingSet,
};
use crate::numerics::{normalize, Matrix, SeededRng, Vector};
use crate::prompt::{
    classify_embedded, embed_frames, ensemble, train_prompts, CropSet, EnsembleConfig,
    PromptConfig, PromptModel, PromptSample, PromptTrainLog, SyntheticProvider,
    SyntheticProviderConfig, Vocabulary,
};

const STREAM_TOKENS: u64 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Split,
    Pretrain,
    FinetuneVerb,
    TrainPrompts,
    Classify,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Pretrain => "pretrain",
            Stage::FinetuneVerb => "finetune-verb",
            Stage::TrainPrompts => "train-prompts",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct ExperimentError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl ExperimentError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, ExperimentError>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, ExperimentError> {
        self.map_err(|e| ExperimentError::new(stage, e))
    }
}

/// Where clips come from: generated, or an annotation CSV plus a clip store
/// with one clip per annotation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub synth: SynthSpec,
    pub annotations: Option<PathBuf>,
    pub clips: Option<PathBuf>,
}

/// The cross-entropy arm: a fresh backbone trained end to end on verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopConfig {
    pub provider: SyntheticProviderConfig,
    /// Expected norm of the noise on pretrained word tokens.
    pub token_noise: f64,
    pub tokens_per_word: usize,
    /// Model tuned for novel classes.
    pub novel: PromptConfig,
    /// Model tuned for base classes.
    pub base: PromptConfig,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub baseline: bool,
    /// Also train the frozen-vocabulary and unconditioned prompt variants.
    pub ablation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub oap: TrainConfig,
    pub baseline: BaselineConfig,
    pub aop: AopConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let oap = TrainConfig {
            finetune_mode: FinetuneMode::LinearProbe,
            finetune_epochs: 30,
            finetune_lr: 1e-2,
            ..TrainConfig::default()
        };
        let prompt = PromptConfig {
            lr: 1e-3,
            ..PromptConfig::novel_preset()
        };
        Self {
            seed: 0,
            data: DataConfig {
                synth: SynthSpec {
                    verbs_per_base_object: 2,
                    scene_contrast: 0.3,
                    ..SynthSpec::default()
                },
                annotations: None,
                clips: None,
            },
            split: SplitConfig::default(),
            baseline: BaselineConfig {
                epochs: oap.pretrain_epochs + oap.finetune_epochs,
                lr: oap.finetune_lr,
            },
            oap,
            aop: AopConfig {
                provider: SyntheticProviderConfig::default(),
                token_noise: 1.0,
                tokens_per_word: 1,
                base: PromptConfig {
                    temporal: true,
                    lr: 1e-2,
                    ..prompt.clone()
                },
                novel: prompt,
                gamma: EnsembleConfig::DEFAULT_GAMMA,
            },
            eval: EvalConfig {
                baseline: true,
                ablation: false,
            },
        }
    }
}

impl ExperimentConfig {
    /// Copy with the master seed pushed into every stage.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.data.synth.seed = c.seed;
        c.split.seed = c.seed;
        c.oap.seed = c.seed;
        c.aop.provider.seed = c.seed;
        c.aop.novel.seed = c.seed;
        c.aop.base.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let c = self.seeded();
        if c.data.annotations.is_some() != c.data.clips.is_some() {
            return Err(ExperimentError::new(
                Stage::Data,
                "annotations and clips must be given together",
            ));
        }
        c.data.synth.validate().at(Stage::Data)?;
        c.oap.validate().at(Stage::Pretrain)?;
        if c.baseline.epochs == 0 || !(c.baseline.lr > 0.0) {
            return Err(ExperimentError::new(
                Stage::FinetuneVerb,
                "baseline needs epochs >= 1 and lr > 0",
            ));
        }
        c.aop.novel.validate().at(Stage::TrainPrompts)?;
        c.aop.base.validate().at(Stage::TrainPrompts)?;
        EnsembleConfig::new(c.aop.gamma, Vec::new()).at(Stage::TrainPrompts)?;
        SyntheticProvider::new(c.aop.provider).at(Stage::TrainPrompts)?;
        Ok(())
    }
}

/// Clips, their annotation rows and the split, plus the synthetic spec the
/// object appearances came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub table: AnnotationTable,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn num_verbs(&self) -> usize {
        self.table.verbs().len()
    }

    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        partition(&self.table, &self.split)
    }

    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        fs::create_dir_all(dir)?;
        write_annotations(&dir.join(ANNOTATIONS_FILE), &self.table)?;
        let labels = LabelVocab {
            verbs: self.table.verbs().to_vec(),
            objects: self.table.objects().to_vec(),
        };
        let labels =
            toml::to_string(&labels).map_err(|e| BenchError::SpecInvalid(e.to_string()))?;
        fs::write(dir.join(LABELS_FILE), labels)?;
        write_clips(&dir.join(CLIPS_FILE), &self.clips)?;
        fs::write(dir.join(SPLIT_FILE), self.split.to_toml()?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, BenchError> {
        let table = load_annotations(&dir.join(ANNOTATIONS_FILE), read_labels(dir)?.as_ref())?;
        let clips = read_clips(&dir.join(CLIPS_FILE))?;
        let split = SplitSpec::from_toml(&fs::read_to_string(dir.join(SPLIT_FILE))?)?;
        Self::checked(clips, table, split)
    }

    fn checked(
        clips: Vec<Clip>,
        table: AnnotationTable,
        split: SplitSpec,
    ) -> Result<Self, BenchError> {
        if clips.len() != table.len() {
            return Err(BenchError::SpecInvalid(format!(
                "{} clips for {} annotation rows",
                clips.len(),
                table.len()
            )));
        }
        split.check(&table).map_err(BenchError::SpecInvalid)?;
        Ok(Self {
            clips,
            table,
            split,
        })
    }
}

/// Label order written next to the annotations, so verb and object ids
/// survive a round trip through the CSV. Optional when reading.
pub fn read_labels(dir: &Path) -> Result<Option<LabelVocab>, BenchError> {
    let path = dir.join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| BenchError::SpecInvalid(format!("{}: {e}", path.display())))
}

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const LABELS_FILE: &str = "labels.toml";
pub const CLIPS_FILE: &str = "clips.clp";
pub const SPLIT_FILE: &str = "split.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const OAP_CHECKPOINT: &str = "oap.ckpt";
pub const VERB_CHECKPOINT: &str = "verb.ckpt";
pub const BASELINE_CHECKPOINT: &str = "verb_baseline.ckpt";
pub const PROMPTS_NOVEL: &str = "prompts_novel.json";
pub const PROMPTS_BASE: &str = "prompts_base.json";

/// Generates the synthetic dataset, or loads annotations and clips and
/// builds an open-vocabulary split over them.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let cfg = cfg.seeded();
    match (&cfg.data.annotations, &cfg.data.clips) {
        (Some(ann), Some(clips)) => {
            let table = load_annotations(ann, None).at(Stage::Data)?;
            let clips = read_clips(clips).at(Stage::Data)?;
            let split = build_ov_split(&table, &cfg.split).at(Stage::Split)?;
            Dataset::checked(clips, table, split).at(Stage::Data)
        }
        _ => {
            let ds = gen_synthetic_dataset(&cfg.data.synth).at(Stage::Data)?;
            Ok(Dataset {
                clips: ds.clips,
                table: ds.table,
                split: ds.split,
            })
        }
    }
}

fn training_labels(ds: &Dataset, rows: &[usize]) -> (Vec<Clip>, Vec<usize>, Vec<usize>) {
    let clips = rows.iter().map(|&i| ds.clips[i].clone()).collect();
    let verbs = rows.iter().map(|&i| ds.table.verb_id(i)).collect();
    let objects = rows.iter().map(|&i| ds.table.object_id(i)).collect();
    (clips, verbs, objects)
}

pub fn pretrain_stage(ds: &Dataset, cfg: &ExperimentConfig) -> Result<OapOutcome, ExperimentError> {
    let cfg = cfg.seeded();
    let (train, _) = ds.partition();
    let (clips, verbs, objects) = training_labels(ds, &train);
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: ds.num_verbs(),
    };
    train_oap(&data, &cfg.oap).at(Stage::Pretrain)
}

/// Verb classifier over a pretrained backbone, or, with `encoder = None`,
/// the cross-entropy baseline trained from a fresh backbone.
pub fn finetune_stage(
    ds: &Dataset,
    encoder: Option<Encoder<f32>>,
    cfg: &ExperimentConfig,
) -> Result<(Encoder<f32>, Classifier<f32>), ExperimentError> {
    let cfg = cfg.seeded();
    let (train, _) = ds.partition();
    let (clips, verbs, objects) = training_labels(ds, &train);
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: ds.num_verbs(),
    };
    let (mut enc, tcfg, mode, epochs) = match encoder {
        Some(enc) => (
            enc,
            cfg.oap.clone(),
            cfg.oap.finetune_mode,
            cfg.oap.finetune_epochs,
        ),
        None => {
            let first = clips
                .first()
                .ok_or_else(|| ExperimentError::new(Stage::FinetuneVerb, "no training clips"))?;
            let enc = cfg
                .oap
                .init_encoder(InputSpec::of_clip(first, cfg.oap.diff_channel))
                .at(Stage::FinetuneVerb)?;
            let tcfg = TrainConfig {
                finetune_lr: cfg.baseline.lr,
                ..cfg.oap.clone()
            };
            (enc, tcfg, FinetuneMode::Full, cfg.baseline.epochs)
        }
    };
    let (cls, _) = finetune_verb(&mut enc, &data, &tcfg, mode, epochs).at(Stage::FinetuneVerb)?;
    Ok((enc, cls))
}

/// Frozen provider, pretrained tokens, per-frame image embeddings of every
/// clip and backbone verb features: everything prompt training consumes.
pub struct ObjectInputs {
    pub provider: SyntheticProvider,
    pub vocab: Vocabulary,
    pub frames: Vec<Matrix>,
    pub features: Vec<Vector>,
    /// Frames whose crop strategy fell back to the full frame.
    pub fallbacks: usize,
}

/// Mean provider embedding of each object rendered alone at the frame
/// centre over a few sizes: the provider's prior knowledge of every class.
fn object_prototypes(
    provider: &SyntheticProvider,
    objects: &[String],
    shape: [usize; 4],
) -> Result<Vec<Vector>, ExperimentError> {
    let known: Vec<String> = (0..12).map(|o| Appearance::from_index(o).name()).collect();
    let mut out = Vec::with_capacity(objects.len());
    for name in objects {
        let index = known.iter().position(|k| k == name).ok_or_else(|| {
            ExperimentError::new(
                Stage::TrainPrompts,
                format!("the synthetic provider has no prior for object `{name}`"),
            )
        })?;
        let mut sum = Vector::zeros(provider.config().embed_dim);
        for radius in [2.5f32, 3.0, 3.5, 4.0] {
            let start = Placement {
                cx: shape[2] as f32 / 2.0,
                cy: shape[1] as f32 / 2.0,
                radius,
                intensity: 0.8,
            };
            let clip = render_composition(
                Verb::Translate { dx: 0, dy: 0 },
                Appearance::from_index(index),
                start,
                [1, shape[1], shape[2], shape[3]],
            );
            let frame = clip.data().index_axis(Axis(0), 0);
            let region = painted_region(frame.view())
                .ok_or_else(|| ExperimentError::new(Stage::TrainPrompts, "empty render"))?;
            sum += &provider
                .encode_pixels(frame, &region)
                .at(Stage::TrainPrompts)?;
        }
        out.push(normalize(sum.view()).at(Stage::TrainPrompts)?);
    }
    Ok(out)
}

fn painted_region(frame: ndarray::ArrayView3<'_, f32>) -> Option<crate::prompt::Region> {
    let mut b: Option<[usize; 4]> = None;
    for ((y, x, _), &v) in frame.indexed_iter() {
        if v > 0.0 {
            let e = b.get_or_insert([x, y, x, y]);
            *e = [e[0].min(x), e[1].min(y), e[2].max(x), e[3].max(y)];
        }
    }
    b.map(|[x1, y1, x2, y2]| crate::prompt::Region {
        x1,
        y1,
        x2: x2 + 1,
        y2: y2 + 1,
    })
}

pub fn object_inputs(
    ds: &Dataset,
    verb_encoder: &Encoder<f32>,
    cfg: &ExperimentConfig,
) -> Result<ObjectInputs, ExperimentError> {
    let cfg = cfg.seeded();
    let shape = ds
        .clips
        .first()
        .map(Clip::shape)
        .ok_or_else(|| ExperimentError::new(Stage::Data, "no clips"))?;
    let provider = SyntheticProvider::new(SyntheticProviderConfig {
        channels: shape[3],
        ..cfg.aop.provider
    })
    .at(Stage::TrainPrompts)?;
    let prototypes = object_prototypes(&provider, ds.table.objects(), shape)?;
    let mut rng = SeededRng::new(cfg.seed, STREAM_TOKENS);
    let tokens = provider
        .pretrained_tokens(
            &prototypes,
            cfg.aop.token_noise,
            cfg.aop.tokens_per_word,
            &mut rng,
        )
        .at(Stage::TrainPrompts)?;
    let novel: Vec<bool> = ds
        .table
        .objects()
        .iter()
        .map(|o| ds.split.is_novel(o))
        .collect();
    let vocab = Vocabulary::new(
        ds.table.objects().to_vec(),
        tokens,
        &novel,
        cfg.aop.novel.tokens_per_class,
    )
    .at(Stage::TrainPrompts)?;

    let mut frames = Vec::with_capacity(ds.clips.len());
    let mut fallbacks = 0;
    for (r, clip) in ds.clips.iter().enumerate() {
        let row = &ds.table.rows()[r];
        let sets = (0..clip.frames())
            .map(|t| {
                let id = format!("{}:{t}", row.segment_id);
                CropSet::from_frame(id, clip.data().index_axis(Axis(0), t), t, &row.boxes)
            })
            .collect::<Result<Vec<_>, _>>()
            .at(Stage::Classify)?;
        let (emb, fb) =
            embed_frames(&sets, &provider, cfg.aop.novel.strategy).at(Stage::Classify)?;
        fallbacks += fb;
        frames.push(emb);
    }
    let mut features = Vec::with_capacity(ds.clips.len());
    for chunk in ds.clips.chunks(256) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let f = verb_encoder.features(&refs).at(Stage::Classify)?;
        features.extend(f.outer_iter().map(|row| row.mapv(f64::from)));
    }
    Ok(ObjectInputs {
        provider,
        vocab,
        frames,
        features,
        fallbacks,
    })
}

fn prompt_samples(inputs: &ObjectInputs, ds: &Dataset, rows: &[usize]) -> Vec<PromptSample> {
    rows.iter()
        .map(|&i| PromptSample {
            frames: inputs.frames[i].clone(),
            verb_feature: Some(inputs.features[i].clone()),
            label: ds.table.object_id(i),
        })
        .collect()
}

pub fn train_prompt_model(
    inputs: &ObjectInputs,
    ds: &Dataset,
    pcfg: &PromptConfig,
) -> Result<(PromptModel, PromptTrainLog), ExperimentError> {
    let (train, _) = ds.partition();
    let frames = inputs.frames.first().map_or(0, |f| f.nrows());
    let feature_dim = inputs.features.first().map_or(0, |f| f.len());
    let mut model = PromptModel::from_config(pcfg, inputs.vocab.clone(), feature_dim, frames)
        .at(Stage::TrainPrompts)?;
    let log = train_prompts(
        &mut model,
        &prompt_samples(inputs, ds, &train),
        &inputs.provider,
        pcfg,
    )
    .at(Stage::TrainPrompts)?;
    Ok((model, log))
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len())
        .max_by(|&a, &b| p[a].total_cmp(&p[b]))
        .unwrap_or(0)
}

/// Object predictions (label ids) for `rows`; with two models, their
/// base/novel ensemble.
pub fn predict_objects(
    inputs: &ObjectInputs,
    rows: &[usize],
    novel_model: &PromptModel,
    base_model: Option<&PromptModel>,
    gamma: f64,
) -> Result<Vec<usize>, ExperimentError> {
    let ens = EnsembleConfig::new(gamma, inputs.vocab.novel_mask()).at(Stage::Classify)?;
    rows.iter()
        .map(|&i| {
            let f = Some(&inputs.features[i]);
            let pn = classify_embedded(novel_model, &inputs.provider, &inputs.frames[i], f)
                .at(Stage::Classify)?;
            let p = match base_model {
                Some(b) => {
                    let pb = classify_embedded(b, &inputs.provider, &inputs.frames[i], f)
                        .at(Stage::Classify)?;
                    ensemble(pb.as_slice().unwrap(), pn.as_slice().unwrap(), &ens)
                        .at(Stage::Classify)?
                }
                None => pn,
            };
            Ok(argmax(p.as_slice().expect("contiguous")))
        })
        .collect()
}

pub fn predict_verb_ids(
    ds: &Dataset,
    rows: &[usize],
    enc: &Encoder<f32>,
    cls: &Classifier<f32>,
) -> Result<Vec<usize>, ExperimentError> {
    let refs: Vec<&Clip> = rows.iter().map(|&i| &ds.clips[i]).collect();
    let probs = predict_verbs(&refs, enc, cls).at(Stage::Classify)?;
    Ok(probs.iter().map(|p| argmax(p)).collect())
}

pub fn evaluate_predictions(
    ds: &Dataset,
    rows: &[usize],
    verbs: &[usize],
    objects: &[usize],
) -> Result<MetricsReport, ExperimentError> {
    let key = |ids: &[usize]| -> BTreeMap<String, usize> {
        rows.iter()
            .zip(ids)
            .map(|(&r, &id)| (ds.table.rows()[r].segment_id.clone(), id))
            .collect()
    };
    evaluate(&key(verbs), &key(objects), &ds.table, &ds.split).at(Stage::Evaluate)
}

/// Base-object Top-1 (closed test segments) of prompt-model variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopAblation {
    pub frozen_vocab: f64,
    pub tuned_vocab: f64,
    pub unconditioned_start: f64,
    pub conditioned_start: f64,
    pub conditioned_end: f64,
}

fn closed_object_top1(
    inputs: &ObjectInputs,
    ds: &Dataset,
    rows: &[usize],
    model: &PromptModel,
) -> Result<f64, ExperimentError> {
    let closed: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&r| !ds.split.is_novel(&ds.table.rows()[r].object))
        .collect();
    let pred = predict_objects(inputs, &closed, model, None, 1.0)?;
    let hits = closed
        .iter()
        .zip(&pred)
        .filter(|(&r, &p)| ds.table.object_id(r) == p)
        .count();
    Ok(if closed.is_empty() {
        0.0
    } else {
        100.0 * hits as f64 / closed.len() as f64
    })
}

pub fn aop_ablation(
    inputs: &ObjectInputs,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<AopAblation, ExperimentError> {
    let cfg = cfg.seeded();
    let (_, test) = ds.partition();
    let frames = inputs.frames.first().map_or(0, |f| f.nrows());
    let feature_dim = inputs.features.first().map_or(0, |f| f.len());
    let variant = |learn_vocab, verb_conditioned| PromptConfig {
        learn_vocab,
        verb_conditioned,
        temporal: false,
        ..cfg.aop.novel.clone()
    };
    let top1 = |m: &PromptModel| closed_object_top1(inputs, ds, &test, m);
    let (frozen, _) = train_prompt_model(inputs, ds, &variant(false, false))?;
    let unconditioned_cfg = variant(true, false);
    let conditioned_cfg = variant(true, true);
    let init = |c: &PromptConfig| {
        PromptModel::from_config(c, inputs.vocab.clone(), feature_dim, frames)
            .at(Stage::TrainPrompts)
    };
    let unconditioned_start = top1(&init(&unconditioned_cfg)?)?;
    let conditioned_start = top1(&init(&conditioned_cfg)?)?;
    let (tuned, _) = train_prompt_model(inputs, ds, &unconditioned_cfg)?;
    let (conditioned, _) = train_prompt_model(inputs, ds, &conditioned_cfg)?;
    Ok(AopAblation {
        frozen_vocab: top1(&frozen)?,
        tuned_vocab: top1(&tuned)?,
        unconditioned_start,
        conditioned_start,
        conditioned_end: top1(&conditioned)?,
    })
}

/// Both arms' metrics in one document, with the optional prompt ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub crop_fallbacks: usize,
    pub method: MetricsReport,
    pub baseline: Option<MetricsReport>,
    pub ablation: Option<AopAblation>,
}

impl ExperimentReport {
    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Serialize(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Serialize(e.to_string()))
    }

    /// Closed/novel/HM Top-1 for verbs, objects and actions, one row per arm.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Arm | Verb closed | Verb novel | Verb HM | Object closed | Object novel | Object HM | Action closed | Action novel | Action HM |\n",
        );
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        let mut row = |name: &str, r: &MetricsReport| {
            s.push_str(&format!("| {name} |"));
            for a in [r.verb, r.object, r.action] {
                s.push_str(&format!(
                    " {:.1} | {:.1} | {:.1} |",
                    a.closed, a.novel, a.hm
                ));
            }
            s.push('\n');
        };
        if let Some(b) = &self.baseline {
            row("baseline", b);
        }
        row("method", &self.method);
        if let Some(a) = &self.ablation {
            s.push_str("\n| Prompt variant | Base object Top-1 |\n|---|---|\n");
            for (name, v) in [
                ("frozen vocabulary", a.frozen_vocab),
                ("tuned vocabulary", a.tuned_vocab),
                ("unconditioned, untrained", a.unconditioned_start),
                ("conditioned, untrained", a.conditioned_start),
                ("conditioned, trained", a.conditioned_end),
            ] {
                s.push_str(&format!("| {name} | {v:.1} |\n"));
            }
        }
        s
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub oap: OapOutcome,
    pub verb: (Encoder<f32>, Classifier<f32>),
    pub baseline_verb: Option<(Encoder<f32>, Classifier<f32>)>,
    pub prompts_novel: PromptModel,
    pub prompts_base: PromptModel,
}

/// Runs every stage in order and, given `out`, writes the dataset, split,
/// checkpoints, prompt models and report there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let ds = load_dataset(&cfg)?;
    let (_, test) = ds.partition();

    let oap = pretrain_stage(&ds, &cfg)?;
    let (enc, cls) = finetune_stage(&ds, Some(oap.encoder.clone()), &cfg)?;
    let inputs = object_inputs(&ds, &enc, &cfg)?;
    let (prompts_novel, _) = train_prompt_model(&inputs, &ds, &cfg.aop.novel)?;
    let (prompts_base, _) = train_prompt_model(&inputs, &ds, &cfg.aop.base)?;
    let verbs = predict_verb_ids(&ds, &test, &enc, &cls)?;
    let objects = predict_objects(
        &inputs,
        &test,
        &prompts_novel,
        Some(&prompts_base),
        cfg.aop.gamma,
    )?;
    let method = evaluate_predictions(&ds, &test, &verbs, &objects)?;

    let mut baseline_verb = None;
    let mut baseline = None;
    if cfg.eval.baseline {
        let (benc, bcls) = finetune_stage(&ds, None, &cfg)?;
        let bverbs = predict_verb_ids(&ds, &test, &benc, &bcls)?;
        let zero_shot = zero_shot_model(&inputs, &cfg)?;
        let bobjects = predict_objects(&inputs, &test, &zero_shot, None, 1.0)?;
        baseline = Some(evaluate_predictions(&ds, &test, &bverbs, &bobjects)?);
        baseline_verb = Some((benc, bcls));
    }
    let ablation = if cfg.eval.ablation {
        Some(aop_ablation(&inputs, &ds, &cfg)?)
    } else {
        None
    };
    let report = ExperimentReport {
        seed: cfg.seed,
        crop_fallbacks: inputs.fallbacks,
        method,
        baseline,
        ablation,
    };
    let outcome = ExperimentOutcome {
        report,
        oap,
        verb: (enc, cls),
        baseline_verb,
        prompts_novel,
        prompts_base,
    };
    if let Some(dir) = out {
        write_outcome(dir, &ds, &outcome).at(Stage::Write)?;
    }
    Ok(outcome)
}

/// Untrained prompts over pretrained tokens with a fixed context: the
/// baseline arm's object head.
pub fn zero_shot_model(
    inputs: &ObjectInputs,
    cfg: &ExperimentConfig,
) -> Result<PromptModel, ExperimentError> {
    let cfg = cfg.seeded();
    let pcfg = PromptConfig {
        learn_context: false,
        learn_vocab: false,
        verb_conditioned: false,
        temporal: false,
        ..cfg.aop.novel.clone()
    };
    let frames = inputs.frames.first().map_or(0, |f| f.nrows());
    PromptModel::from_config(&pcfg, inputs.vocab.clone(), 0, frames).at(Stage::Classify)
}

fn write_outcome(
    dir: &Path,
    ds: &Dataset,
    o: &ExperimentOutcome,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    ds.write(dir)?;
    write_checkpoint(
        &dir.join(OAP_CHECKPOINT),
        &Checkpoint::from_models(&o.oap.encoder, Some(&o.oap.projection), None),
    )?;
    write_checkpoint(
        &dir.join(VERB_CHECKPOINT),
        &Checkpoint::from_models(&o.verb.0, None, Some(&o.verb.1)),
    )?;
    if let Some((e, c)) = &o.baseline_verb {
        write_checkpoint(
            &dir.join(BASELINE_CHECKPOINT),
            &Checkpoint::from_models(e, None, Some(c)),
        )?;
    }
    fs::write(dir.join(PROMPTS_NOVEL), o.prompts_novel.to_json()?)?;
    fs::write(dir.join(PROMPTS_BASE), o.prompts_base.to_json()?)?;
    fs::write(dir.join(REPORT_FILE), o.report.to_toml()?)?;
    Ok(())
}
