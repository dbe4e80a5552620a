//! Experiment configuration: canonical JSON in, resolved run setup out.
//!
//! Configs are strict (unknown keys are rejected) and serialize
//! canonically: keys sorted, step sizes kept as decimals, so identical
//! configurations hash and diff stably.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use umtra_core::augment::{preset, AugPrimitive, AugmentationSpec};
use umtra_core::data::{gen_glyphs, GlyphJitter, GlyphSpec, LabeledDataset};
use umtra_core::meta::{GradMode, MetaConfig, TrainMode};
use umtra_core::{ModelKind, ModelSpec};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Umtra,
    Supervised,
    Scratch,
}

impl Mode {
    pub fn to_core(&self) -> TrainMode {
        match self {
            Mode::Umtra => TrainMode::Umtra,
            Mode::Supervised => TrainMode::Supervised,
            Mode::Scratch => TrainMode::Scratch,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Umtra => "umtra",
            Mode::Supervised => "supervised_maml",
            Mode::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum GradModeConfig {
    SecondOrder,
    FirstOrder,
}

impl GradModeConfig {
    pub fn to_core(&self) -> GradMode {
        match self {
            GradModeConfig::SecondOrder => GradMode::SecondOrder,
            GradModeConfig::FirstOrder => GradMode::FirstOrder,
        }
    }
}

/// Augmentation: either a preset name or an inline pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum AugConfig {
    Preset(String),
    Pipeline(Vec<PrimitiveConfig>),
}

impl AugConfig {
    pub fn to_spec(&self) -> Result<AugmentationSpec> {
        let spec = match self {
            AugConfig::Preset(name) => preset(name).map_err(|e| anyhow::anyhow!("{e}"))?,
            AugConfig::Pipeline(prims) => {
                AugmentationSpec::of(prims.iter().map(|p| p.to_core()).collect())
            }
        };
        spec.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(spec)
    }

    pub fn label(&self) -> String {
        match self {
            AugConfig::Preset(name) => name.clone(),
            AugConfig::Pipeline(_) => "custom".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveConfig {
    Identity,
    ZeroPixels { rate: f64 },
    Shift { min_px: usize, max_px: usize },
    HorizontalFlip { prob: f64 },
    Rotate { max_degrees: f64 },
    Grayscale { prob: f64 },
    BrightnessContrast { max_delta: f64 },
    PolicyList { policies: Vec<Vec<PrimitiveConfig>> },
}

impl PrimitiveConfig {
    fn to_core(&self) -> AugPrimitive {
        match self {
            PrimitiveConfig::Identity => AugPrimitive::Identity,
            PrimitiveConfig::ZeroPixels { rate } => AugPrimitive::ZeroPixels { rate: *rate },
            PrimitiveConfig::Shift { min_px, max_px } => AugPrimitive::Shift {
                min_px: *min_px,
                max_px: *max_px,
            },
            PrimitiveConfig::HorizontalFlip { prob } => {
                AugPrimitive::HorizontalFlip { prob: *prob }
            }
            PrimitiveConfig::Rotate { max_degrees } => AugPrimitive::Rotate {
                max_degrees: *max_degrees,
            },
            PrimitiveConfig::Grayscale { prob } => AugPrimitive::Grayscale { prob: *prob },
            PrimitiveConfig::BrightnessContrast { max_delta } => {
                AugPrimitive::BrightnessContrast {
                    max_delta: *max_delta,
                }
            }
            PrimitiveConfig::PolicyList { policies } => AugPrimitive::PolicyList {
                policies: policies
                    .iter()
                    .map(|p| AugmentationSpec::of(p.iter().map(|q| q.to_core()).collect()))
                    .collect(),
            },
        }
    }
}

fn default_glyph_image_size() -> usize {
    14
}

fn default_glyph_seed() -> u64 {
    42
}

fn default_dir_layout() -> DirLayout {
    DirLayout::PerClassSubdirs
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DirLayout {
    Flat,
    PerClassSubdirs,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Glyphs {
        classes: usize,
        instances: usize,
        #[serde(default = "default_glyph_image_size")]
        image_size: usize,
        #[serde(default = "default_glyph_seed")]
        seed: u64,
    },
    Dir {
        path: String,
        #[serde(default = "default_dir_layout")]
        layout: DirLayout,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

fn default_curve_steps() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub adapt_steps: usize,
    pub k_shot: usize,
    /// Target-phase step size; defaults to the inner step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_curve_steps")]
    pub curve_steps: usize,
}

fn default_split() -> (f64, f64, f64) {
    (0.74, 0.06, 0.20)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_way: usize,
    pub k_shot_target: usize,
    pub meta_batch: usize,
    pub inner_updates: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_iterations: usize,
    pub grad_mode: GradModeConfig,
    pub mode: Mode,
    pub aug: AugConfig,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    pub out_dir: String,
    #[serde(default)]
    pub emit_plots: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Parses with line/column diagnostics from the JSON reader.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_meta_config(&self) -> Result<MetaConfig> {
        let meta = MetaConfig {
            n_way: self.n_way,
            k_shot_target: self.k_shot_target,
            meta_batch: self.meta_batch,
            inner_updates: self.inner_updates,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            meta_iterations: self.meta_iterations,
            grad_mode: self.grad_mode.to_core(),
            mode: self.mode.to_core(),
            aug: self.aug.to_spec()?,
            seed: self.seed,
        };
        meta.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(meta)
    }

    pub fn model_spec(&self, input_shape: [usize; 3]) -> Result<ModelSpec> {
        let kind = ModelKind::parse(&self.model.kind).map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut spec = match kind {
            ModelKind::Conv4 => ModelSpec::conv4(input_shape, self.n_way),
            ModelKind::ConvSmall => ModelSpec::conv_small(input_shape, self.n_way),
            ModelKind::Mlp => ModelSpec::mlp(
                input_shape,
                self.n_way,
                self.model.hidden.clone().unwrap_or_else(|| vec![32]),
            ),
        };
        if let Some(f) = self.model.filters {
            if kind != ModelKind::Mlp {
                spec.filters = f;
            }
        }
        spec.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(spec)
    }

    pub fn eval_lr(&self) -> f64 {
        self.eval.lr.unwrap_or(self.inner_lr)
    }

    /// Materializes the dataset named by the config.
    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetConfig::Glyphs {
                classes,
                instances,
                image_size,
                seed,
            } => {
                let mut spec = GlyphSpec::new(*classes, *instances, *seed);
                spec.image_size = *image_size;
                spec.jitter = GlyphJitter::default();
                gen_glyphs(&spec).map_err(|e| anyhow::anyhow!("{e}"))
            }
            DatasetConfig::Dir { path, layout } => {
                match crate::pgm::load_image_dir(Path::new(path), layout)? {
                    crate::pgm::LoadedDataset::Labeled(ds) => Ok(ds),
                    crate::pgm::LoadedDataset::Flat(_) => {
                        bail!("flat image directories carry no class ids; experiments need per_class_subdirs")
                    }
                }
            }
        }
    }

    /// The algorithm label used in summaries and report tables.
    pub fn algorithm_label(&self) -> String {
        match self.mode {
            Mode::Umtra => format!("umtra[{}]", self.aug.label()),
            Mode::Supervised => "supervised_maml".to_string(),
            Mode::Scratch => "scratch".to_string(),
        }
    }
}

/// Serializes any value as canonical JSON: sorted keys, pretty-printed,
/// trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(format!("{}\n", serde_json::to_string_pretty(&v)?))
}
