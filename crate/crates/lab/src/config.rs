//! Versioned TOML run configuration.
//!
//! Every key has a matching command-line flag; flags override file values.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use ssldetr_core::schedule::{ScheduleMode, SslWeightSchedule};
use ssldetr_core::ssl::{ColorQuantizer, SslTaskConfig, SslTaskKind};

use crate::data::{generate_synthetic, load_coco, load_image_folder, DetectionDataset, SyntheticConfig};
use crate::error::{LabError, Result};
use crate::model::DetectorConfig;
use crate::optim::AdamWConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Serde adapter storing an [`SslTaskKind`] as its snake_case name.
pub mod task_kind {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(kind: &SslTaskKind, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(kind.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SslTaskKind, D::Error> {
        let name = String::deserialize(d)?;
        SslTaskKind::from_str(&name).map_err(serde::de::Error::custom)
    }
}

mod schedule_mode {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mode: &ScheduleMode, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(mode.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ScheduleMode, D::Error> {
        let name = String::deserialize(d)?;
        ScheduleMode::from_str(&name).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Detection loss only.
    #[default]
    Plain,
    /// Detection loss on clean images plus weighted SSL loss on transformed
    /// ones.
    Multitask,
    /// SSL loss only; annotations are not needed.
    Pretrain,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::Multitask => "multitask",
            TrainMode::Pretrain => "pretrain",
        }
    }

    pub fn uses_ssl(self) -> bool {
        self != TrainMode::Plain
    }

    pub fn needs_annotations(self) -> bool {
        self != TrainMode::Pretrain
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TrainMode::Plain),
            "multitask" => Ok(TrainMode::Multitask),
            "pretrain" => Ok(TrainMode::Pretrain),
            _ => Err(LabError::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            grad_clip_norm: 0.1,
            epochs: 10,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    #[serde(with = "task_kind")]
    pub task: SslTaskKind,
    pub ratio: f64,
    /// Quantization levels per channel of the default visual tokenizer.
    pub tokenizer_levels: usize,
    #[serde(with = "schedule_mode")]
    pub weight_schedule: ScheduleMode,
    pub initial_weight: f64,
    /// Weight reached on the last step under linear decay.
    pub final_weight: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            task: SslTaskKind::MimContinuous,
            ratio: 0.5,
            tokenizer_levels: 8,
            weight_schedule: ScheduleMode::Constant,
            initial_weight: 1.0,
            final_weight: 0.0,
        }
    }
}

impl SslConfig {
    pub fn task_config(&self) -> Result<SslTaskConfig> {
        let mut task = SslTaskConfig::new(self.task, self.ratio);
        if self.task == SslTaskKind::MimDiscrete {
            let q = ColorQuantizer::new(self.tokenizer_levels, 3)
                .map_err(|e| LabError::config("ssl.tokenizer_levels", e.to_string()))?;
            task = task.with_tokenizer(Arc::new(q));
        }
        task.validate()
            .map_err(|e| LabError::config("ssl.ratio", e.to_string()))?;
        Ok(task)
    }

    pub fn schedule(&self, total_steps: usize) -> SslWeightSchedule {
        match self.weight_schedule {
            ScheduleMode::Constant => SslWeightSchedule::constant(self.initial_weight, total_steps),
            ScheduleMode::LinearDecay => {
                SslWeightSchedule::linear(self.initial_weight, self.final_weight, total_steps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Coco { annotations: PathBuf, images: PathBuf },
    /// Unlabeled images, usable for pre-training only.
    Folder { images: PathBuf },
}

impl DatasetSource {
    /// Reads or generates the dataset, logging a warning for every
    /// irregularity the loader repaired.
    pub fn load(&self) -> Result<DetectionDataset> {
        match self {
            DatasetSource::Synthetic(cfg) => generate_synthetic(cfg),
            DatasetSource::Coco { annotations, images } => {
                let (dataset, report) = load_coco(annotations, images)?;
                for path in &report.missing_images {
                    log::warn!("skipping image missing on disk: {}", path.display());
                }
                if report.clamped_boxes > 0 {
                    log::warn!("clamped {} boxes to their image borders", report.clamped_boxes);
                }
                if !report.dropped_annotations.is_empty() {
                    log::warn!(
                        "dropped {} annotations lying outside their images: {:?}",
                        report.dropped_annotations.len(),
                        report.dropped_annotations
                    );
                }
                Ok(dataset)
            }
            DatasetSource::Folder { images } => load_image_folder(images),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Synthetic(_) => {}
            DatasetSource::Coco {
                annotations,
                images,
            } => {
                fix(annotations);
                fix(images);
            }
            DatasetSource::Folder { images } => fix(images),
        }
    }
}

/// `Option<DatasetSource>` whose `None` is written `{ kind = "none" }`.
mod optional_source {
    use super::*;
    use serde::ser::SerializeMap;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DatasetSource>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(source) => source.serialize(s),
            None => {
                let mut map = s.serialize_map(Some(1))?;
                map.serialize_entry("kind", "none")?;
                map.end()
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DatasetSource>, D::Error> {
        let value = toml::Value::deserialize(d)?;
        let is_none = value
            .as_table()
            .is_some_and(|t| t.len() == 1 && t.get("kind").and_then(|k| k.as_str()) == Some("none"));
        if is_none {
            return Ok(None);
        }
        DatasetSource::deserialize(value)
            .map(Some)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DatasetSource,
    /// Evaluated after every epoch of detection training; `kind = "none"`
    /// disables it.
    #[serde(with = "optional_source")]
    pub val: Option<DatasetSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let train = SyntheticConfig::default();
        let val = SyntheticConfig {
            num_images: 100,
            seed: train.seed + 1,
            ..train.clone()
        };
        Self {
            train: DatasetSource::Synthetic(train),
            val: Some(DatasetSource::Synthetic(val)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    /// Checkpoint whose backbone and encoder initialize the model.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub ssl: SslConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mode: TrainMode::Plain,
            init: None,
            output_dir: None,
            model: DetectorConfig::default(),
            optim: OptimConfig::default(),
            ssl: SslConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Command-line values that replace their config-file counterparts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<TrainMode>,
    pub ssl_task: Option<SslTaskKind>,
    pub ssl_ratio: Option<f64>,
    pub ssl_weight_schedule: Option<ScheduleMode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub init: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl LabConfig {
    /// Parses TOML text. Relative dataset paths are resolved against
    /// `base_dir`.
    pub fn from_toml(text: &str, origin: &Path, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut config: LabConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            match (path.as_str(), inner.span()) {
                ("." | "", Some(span)) => {
                    let (line, column) = line_column(text, span.start);
                    LabError::Parse {
                        path: origin.to_path_buf(),
                        line,
                        column,
                        message: inner.message().to_string(),
                    }
                }
                _ => LabError::config(path, inner.message().to_string()),
            }
        })?;
        config.data.train.resolve(base_dir);
        if let Some(val) = &mut config.data.val {
            val.resolve(base_dir);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::config("", e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.ssl_task {
            self.ssl.task = v;
        }
        if let Some(v) = o.ssl_ratio {
            self.ssl.ratio = v;
        }
        if let Some(v) = o.ssl_weight_schedule {
            self.ssl.weight_schedule = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.epochs {
            self.optim.epochs = v;
        }
        if let Some(v) = &o.init {
            self.init = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = Some(v.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::config(
                "schema_version",
                format!(
                    "version {} is not supported (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        self.model.validate()?;
        let o = &self.optim;
        let checks = [
            ("optim.learning_rate", o.learning_rate >= 0.0 && o.learning_rate.is_finite()),
            ("optim.weight_decay", o.weight_decay >= 0.0 && o.weight_decay.is_finite()),
            ("optim.batch_size", o.batch_size > 0),
            ("optim.grad_clip_norm", o.grad_clip_norm > 0.0),
            ("optim.epochs", o.epochs > 0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(LabError::config(field, "must be positive"));
            }
        }
        let s = &self.ssl;
        if !(0.0..=1.0).contains(&s.ratio) {
            return Err(LabError::config("ssl.ratio", format!("{} is outside [0, 1]", s.ratio)));
        }
        for (field, w) in [("ssl.initial_weight", s.initial_weight), ("ssl.final_weight", s.final_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LabError::config(field, "must be a non-negative number"));
            }
        }
        if self.mode.uses_ssl() {
            let task = s.task_config()?;
            if task.kind.uses_ratio() && selected_patches(self, &task)? == 0 {
                return Err(LabError::config(
                    "ssl.ratio",
                    format!(
                        "{} with ratio {} selects no patches, so its loss is identically zero",
                        task.kind, s.ratio
                    ),
                ));
            }
        }
        for (name, source) in [("data.train", Some(&self.data.train)), ("data.val", self.data.val.as_ref())] {
            match source {
                Some(DatasetSource::Synthetic(cfg)) => {
                    cfg.validate(name)?;
                    if cfg.num_classes != self.model.num_classes {
                        return Err(LabError::config(
                            format!("{name}.num_classes"),
                            format!(
                                "{} classes but the model predicts {}",
                                cfg.num_classes, self.model.num_classes
                            ),
                        ));
                    }
                }
                Some(DatasetSource::Folder { .. }) if self.mode.needs_annotations() => {
                    return Err(LabError::config(
                        name,
                        format!("{} training needs annotations; an image folder has none", self.mode),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn selected_patches(config: &LabConfig, task: &SslTaskConfig) -> Result<usize> {
    let grid = config.model.grid()?;
    Ok(ssldetr_core::patchgrid::selection_count(grid.num_patches(), task.ratio))
}
