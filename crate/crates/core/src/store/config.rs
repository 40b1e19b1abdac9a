//! Run configuration documents: JSON with every key optional, unknown keys
//! rejected, and dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::data::{
    generate_shapes_dataset, read_binary_dataset, read_seg_maps, BinaryLayout, SegExample, MAX_SHAPE_CLASSES,
};
use crate::error::{Error, Result};
use crate::pipeline::{AblationConfig, FinetuneConfig, PretrainConfig, Task};
use crate::tokenizer::{TokenizerConfig, TokenizerTrainConfig};

/// Where images come from. With `dir` unset the synthetic shapes dataset is
/// generated in memory; otherwise `{dir}/{split}.bin` (and `{split}.seg` when
/// present) are read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub eval_count: usize,
    /// Train split uses this seed, eval split uses `seed + 1`.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            image_size: 32,
            channels: 3,
            num_classes: 8,
            train_count: 2000,
            eval_count: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("data.image_size", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "need at least two classes"));
        }
        if self.dir.is_none() {
            if self.num_classes > MAX_SHAPE_CLASSES {
                return Err(Error::config(
                    "data.num_classes",
                    format!("the shapes generator has {MAX_SHAPE_CLASSES} classes"),
                ));
            }
            if self.channels != 3 {
                return Err(Error::config("data.channels", "generated shapes are RGB"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> BinaryLayout {
        BinaryLayout {
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
            num_classes: self.num_classes,
        }
    }

    /// Loads or generates one split. Binary splits without a `.seg` file get
    /// empty label maps.
    pub fn load(&self, split: Split) -> Result<Vec<SegExample>> {
        let Some(dir) = &self.dir else {
            let (count, seed) = match split {
                Split::Train => (self.train_count, self.seed),
                Split::Eval => (self.eval_count, self.seed.wrapping_add(1)),
            };
            return Ok(generate_shapes_dataset(count, self.image_size, self.num_classes, seed));
        };
        let name = split.name();
        let labeled = read_binary_dataset(&dir.join(format!("{name}.bin")), &self.layout())?;
        let seg_path = dir.join(format!("{name}.seg"));
        let segs = if seg_path.exists() {
            let s = read_seg_maps(&seg_path, self.image_size, self.image_size, self.num_classes + 1)?;
            if s.len() != labeled.len() {
                return Err(Error::invalid(format!(
                    "{}: {} label maps for {} images",
                    seg_path.display(),
                    s.len(),
                    labeled.len()
                )));
            }
            s
        } else {
            vec![Vec::new(); labeled.len()]
        };
        Ok(labeled
            .into_iter()
            .zip(segs)
            .map(|(e, seg)| SegExample {
                image: e.image,
                label: e.label,
                seg,
            })
            .collect())
    }
}

/// Checkpoints a command reads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub tokenizer: Option<PathBuf>,
    /// Backbone checkpoint to start from (pretrain, finetune) or to inspect
    /// (eval, elbo, attend).
    pub backbone: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElboConfig {
    pub images: usize,
    pub seed: u64,
}

impl Default for ElboConfig {
    fn default() -> Self {
        ElboConfig { images: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttendConfig {
    /// 1-indexed block; 0 means the last one.
    pub layer: usize,
    /// Index into the eval split.
    pub image: usize,
    /// Reference patches; empty means every patch.
    pub patches: Vec<usize>,
}

impl Default for AttendConfig {
    fn default() -> Self {
        AttendConfig {
            layer: 0,
            image: 0,
            patches: Vec::new(),
        }
    }
}

/// Reduced budgets for the ablation arms. Everything else comes from the
/// `pretrain` and `finetune` sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub pretrain_steps: usize,
    pub finetune_epochs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            pretrain_steps: 300,
            finetune_epochs: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub inputs: InputPaths,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub elbo: ElboConfig,
    pub attend: AttendConfig,
    pub ablate: AblateConfig,
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { key, msg } if !key.starts_with(prefix) => Error::Config {
            key: format!("{prefix}{key}"),
            msg,
        },
        other => other,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.tokenizer.validate()?;
        self.tokenizer_train.validate()?;
        prefixed("backbone.", self.backbone.validate())?;
        prefixed("pretrain.", self.pretrain.validate())?;
        prefixed("finetune.", self.finetune.validate())?;
        let sizes = [self.data.image_size, self.tokenizer.image_size, self.backbone.image_size];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(Error::config(
                "backbone.image_size",
                format!("data, tokenizer, and backbone image sizes differ: {sizes:?}"),
            ));
        }
        if self.tokenizer.patch != self.backbone.patch {
            return Err(Error::config(
                "tokenizer.patch",
                "tokenizer cells must align with backbone patches",
            ));
        }
        if self.data.channels != self.backbone.channels || self.data.channels != self.tokenizer.channels {
            return Err(Error::config("backbone.channels", "channel counts differ across sections"));
        }
        if self.attend.layer > self.backbone.layers {
            return Err(Error::config("attend.layer", format!("backbone has {} blocks", self.backbone.layers)));
        }
        let n = self.backbone.num_patches();
        if let Some(&p) = self.attend.patches.iter().find(|&&p| p >= n) {
            return Err(Error::config("attend.patches", format!("patch {p} out of range for {n} patches")));
        }
        if self.elbo.images == 0 {
            return Err(Error::config("elbo.images", "must be positive"));
        }
        Ok(())
    }

    /// Head width for the configured fine-tuning task.
    pub fn task_classes(&self) -> usize {
        match self.finetune.task {
            Task::Classify => self.data.num_classes,
            Task::Segment => self.data.num_classes + 1,
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        let mut a = AblationConfig {
            pretrain: self.pretrain.clone(),
            classify: FinetuneConfig {
                task: Task::Classify,
                ..self.finetune.clone()
            },
            segment: FinetuneConfig {
                task: Task::Segment,
                label_smoothing: 0.0,
                ..self.finetune.clone()
            },
        };
        a.pretrain.steps = self.ablate.pretrain_steps;
        a.pretrain.warmup_steps = a.pretrain.warmup_steps.min(self.ablate.pretrain_steps / 10);
        a.classify.epochs = self.ablate.finetune_epochs;
        a.segment.epochs = self.ablate.finetune_epochs;
        a
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a document (an empty or whitespace-only one means all defaults),
/// applies `key=value` overrides, and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

/// Sets `a.b.c=value` in `doc`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed dotted key"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::config(parts[..i].join("."), "is not a section"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(parse_config("", &[]).unwrap(), RunConfig::default());
        assert_eq!(parse_config("{}", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn constraint_names_key() {
        let err = parse_config(r#"{"pretrain": {"mask": {"ratio": 1.5}}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("pretrain.mask.ratio"), "{err}");
        let err = parse_config("", &["pretrain.mask.ratio=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("mask.ratio"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let err = parse_config(r#"{"pretrain": {"stepz": 3}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = parse_config(r#"{"pretrain": {"steps": "many"}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("pretrain.steps"), "{err}");
    }

    #[test]
    fn reference_scale_values_accepted() {
        let c = parse_config(
            r#"{"pretrain": {"batch": 2048, "peak_lr": 1.5e-3, "clip_norm": 3.0, "adam": {"beta2": 0.999, "weight_decay": 0.05}}}"#,
            &[],
        )
        .unwrap();
        assert_eq!(c.pretrain.batch, 2048);
        assert_eq!(c.pretrain.peak_lr, 1.5e-3);
    }

    #[test]
    fn overrides() {
        let c = parse_config(
            "",
            &[
                "pretrain.steps=7".into(),
                "pretrain.mask.strategy=random".into(),
                "inputs.tokenizer=out/tok.ckpt".into(),
                "finetune.task=segment".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.pretrain.steps, 7);
        assert_eq!(c.pretrain.mask.strategy, MaskStrategy::Random);
        assert_eq!(c.inputs.tokenizer, Some(PathBuf::from("out/tok.ckpt")));
        assert_eq!(c.task_classes(), 9);
        assert!(parse_config("", &["nonsense".into()]).is_err());
        assert!(parse_config("", &["pretrain.steps.x=1".into()]).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let mut c = RunConfig::default();
        c.pretrain.peak_lr = 0.1 + 0.2;
        c.attend.patches = vec![0, 5];
        assert_eq!(parse_config(&c.to_json(), &[]).unwrap(), c);
    }

    #[test]
    fn cross_section_checks() {
        assert!(parse_config("", &["backbone.patch=8".into()]).is_err());
        assert!(parse_config("", &["attend.layer=9".into()]).is_err());
    }
}
