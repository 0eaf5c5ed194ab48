//! Run configuration: one TOML file with a section per module, merged over
//! the defaults and overridable by dotted `key=value` flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator::AnnotatorConfig;
use crate::envsim::{EnvConfig, Level, TaskId};
use crate::error::{Error, Result};
use crate::inference::RolloutConfig;
use crate::mot::ModelConfig;
use crate::primitives::Thresholds;
use crate::tokenstream::LayoutConfig;
use crate::training::StageConfig;
use crate::util::short_hash;

/// What `synth-env-data` collects and how the dataset is assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tasks: Vec<TaskId>,
    pub levels: Vec<Level>,
    /// Episodes per (task, level).
    pub episodes: usize,
    pub seed: u64,
    pub vqa_count: usize,
    pub vqa_seed: u64,
    /// Every n-th frame of each trajectory is used to fit the latent codec.
    pub codec_frame_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::StackTwo],
            levels: vec![Level::Easy],
            episodes: 200,
            seed: 0,
            vqa_count: 500,
            vqa_seed: 1,
            codec_frame_stride: 3,
        }
    }
}

/// Evaluation seed schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: Vec<TaskId>,
    pub levels: Vec<Level>,
    pub episodes: usize,
    /// Evaluation seeds are `base_seed..base_seed + episodes`, shared by all
    /// tasks, levels and ablation rows.
    pub base_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskId::StackTwo],
            levels: vec![Level::Easy, Level::Hard],
            episodes: 20,
            base_seed: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub thresholds: Thresholds,
    pub annotator: AnnotatorConfig,
    pub data: DataConfig,
    pub layout: LayoutConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            thresholds: Thresholds::default(),
            annotator: AnnotatorConfig::default(),
            data: DataConfig::default(),
            layout: LayoutConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of a `--set` flag: a TOML literal when it
/// parses as one, otherwise a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` of the form
    /// `section.key=value`, in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = crate::util::read_input(p)?;
            let file: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut tree, file);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
            let mut over = parse_literal(raw.trim());
            for part in key.trim().split('.').rev() {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), over);
                over = toml::Value::Table(t);
            }
            merge(&mut tree, over);
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.thresholds.validate()?;
        self.layout.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let mut errs = Vec::new();
        if self.layout.context_frames != self.model.context_frames || self.layout.chunk != self.model.chunk {
            errs.push("layout.context_frames/chunk must equal model.context_frames/chunk".to_string());
        }
        if self.env.image_size != self.model.image_size {
            errs.push("env.image_size must equal model.image_size".to_string());
        }
        if self.rollout.chunk != self.model.chunk || self.rollout.context_frames != self.model.context_frames {
            errs.push("rollout.chunk/context_frames must equal the model's".to_string());
        }
        if self.data.tasks.is_empty() || self.data.levels.is_empty() {
            errs.push("data.tasks and data.levels must be non-empty".to_string());
        }
        if self.data.codec_frame_stride == 0 {
            errs.push("data.codec_frame_stride must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the canonical serialization; stamped into every artifact.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::load(None, &["pretrain.steps=7".into(), "rollout.mode=\"no_vis\"".into()]).unwrap();
        assert_eq!(c.pretrain.steps, 7);
        assert_eq!(c.finetune, StageConfig::finetune());
        assert_eq!(c.rollout.mode, crate::tokenstream::CotMode::NoVis);
        assert!(RunConfig::load(None, &["pretrain.stepz=7".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus.x=1".into()]).is_err());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, c.to_toml().unwrap()).unwrap();
        let back = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(back.hash(), c.hash());
    }
}
