//! Pipeline configuration: one JSON document, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::mentorflow::MiningConfig;
use crate::model::ArchConfig;
use crate::syndata::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub sessions: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "work/data".into(),
            checkpoints: "work/checkpoints".into(),
            sessions: "work/sessions.jsonl".into(),
            reports: "work/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub mining: MiningConfig,
    /// IoU a detection needs with a true region for the scripted operator to
    /// confirm it.
    pub oracle_iou: f64,
    pub baseline: TrainConfig,
    pub retrain: TrainConfig,
    /// Healthy-knowledge recipe also takes healthy-flagged pool images that
    /// were not mined.
    pub healthy_pool: bool,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        Self {
            paths: Paths::default(),
            mining: MiningConfig::any_detection(dataset.num_classes, 0.5),
            arch: ArchConfig::default(),
            dataset,
            oracle_iou: 0.3,
            baseline: TrainConfig::default(),
            retrain: TrainConfig::default(),
            healthy_pool: false,
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.mining.validate()?;
        self.baseline.validate(false)?;
        self.retrain.validate(true)?;
        if self.arch.num_classes != self.dataset.num_classes {
            return Err(Error::Config("arch.num_classes differs from dataset.num_classes".into()));
        }
        if self.arch.image_size != self.dataset.image_size {
            return Err(Error::Config("arch.image_size differs from dataset.image_size".into()));
        }
        if self.arch.grid_size() != self.dataset.grid_size {
            return Err(Error::Config(format!(
                "architecture produces a {:?} grid, dataset expects {:?}",
                self.arch.grid_size(),
                self.dataset.grid_size
            )));
        }
        if self.mining.class_thresholds.len() != self.dataset.num_classes {
            return Err(Error::Config("mining.class_thresholds needs one entry per class".into()));
        }
        if !(self.oracle_iou > 0.0 && self.oracle_iou <= 1.0) {
            return Err(Error::Config("oracle_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Loads a config file (or the defaults when `path` is `None`), then
    /// applies `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_over(Self::default(), path, overrides)
    }

    /// Like [`PipelineConfig::load`], with `base` standing in for a missing
    /// file.
    pub fn load_over(base: Self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(base)?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Hash of the data-generating configuration; datasets, checkpoints and
    /// reports carry it.
    pub fn hash(&self) -> String {
        self.dataset.hash()
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                map.get_mut(*part).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{part}` in `{key}` is not an index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in `{key}`")))?
            }
            _ => return Err(Error::Config(format!("`{key}` descends into a scalar"))),
        };
        if last {
            *node = parsed.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_apply() {
        let cfg = PipelineConfig::load(
            None,
            &["retrain.epochs=3".into(), "dataset.shift.background_texture=striped".into()],
        )
        .unwrap();
        assert_eq!(cfg.retrain.epochs, 3);
        assert_eq!(cfg.dataset.shift.background_texture, crate::syndata::BackgroundTexture::Striped);
    }

    #[test]
    fn bad_overrides_fail() {
        assert!(matches!(PipelineConfig::load(None, &["nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::load(None, &["retrain.batch_size=7".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::load(None, &["retrain.epochs".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = PipelineConfig::default();
        cfg.save(&p).unwrap();
        assert_eq!(PipelineConfig::load(Some(&p), &[]).unwrap(), cfg);
    }
}
