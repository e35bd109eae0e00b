//! Run configuration: one JSON document, optionally patched by `--set` overrides.

use std::path::Path;

use anyd::datakit::{GeneratorOptions, RegionProfile};
use anyd::fedsim::FedConfig;
use anyd::planner::ModelConfig;
use anyd::trainer::{SslConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

pub const DESK: &str = include_str!("../configs/desk.json");
pub const PAPER: &str = include_str!("../configs/paper.json");

/// Model dimensions; the region list comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub image_ch: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub speed_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub branch_hidden: [usize; 2],
}

impl ModelSpec {
    pub fn with_regions(&self, regions: Vec<String>) -> ModelConfig {
        ModelConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            image_ch: self.image_ch,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            channels: self.channels,
            speed_dim: self.speed_dim,
            d_model: self.d_model,
            heads: self.heads,
            branch_hidden: self.branch_hidden,
            regions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfilePreset {
    Desk,
    ConflictPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profiles {
    Preset(ProfilePreset),
    Custom(Vec<RegionProfile>),
}

impl Profiles {
    pub fn resolve(&self) -> Vec<RegionProfile> {
        match self {
            Profiles::Preset(ProfilePreset::Desk) => RegionProfile::desk_set(),
            Profiles::Preset(ProfilePreset::ConflictPair) => RegionProfile::conflict_pair().to_vec(),
            Profiles::Custom(list) => list.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub profiles: Profiles,
    pub n_per_region: usize,
    pub sigma_noise: f64,
    pub kappa_thresh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub ssl: SslConfig,
    pub fed: FedConfig,
    pub data: DataSpec,
}

impl RunConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn fed(&self) -> FedConfig {
        FedConfig { seed: self.seed, ..self.fed }
    }

    pub fn generator(&self) -> GeneratorOptions {
        GeneratorOptions {
            image_h: self.model.image_h,
            image_w: self.model.image_w,
            kappa_thresh: self.data.kappa_thresh,
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        let at = |path: &str, e: anyd::AnydError| Failure::Usage(format!("{path}: {e}"));
        self.model.with_regions(vec!["_".into()]).validate().map_err(|e| at("model", e))?;
        self.train().validate().map_err(|e| at("train", e))?;
        if self.train.iterations == 0 {
            return Err(Failure::Usage("train.iterations: must be positive".into()));
        }
        self.ssl.validate().map_err(|e| at("ssl", e))?;
        self.fed().validate().map_err(|e| at("fed", e))?;
        if !(self.data.sigma_noise >= 0.0 && self.data.sigma_noise.is_finite()) {
            return Err(Failure::Usage("data.sigma_noise: must be nonnegative".into()));
        }
        if !(self.data.kappa_thresh > 0.0 && self.data.kappa_thresh.is_finite()) {
            return Err(Failure::Usage("data.kappa_thresh: must be positive".into()));
        }
        if self.data.n_per_region == 0 {
            return Err(Failure::Usage("data.n_per_region: must be positive".into()));
        }
        for (i, p) in self.data.profiles.resolve().iter().enumerate() {
            p.validate().map_err(|e| at(&format!("data.profiles[{i}]"), e))?;
        }
        Ok(())
    }
}

/// Replaces the value at a dotted path, creating intermediate objects.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects path=value, got {assignment:?}")))?;
    // values that are not valid JSON are taken as strings
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Failure::Usage(format!("--set: empty key in {path:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("--set {path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Failure::Usage(format!("config {path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `--config` wins over `--preset`; the desk preset is the default.
pub fn load(config: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = match (config, preset) {
        (Some(p), _) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        (None, None | Some("desk")) => DESK.to_string(),
        (None, Some("paper")) => PAPER.to_string(),
        (None, Some(other)) => return Err(Failure::Usage(format!("unknown preset {other:?} (desk, paper)"))),
    };
    parse(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let desk = parse(DESK, &[]).unwrap();
        assert_eq!(desk.train, TrainConfig::desk());
        let paper = parse(PAPER, &[]).unwrap();
        assert_eq!(paper.train, TrainConfig::paper());
        assert_eq!(paper.fed().total_iterations(), 7500);
        assert_eq!(paper.model.heads, 3);
    }

    #[test]
    fn overrides_patch_nested_values() {
        let cfg = parse(DESK, &["train.iterations=7".into(), "data.profiles=conflict_pair".into(), "seed=42".into()])
            .unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.data.profiles, Profiles::Preset(ProfilePreset::ConflictPair));
        assert_eq!(cfg.train().seed, 42);
        assert_eq!(cfg.fed().seed, 42);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let Err(Failure::Usage(msg)) = parse(DESK, &["train.loss.lambda_x=1".into()]) else { panic!() };
        assert!(msg.contains("train.loss"), "{msg}");
        assert!(msg.contains("lambda_x"), "{msg}");
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        assert!(matches!(parse(DESK, &["model.heads=5".into()]), Err(Failure::Usage(_))));
        assert!(matches!(parse(DESK, &["train.lr0=-1".into()]), Err(Failure::Usage(_))));
        assert!(matches!(parse(DESK, &["nope".into()]), Err(Failure::Usage(_))));
    }
}
