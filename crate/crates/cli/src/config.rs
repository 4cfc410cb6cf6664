//! Resolved run configuration: one JSON document, defaults filled in,
//! command-line overrides applied on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mcft::encoder::EncoderConfig;
use mcft::eval::Protocol;
use mcft::mcft::{MCFTConfig, PretrainConfig, TrainMode};
use mcft::pointcloud::SyntheticSpec;
use mcft::pruning::PruneConfig;
use mcft::semisup::SemiConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Version of the run-directory layout and file schemas.
pub const LAYOUT_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MCFT_OUTPUT_ROOT";

/// A problem with user-supplied configuration or inputs; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mcft,
    McftSsl,
    McftPrune,
    Fft,
    LinearProbe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mcft => "mcft",
            Method::McftSsl => "mcft-ssl",
            Method::McftPrune => "mcft-prune",
            Method::Fft => "fft",
            Method::LinearProbe => "linear-probe",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Method::Mcft | Method::McftSsl | Method::McftPrune => TrainMode::Mcft,
            Method::Fft => TrainMode::Fft,
            Method::LinearProbe => TrainMode::LinearProbe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub layout_version: u32,
    /// Base seed; subrun `r` uses `seed + r` for its split and training.
    pub seed: u64,
    /// Parent of generated run directories; `None` defers to the environment.
    pub output_root: Option<PathBuf>,
    pub data: SyntheticSpec,
    /// Directory written by `gen-data`; replaces the generated dataset.
    pub data_dir: Option<PathBuf>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_per_class: usize,
    /// Seed of the synthetic clouds used for pretraining.
    pub pretrain_data_seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub method: Method,
    pub protocol: Protocol,
    pub shots: usize,
    pub runs: usize,
    pub mcft: MCFTConfig,
    pub semi: SemiConfig,
    pub prune: PruneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layout_version: LAYOUT_VERSION,
            seed: 0,
            output_root: None,
            data: SyntheticSpec::default(),
            data_dir: None,
            train_per_class: 40,
            test_per_class: 25,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_per_class: 50,
            pretrain_data_seed: 99,
            checkpoint: None,
            method: Method::Mcft,
            protocol: Protocol::FullFewShot,
            shots: 5,
            runs: 1,
            mcft: MCFTConfig::default(),
            semi: SemiConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document (possibly empty) after applying overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(&[&str], Value)]) -> anyhow::Result<RunConfig> {
        let mut doc = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(config_error("config document must be a JSON object"));
        }
        for (path, value) in overrides {
            set_path(&mut doc, path, value.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| config_error(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section before any compute starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        let wrap = |e: mcft::Error| config_error(e.to_string());
        if self.layout_version != LAYOUT_VERSION {
            return Err(config_error(format!(
                "layout_version {} is not supported (expected {LAYOUT_VERSION})",
                self.layout_version
            )));
        }
        if self.data_dir.is_none() {
            self.data.validate().map_err(wrap)?;
            if self.encoder.num_classes != self.data.class_catalog.len() {
                return Err(config_error(format!(
                    "encoder.num_classes {} does not match {} catalog classes",
                    self.encoder.num_classes,
                    self.data.class_catalog.len()
                )));
            }
        }
        self.encoder.validate().map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        self.mcft.validate(&self.encoder).map_err(wrap)?;
        self.semi.validate().map_err(wrap)?;
        self.prune.validate(&self.encoder).map_err(wrap)?;
        if self.shots == 0 || self.runs == 0 {
            return Err(config_error("shots and runs must be >= 1"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.pretrain_per_class == 0 {
            return Err(config_error("per-class sample counts must be >= 1"));
        }
        if let Protocol::NWayMShot { n_way } = self.protocol {
            if n_way < 2 {
                return Err(config_error("n_way must be >= 2"));
            }
        }
        Ok(())
    }

    /// Explicit root, else the environment, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn set_path(doc: &mut Value, path: &[&str], value: Value) {
    let mut node = doc;
    for key in &path[..path.len() - 1] {
        let obj = node.as_object_mut().expect("override parents are objects");
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .expect("override parents are objects")
        .insert(path[path.len() - 1].to_string(), value);
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "mcft": {"total_epochs": 12, "lambda": 0.5}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[(&["mcft", "total_epochs"], json!(20))]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mcft.total_epochs, 20);
        assert_eq!(cfg.mcft.lambda, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"mcft": {"totl_epochs": 3}}"#).unwrap();
        let err = RunConfig::resolve(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("totl_epochs"), "{err}");
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn invalid_sections_are_rejected() {
        for (path, value) in [
            (&["shots"][..], json!(0)),
            (&["mcft", "alpha"][..], json!(1.5)),
            (&["prune", "budget"][..], json!(6)),
            (&["encoder", "num_classes"][..], json!(3)),
            (&["layout_version"][..], json!(7)),
        ] {
            assert!(RunConfig::resolve(None, &[(path, value)]).is_err(), "{path:?}");
        }
    }
}
