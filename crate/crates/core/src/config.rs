//! Pipeline configuration: a TOML file with one table per stage, optional
//! `section.key=value` overrides, and a content hash of the resolved result.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAPER_PRESET: &str = include_str!("../configs/paper.cfg");
pub const DESK_PRESET: &str = include_str!("../configs/desk.cfg");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseConfig {
    /// MATPOWER file; empty selects the bundled IEEE 57-bus case.
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesConfig {
    pub source: ProfileSource,
    pub csv_path: String,
    /// Number of time steps (synthetic profiles only).
    pub steps: usize,
    pub step_minutes: u32,
    pub seed: u64,
}

impl Default for ProfilesConfig {
    fn default() -> Self {
        Self { source: ProfileSource::Synthetic, csv_path: String::new(), steps: 2045, step_minutes: 5, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub targets: Vec<u32>,
    pub scales: Vec<f64>,
    /// Attacked steps are `window_start..window_end`.
    pub window_start: usize,
    pub window_end: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            targets: vec![2, 6, 10, 14, 19, 25, 31, 35, 38, 43, 47, 51, 57],
            scales: vec![0.9, 1.1],
            window_start: 1728,
            window_end: 2016,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BddConfig {
    pub alpha: f64,
}

impl Default for BddConfig {
    fn default() -> Self {
        Self { alpha: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gaf,
    Rp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub rp_mode: crate::encoders::RpMode,
    pub epsilon_frac: f64,
    /// Side length after downsampling; 0 keeps the native size.
    pub image_size: usize,
    /// Example images exported as PGM per class.
    pub pgm_per_class: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Rp,
            rp_mode: crate::encoders::RpMode::Distance,
            epsilon_frac: 0.1,
            image_size: 0,
            pgm_per_class: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPreset {
    PaperCnn,
    DeskCnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: NetworkPreset,
    pub dense_units: usize,
    pub batchnorm: bool,
    pub dropout: f64,
    pub mlp_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            preset: NetworkPreset::PaperCnn,
            dense_units: 128,
            batchnorm: true,
            dropout: 0.25,
            mlp_hidden: vec![64, 128],
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 200,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 13,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.7, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub knn_k: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { knn_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub case: CaseConfig,
    pub profiles: ProfilesConfig,
    pub attack: AttackConfig,
    pub bdd: BddConfig,
    pub encoder: EncoderConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub split: SplitConfig,
    pub baseline: BaselineConfig,
    pub output: OutputConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Parses TOML text and applies `section.key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key '{key}' must be section.field")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = entry else {
                return Err(Error::Config(format!("'{section}' is not a section")));
            };
            sec.insert(field.to_string(), parse_value(value.trim()));
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    /// `paper` or `desk`.
    pub fn preset(name: &str, overrides: &[String]) -> Result<Self> {
        match name {
            "paper" => Self::from_toml(PAPER_PRESET, overrides),
            "desk" => Self::from_toml(DESK_PRESET, overrides),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected paper or desk)"))),
        }
    }

    /// A preset name or a path to a config file.
    pub fn resolve(name_or_path: &str, overrides: &[String]) -> Result<Self> {
        match name_or_path {
            "paper" | "desk" => Self::preset(name_or_path, overrides),
            path => Self::load(Path::new(path), overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.attack.window_start > self.attack.window_end {
            return bad("attack.window_start is after attack.window_end".into());
        }
        if self.attack.targets.is_empty() || self.attack.scales.is_empty() {
            return bad("attack.targets and attack.scales must be non-empty".into());
        }
        // written so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.attack.noise_sigma > 0.0) {
            return bad("attack.noise_sigma must be positive".into());
        }
        if !(self.bdd.alpha > 0.0 && self.bdd.alpha < 1.0) {
            return bad("bdd.alpha must lie in (0, 1)".into());
        }
        if self.profiles.source == ProfileSource::Csv && self.profiles.csv_path.is_empty() {
            return bad("profiles.csv_path is required when profiles.source = \"csv\"".into());
        }
        if self.profiles.source == ProfileSource::Synthetic && self.profiles.steps == 0 {
            return bad("profiles.steps must be positive".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad("split.train_fraction must lie in (0, 1)".into());
        }
        if self.baseline.knn_k == 0 {
            return bad("baseline.knn_k must be at least 1".into());
        }
        if self.network.preset == NetworkPreset::Mlp && self.network.mlp_hidden.is_empty() {
            return bad("network.mlp_hidden must be non-empty".into());
        }
        self.train_config(None).validate()
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> crate::nn::TrainConfig {
        let t = &self.train;
        crate::nn::TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            checkpoint_dir,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}
