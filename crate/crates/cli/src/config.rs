use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use patchcert::ablation::AblationSpec;
use patchcert::certify::DeltaMode;
use patchcert::train::TrainConfig;
use patchcert::vit::ViTConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Cifar10,
    Idx,
    Stripe,
}

/// Parameters of the synthetic stripe dataset. Image size comes from the
/// model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StripeSettings {
    pub n: usize,
    pub k: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for StripeSettings {
    fn default() -> Self {
        Self {
            n: 512,
            k: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub format: DataFormat,
    /// CIFAR-10 batch file, or the IDX image tensor.
    pub path: Option<PathBuf>,
    /// IDX label tensor.
    pub labels: Option<PathBuf>,
    pub stripe: StripeSettings,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            format: DataFormat::Stripe,
            path: None,
            labels: None,
            stripe: StripeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub b_values: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            b_values: vec![2, 3, 4],
            strides: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub widths: Vec<usize>,
    pub stride: usize,
    pub trials: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            widths: vec![1, 2, 3, 4, 6, 8, 12, 16],
            stride: 1,
            trials: 5,
        }
    }
}

/// Image size for `delta`; defaults to the model input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaSettings {
    pub h: Option<usize>,
    pub w: Option<usize>,
}

/// Everything a run depends on. Loaded from `--config` (every field
/// optional), then overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub ablation: AblationSpec,
    pub patch_sizes: Vec<usize>,
    pub delta_mode: DeltaMode,
    pub data: DataSource,
    pub ckpt: Option<PathBuf>,
    pub sweep: SweepGrid,
    pub bench: BenchSettings,
    pub delta: DeltaSettings,
    /// Dataset index of the image dumped by `ablate`.
    pub image: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            model: ViTConfig::toy(),
            train: TrainConfig::default(),
            ablation: AblationSpec::column(3),
            patch_sizes: vec![1, 2],
            delta_mode: DeltaMode::Safe,
            data: DataSource::default(),
            ckpt: None,
            sweep: SweepGrid::default(),
            bench: BenchSettings::default(),
            delta: DeltaSettings::default(),
            image: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config not found: {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::InvalidParams(format!("config {}: {e}", path.display())))
    }

    /// The configuration with execution-only settings (worker count, output
    /// directory) cleared, so results do not depend on them.
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            workers: 0,
            out: PathBuf::new(),
            ..self.clone()
        }
    }

    /// First 16 hex digits of SHA-256 over the command name and the
    /// canonical JSON form.
    pub fn content_hash(&self, command: &str) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(&json);
        hex::encode(&h.finalize()[..8])
    }
}
