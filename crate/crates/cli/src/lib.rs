//! The `patchcert` command line: argument parsing, configuration merging,
//! dataset loading and report emission around the core library.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use patchcert::ablation::AblationKind;
use patchcert::certify::DeltaMode;

pub use config::{DataFormat, RunConfig};

/// Errors carrying the process exit code contract: 1 internal, 2 missing
/// input, 3 invalid parameters.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    InvalidParams(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::InvalidParams(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Internal(_) => "internal",
            CliError::MissingInput(_) => "missing_input",
            CliError::InvalidParams(_) => "invalid_parameters",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("record serializes")
    }
}

impl From<patchcert::Error> for CliError {
    fn from(e: patchcert::Error) -> Self {
        use patchcert::Error as E;
        match e {
            E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingInput(e.to_string()),
            E::Parameter(_) | E::Usage(_) | E::Budget { .. } | E::Dimension { .. } | E::Input(_) => {
                CliError::InvalidParams(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::from(patchcert::Error::from(e))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "patchcert",
    version,
    about = "Certified patch robustness via derandomized smoothing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for image-parallel work (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory for reports, dumps and checkpoints.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// CIFAR-10 batch file, or IDX image tensor.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// IDX label tensor (with `--data-format idx`).
    #[arg(long)]
    pub labels: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub data_format: Option<DataFormat>,
}

#[derive(Debug, Args, Default)]
pub struct AblationArgs {
    #[arg(long, value_parser = parse_kind)]
    pub ablation: Option<AblationKind>,

    /// Retained column width or block side, in pixels.
    #[arg(long)]
    pub b: Option<usize>,

    #[arg(long)]
    pub stride: Option<usize>,

    #[arg(long)]
    pub offset: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct CertArgs {
    /// Adversarial patch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub patch_sizes: Option<Vec<usize>>,

    #[arg(long, value_parser = parse_mode)]
    pub delta_mode: Option<DeltaMode>,
}

fn parse_kind(s: &str) -> Result<AblationKind, String> {
    s.parse().map_err(|e: patchcert::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<DeltaMode, String> {
    s.parse().map_err(|e: patchcert::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump every ablation of one image as PPM/PGM files.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        /// Dataset index of the image.
        #[arg(long)]
        image: Option<usize>,
    },
    /// Train the base classifier on randomly ablated images.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        b_train: Option<usize>,
        /// Where to write the checkpoint (default: hashed name in `--out`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Standard and certified accuracy of the smoothed classifier.
    Certify {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        #[command(flatten)]
        cert: CertArgs,
    },
    /// Compare the certification threshold under each delta mode.
    Delta {
        #[command(flatten)]
        ablation: AblationArgs,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[command(flatten)]
        cert: CertArgs,
    },
    /// Certification over a grid of ablation sizes and strides.
    Sweep {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_kind)]
        ablation: Option<AblationKind>,
        #[arg(long)]
        offset: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        b_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        strides: Option<Vec<usize>>,
        #[command(flatten)]
        cert: CertArgs,
    },
    /// MAC model and wall-clock timing of the token-dropping path.
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        ablation: Option<AblationKind>,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ablate { .. } => "ablate",
            Command::Train { .. } => "train",
            Command::Certify { .. } => "certify",
            Command::Delta { .. } => "delta",
            Command::Sweep { .. } => "sweep",
            Command::Bench { .. } => "bench",
        }
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    set(&mut cfg.data.format, d.data_format);
    if d.data.is_some() {
        cfg.data.path = d.data.clone();
    }
    if d.labels.is_some() {
        cfg.data.labels = d.labels.clone();
    }
}

fn apply_ablation(cfg: &mut RunConfig, a: &AblationArgs) {
    set(&mut cfg.ablation.kind, a.ablation);
    set(&mut cfg.ablation.b, a.b);
    set(&mut cfg.ablation.stride, a.stride);
    set(&mut cfg.ablation.offset, a.offset);
}

fn apply_cert(cfg: &mut RunConfig, c: &CertArgs) {
    set(&mut cfg.patch_sizes, c.patch_sizes.clone());
    set(&mut cfg.delta_mode, c.delta_mode);
}

/// The effective configuration: defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);
    set(&mut cfg.out, cli.out.clone());
    match &cli.command {
        Command::Ablate { data, ablation, image } => {
            apply_data(&mut cfg, data);
            apply_ablation(&mut cfg, ablation);
            set(&mut cfg.image, *image);
        }
        Command::Train {
            data,
            epochs,
            batch,
            lr,
            b_train,
            ckpt,
        } => {
            apply_data(&mut cfg, data);
            set(&mut cfg.train.epochs, *epochs);
            set(&mut cfg.train.batch, *batch);
            set(&mut cfg.train.lr, *lr);
            set(&mut cfg.train.b_train, *b_train);
            if ckpt.is_some() {
                cfg.ckpt = ckpt.clone();
            }
        }
        Command::Certify {
            ckpt,
            data,
            ablation,
            cert,
        } => {
            if ckpt.is_some() {
                cfg.ckpt = ckpt.clone();
            }
            apply_data(&mut cfg, data);
            apply_ablation(&mut cfg, ablation);
            apply_cert(&mut cfg, cert);
        }
        Command::Delta { ablation, h, w, cert } => {
            apply_ablation(&mut cfg, ablation);
            apply_cert(&mut cfg, cert);
            if h.is_some() {
                cfg.delta.h = *h;
            }
            if w.is_some() {
                cfg.delta.w = *w;
            }
        }
        Command::Sweep {
            ckpt,
            data,
            ablation,
            offset,
            b_values,
            strides,
            cert,
        } => {
            if ckpt.is_some() {
                cfg.ckpt = ckpt.clone();
            }
            apply_data(&mut cfg, data);
            set(&mut cfg.ablation.kind, *ablation);
            set(&mut cfg.ablation.offset, *offset);
            set(&mut cfg.sweep.b_values, b_values.clone());
            set(&mut cfg.sweep.strides, strides.clone());
            apply_cert(&mut cfg, cert);
        }
        Command::Bench {
            ckpt,
            ablation,
            widths,
            stride,
            trials,
        } => {
            if ckpt.is_some() {
                cfg.ckpt = ckpt.clone();
            }
            set(&mut cfg.ablation.kind, *ablation);
            set(&mut cfg.bench.widths, widths.clone());
            set(&mut cfg.bench.stride, *stride);
            set(&mut cfg.bench.trials, *trials);
        }
    }
    cfg.train.seed = cfg.seed;
    if cfg.workers == 0 {
        return Err(CliError::InvalidParams("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

/// Runs a parsed command line inside a pool of `workers` threads and
/// returns the text destined for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("patchcert").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"seed": 3, "patch_sizes": [4], "ablation": {"kind": "block", "b": 5, "stride": 2}}"#,
        )
        .unwrap();
        let cli = parse(&[
            "certify",
            "--config",
            path.to_str().unwrap(),
            "--patch-sizes",
            "1,2",
            "--b",
            "6",
            "--seed",
            "9",
        ]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.patch_sizes, vec![1, 2]);
        assert_eq!(cfg.ablation.kind, AblationKind::Block);
        assert_eq!(cfg.ablation.b, 6);
        assert_eq!(cfg.ablation.stride, 2);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(patchcert::Error::Parameter("x".into())).exit_code(), 3);
        let nf = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(nf).exit_code(), 2);
        assert_eq!(CliError::from(patchcert::Error::EmptyVotes).exit_code(), 1);
        let rec: serde_json::Value =
            serde_json::from_str(&CliError::MissingInput("checkpoint not found".into()).record()).unwrap();
        assert_eq!(rec["exit_code"], 2);
        assert_eq!(rec["message"], "checkpoint not found");
    }

    #[test]
    fn zero_workers_is_rejected() {
        assert_eq!(
            resolve(&parse(&["delta", "--workers", "0"])).unwrap_err().exit_code(),
            3
        );
    }
}
