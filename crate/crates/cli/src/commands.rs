use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use patchcert::ablation::{ablation_set, AblationSpec};
use patchcert::bench::{bench_csv, bench_sweep, BenchRow};
use patchcert::certify::{certified_accuracy, delta_closed_form, delta_oracle, CertificationReport, DeltaMode};
use patchcert::io::{
    idx_dataset, load_checkpoint, load_cifar10_binary, load_idx_tensor, save_checkpoint, write_ablation_dump,
};
use patchcert::train::{fit, make_stripe_dataset, EpochLog, LabeledDataset, Split};
use patchcert::vit::VisionTransformer;
use patchcert::Error;

use crate::config::{DataFormat, RunConfig};
use crate::{CliError, Command};

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<String, CliError> {
    match command {
        Command::Ablate { .. } => ablate(cfg),
        Command::Train { .. } => train(cfg),
        Command::Certify { .. } => certify(cfg),
        Command::Delta { .. } => delta(cfg),
        Command::Sweep { .. } => sweep(cfg),
        Command::Bench { .. } => bench(cfg),
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let path = path
        .clone()
        .ok_or_else(|| CliError::MissingInput(format!("{what} not found: no path given")))?;
    if !path.exists() {
        return Err(CliError::MissingInput(format!("{what} not found: {}", path.display())));
    }
    Ok(path)
}

/// The configured dataset. Files are loaded whole and tagged `Test`.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset, CliError> {
    let src = &cfg.data;
    Ok(match src.format {
        DataFormat::Stripe => make_stripe_dataset(
            src.stripe.n,
            cfg.model.h,
            cfg.model.w,
            src.stripe.k,
            src.stripe.noise,
            src.stripe.seed,
        )?,
        DataFormat::Cifar10 => load_cifar10_binary(&require(&src.path, "dataset")?)?,
        DataFormat::Idx => {
            let images = load_idx_tensor(&require(&src.path, "dataset")?)?;
            let labels = load_idx_tensor(&require(&src.labels, "label file")?)?;
            idx_dataset(&images, &labels, cfg.model.k)?
        }
    })
}

/// Images certified and swept: the stripe test split, or a whole file.
fn evaluation_set(cfg: &RunConfig, ds: LabeledDataset) -> LabeledDataset {
    match cfg.data.format {
        DataFormat::Stripe => ds.split(Split::Test),
        _ => ds,
    }
}

fn load_model(cfg: &RunConfig) -> Result<VisionTransformer, CliError> {
    Ok(load_checkpoint(&require(&cfg.ckpt, "checkpoint")?)?)
}

fn check_compatible(model: &VisionTransformer, ds: &LabeledDataset) -> Result<(), CliError> {
    let m = &model.cfg;
    if let Some(x) = ds.images.first() {
        if (x.height(), x.width(), x.channels()) != (m.h, m.w, m.c) {
            return Err(CliError::InvalidParams(format!(
                "checkpoint expects {}x{}x{} images but the dataset has {}x{}x{}",
                m.h,
                m.w,
                m.c,
                x.height(),
                x.width(),
                x.channels()
            )));
        }
    }
    if ds.k > m.k {
        return Err(CliError::InvalidParams(format!(
            "checkpoint has {} classes but the dataset has {}",
            m.k, ds.k
        )));
    }
    Ok(())
}

/// Writes `<dir>/<stem>.<ext>` without ever replacing different content:
/// an identical existing file is kept, otherwise the first free
/// `<stem>-<i>.<ext>` is used.
pub fn write_report(dir: &Path, stem: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    for i in 0.. {
        let name = if i == 0 {
            format!("{stem}.{ext}")
        } else {
            format!("{stem}-{i}.{ext}")
        };
        let path = dir.join(name);
        match std::fs::read(&path) {
            Ok(existing) if existing == bytes => return Ok(path),
            Ok(_) => continue,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                std::fs::write(&path, bytes)?;
                return Ok(path);
            }
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded search")
}

fn ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let x = ds.images.get(cfg.image).ok_or_else(|| {
        CliError::InvalidParams(format!(
            "image index {} out of range for {} images",
            cfg.image,
            ds.len()
        ))
    })?;
    let set = ablation_set(x, &cfg.ablation)?;
    std::fs::create_dir_all(&cfg.out)?;
    for (i, z) in set.iter().enumerate() {
        write_ablation_dump(&cfg.out, i, z)?;
    }
    info!("wrote {} ablations of image {}", set.len(), cfg.image);
    Ok(format!("{} ablations written to {}\n", set.len(), cfg.out.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    log: PathBuf,
    best_epoch: usize,
    best_val_ablation_acc: f64,
}

fn train(cfg: &RunConfig) -> Result<String, CliError> {
    let mut ds = load_dataset(cfg)?;
    if cfg.data.format != DataFormat::Stripe {
        // files carry no split: hold out every seventh image for validation
        ds.splits = (0..ds.len())
            .map(|i| if i % 7 == 6 { Split::Val } else { Split::Train })
            .collect();
    }
    let model = VisionTransformer::init(cfg.model, cfg.seed)?;
    check_compatible(&model, &ds)?;
    let mut lines = String::new();
    let outcome = fit(model, &ds, &cfg.train, |e: &EpochLog| {
        let line = serde_json::to_string(e).expect("log line serializes");
        info!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    })?;
    let hash = cfg.content_hash("train");
    let log = write_report(&cfg.out, &format!("train-{hash}"), "jsonl", lines.as_bytes())?;
    let checkpoint = match &cfg.ckpt {
        Some(p) => p.clone(),
        None => {
            std::fs::create_dir_all(&cfg.out)?;
            cfg.out.join(format!("model-{hash}.svit"))
        }
    };
    save_checkpoint(&checkpoint, &outcome.model)?;
    let summary = TrainSummary {
        checkpoint,
        log,
        best_epoch: outcome.best_epoch,
        best_val_ablation_acc: outcome.log[outcome.best_epoch].val_ablation_acc,
    };
    Ok(serde_json::to_string(&summary).expect("summary serializes") + "\n")
}

#[derive(Serialize)]
struct CertifyRecord<'a> {
    command: &'static str,
    config_hash: String,
    config: RunConfig,
    report: &'a CertificationReport,
}

fn certify(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let ds = evaluation_set(cfg, load_dataset(cfg)?);
    check_compatible(&model, &ds)?;
    let report = certified_accuracy(
        &ds.images,
        &ds.labels,
        &model,
        &cfg.ablation,
        &cfg.patch_sizes,
        cfg.delta_mode,
    )?;
    let hash = cfg.content_hash("certify");
    let record = CertifyRecord {
        command: "certify",
        config_hash: hash.clone(),
        config: cfg.canonical(),
        report: &report,
    };
    let json = serde_json::to_vec_pretty(&record).map_err(Error::from)?;
    let csv = report.summary_csv();
    let json_path = write_report(&cfg.out, &format!("certify-{hash}"), "json", &json)?;
    let csv_path = write_report(&cfg.out, &format!("certify-{hash}"), "csv", csv.as_bytes())?;
    info!("reports: {} {}", json_path.display(), csv_path.display());
    Ok(csv)
}

/// One `delta` table row. `oracle` is `None` when enumeration is over budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeltaRow {
    pub m: usize,
    pub safe: u64,
    pub paper: u64,
    pub oracle: Option<u64>,
}

impl DeltaRow {
    pub fn disagrees(&self) -> bool {
        self.safe != self.paper || self.oracle.is_some_and(|o| o != self.safe || o != self.paper)
    }
}

pub fn delta_rows(h: usize, w: usize, spec: &AblationSpec, patch_sizes: &[usize]) -> Result<Vec<DeltaRow>, CliError> {
    patch_sizes
        .iter()
        .map(|&m| {
            let oracle = match delta_oracle(h, w, spec, m) {
                Ok(v) => Some(v),
                Err(Error::Budget { needed, limit }) => {
                    warn!("oracle skipped for m={m}: {needed} steps over budget {limit}");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            Ok(DeltaRow {
                m,
                safe: delta_closed_form(h, w, spec, m, DeltaMode::Safe)?,
                paper: delta_closed_form(h, w, spec, m, DeltaMode::Paper)?,
                oracle,
            })
        })
        .collect()
}

fn delta(cfg: &RunConfig) -> Result<String, CliError> {
    let h = cfg.delta.h.unwrap_or(cfg.model.h);
    let w = cfg.delta.w.unwrap_or(cfg.model.w);
    let spec = &cfg.ablation;
    let rows = delta_rows(h, w, spec, &cfg.patch_sizes)?;
    let mut out = format!(
        "# {} b={} stride={} offset={} image {h}x{w}\nm\tsafe\tpaper\toracle\tflag\n",
        spec.kind, spec.b, spec.stride, spec.offset
    );
    for r in &rows {
        let oracle = r.oracle.map_or_else(|| "skipped".to_string(), |v| v.to_string());
        let flag = if r.disagrees() { "DISAGREE" } else { "" };
        writeln!(out, "{}\t{}\t{}\t{oracle}\t{flag}", r.m, r.safe, r.paper).expect("write to string");
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: &str =
    "kind,b,stride,offset,ablations,delta_mode,m,delta,standard_accuracy,certified_accuracy";

fn sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let ds = evaluation_set(cfg, load_dataset(cfg)?);
    check_compatible(&model, &ds)?;
    let mut seen = HashSet::new();
    let mut grid = Vec::new();
    for &b in &cfg.sweep.b_values {
        for &s in &cfg.sweep.strides {
            if seen.insert((b, s)) {
                grid.push((b, s));
            } else {
                warn!("duplicate sweep grid point b={b} stride={s} ignored");
            }
        }
    }
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for (b, s) in grid {
        let spec = AblationSpec {
            b,
            stride: s,
            ..cfg.ablation
        };
        let report = certified_accuracy(&ds.images, &ds.labels, &model, &spec, &cfg.patch_sizes, cfg.delta_mode)?;
        let ablations = spec.set_size(model.cfg.h, model.cfg.w);
        for row in &report.certified {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{:.6},{:.6}",
                spec.kind,
                b,
                s,
                spec.offset,
                ablations,
                cfg.delta_mode,
                row.m,
                row.delta,
                report.standard_accuracy,
                row.accuracy
            )
            .expect("write to string");
        }
        info!("sweep b={b} stride={s} done");
    }
    let path = write_report(
        &cfg.out,
        &format!("sweep-{}", cfg.content_hash("sweep")),
        "csv",
        csv.as_bytes(),
    )?;
    info!("report: {}", path.display());
    Ok(csv)
}

#[derive(Serialize)]
struct BenchRecord<'a> {
    timing: &'static str,
    config_hash: String,
    config: RunConfig,
    rows: &'a [BenchRow],
}

fn bench(cfg: &RunConfig) -> Result<String, CliError> {
    let model = match &cfg.ckpt {
        Some(_) => load_model(cfg)?,
        None => VisionTransformer::init(cfg.model, cfg.seed)?,
    };
    let ds = load_dataset(cfg)?;
    check_compatible(&model, &ds)?;
    let x = ds.images.get(cfg.image).ok_or_else(|| {
        CliError::InvalidParams(format!(
            "image index {} out of range for {} images",
            cfg.image,
            ds.len()
        ))
    })?;
    let rows = bench_sweep(
        &model.params,
        &model.cfg,
        x,
        cfg.ablation.kind,
        &cfg.bench.widths,
        cfg.bench.stride,
        cfg.bench.trials,
    )?;
    let csv = bench_csv(&rows);
    let hash = cfg.content_hash("bench");
    let record = BenchRecord {
        timing: "seconds per smoothed forward pass (full ablation set of one image), single thread, \
                 mean over trials, ablations prebuilt",
        config_hash: hash.clone(),
        config: cfg.canonical(),
        rows: &rows,
    };
    write_report(&cfg.out, &format!("bench-{hash}"), "csv", csv.as_bytes())?;
    write_report(
        &cfg.out,
        &format!("bench-{hash}"),
        "json",
        &serde_json::to_vec_pretty(&record).map_err(Error::from)?,
    )?;
    Ok(csv)
}
