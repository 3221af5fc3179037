//! Exact multiply-accumulate model of the encoder, smoothing cost with and
//! without token dropping, and a wall-clock harness comparing both paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ablation::{ablate, AblatedImage, AblationKind, AblationSpec, Anchor, Image};
use crate::error::{Error, Result};
use crate::numerics::MacCounter;
use crate::vit::{full_token_logits, process_ablation_logits, ModelParams, ViTConfig};

/// Token columns (or rows) touched by a span of `b` pixels starting at
/// `start`, on an axis of `grid` tokens of side `p`.
fn axis_tokens(start: usize, b: usize, p: usize, grid: usize) -> usize {
    (start % p + b).div_ceil(p).min(grid)
}

/// Surviving token count for one ablation, class token included.
pub fn tokens_for_ablation(cfg: &ViTConfig, spec: &AblationSpec, anchor: Anchor) -> Result<usize> {
    cfg.validate()?;
    spec.validate(cfg.h, cfg.w)?;
    let (p, b) = (cfg.p, spec.b);
    let grid = match (spec.kind, anchor) {
        (AblationKind::Column, Anchor::Column { start }) if start < cfg.w => {
            cfg.grid_rows() * axis_tokens(start, b, p, cfg.grid_cols())
        }
        (AblationKind::Block, Anchor::Block { top, left }) if top < cfg.h && left < cfg.w => {
            axis_tokens(top, b, p, cfg.grid_rows()) * axis_tokens(left, b, p, cfg.grid_cols())
        }
        _ => {
            return Err(Error::param(format!(
                "anchor {anchor:?} does not fit a {} ablation of {}x{}",
                spec.kind, cfg.h, cfg.w
            )))
        }
    };
    Ok(grid + usize::from(cfg.use_class_token))
}

/// Token count of the full grid, class token included.
pub fn full_tokens(cfg: &ViTConfig) -> usize {
    cfg.grid_tokens() + usize::from(cfg.use_class_token)
}

/// Multiply-accumulates of one forward pass over `n` tokens, by term.
///
/// `total` counts every matrix product the implementation performs.
/// `elementwise` (softmax exponentials, GELU evaluations and normalized
/// elements) is informational and not part of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub n: usize,
    /// Scores and weighted sum: `L * 2 n^2 d`.
    pub attention: u64,
    /// Query, key, value and output projections: `L * 4 n d^2`.
    pub projections: u64,
    /// Two MLP layers with hidden width `4d`: `L * 8 n d^2`.
    pub mlp: u64,
    /// Patch embedding of the grid tokens: `(n - cls) * p^2 c * d`.
    pub tokenization: u64,
    /// Classification head on one readout vector: `d * k`.
    pub head: u64,
    pub total: u64,
    pub elementwise: u64,
}

impl MacBreakdown {
    pub fn encoder(&self) -> u64 {
        self.attention + self.projections + self.mlp
    }
}

pub fn predicted_macs(cfg: &ViTConfig, n: usize) -> Result<MacBreakdown> {
    let cls = usize::from(cfg.use_class_token);
    if n <= cls {
        return Err(Error::param(format!("need at least one grid token, got n = {n}")));
    }
    let (n64, d, l) = (n as u64, cfg.d as u64, cfg.layers as u64);
    let attention = l * 2 * n64 * n64 * d;
    let projections = l * 4 * n64 * d * d;
    let mlp = l * 8 * n64 * d * d;
    let tokenization = (n - cls) as u64 * cfg.patch_dim() as u64 * d;
    let head = d * cfg.k as u64;
    let elementwise = l * (cfg.heads as u64 * n64 * n64 + 4 * n64 * d + 2 * n64 * d) + n64 * d;
    Ok(MacBreakdown {
        n,
        attention,
        projections,
        mlp,
        tokenization,
        head,
        total: attention + projections + mlp + tokenization + head,
        elementwise,
    })
}

/// MACs of one smoothed forward pass over the whole ablation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingCost {
    pub ablations: usize,
    pub tokens_mean: f64,
    pub macs_drop: u64,
    pub macs_full: u64,
}

impl SmoothingCost {
    pub fn ratio(&self) -> f64 {
        self.macs_drop as f64 / self.macs_full as f64
    }
}

pub fn smoothing_cost(cfg: &ViTConfig, spec: &AblationSpec) -> Result<SmoothingCost> {
    let anchors = spec.anchors(cfg.h, cfg.w)?;
    let full = predicted_macs(cfg, full_tokens(cfg))?.total;
    let mut macs_drop = 0u64;
    let mut tokens = 0usize;
    for &a in &anchors {
        let n = tokens_for_ablation(cfg, spec, a)?;
        tokens += n;
        macs_drop += predicted_macs(cfg, n)?.total;
    }
    Ok(SmoothingCost {
        ablations: anchors.len(),
        tokens_mean: tokens as f64 / anchors.len() as f64,
        macs_drop,
        macs_full: full * anchors.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_s: f64,
    pub std_s: f64,
}

impl TimingStats {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_s: mean,
            std_s: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallclockReport {
    pub trials: usize,
    pub drop: TimingStats,
    pub full: TimingStats,
    /// `full.mean_s / drop.mean_s`
    pub speedup: f64,
}

/// Times the token-dropping path and the full-grid path over the same
/// prebuilt ablations, on the calling thread. Each trial is one sweep over
/// the batch; the paths alternate to share any drift.
pub fn wallclock_harness(
    params: &ModelParams,
    cfg: &ViTConfig,
    batch: &[AblatedImage],
    trials: usize,
) -> Result<WallclockReport> {
    if trials < 3 {
        return Err(Error::param(format!("need at least 3 trials, got {trials}")));
    }
    if batch.is_empty() {
        return Err(Error::param("empty ablation batch"));
    }
    let macs = MacCounter::new();
    let mut sink = 0.0f32;
    // warm-up
    for z in batch {
        sink += process_ablation_logits(z, params, cfg, &macs)?[0];
        sink += full_token_logits(z, params, cfg, &macs)?[0];
    }
    let (mut drop, mut full) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let t = Instant::now();
        for z in batch {
            sink += process_ablation_logits(z, params, cfg, &macs)?[0];
        }
        drop.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        for z in batch {
            sink += full_token_logits(z, params, cfg, &macs)?[0];
        }
        full.push(t.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    let (drop, full) = (TimingStats::from_samples(&drop), TimingStats::from_samples(&full));
    Ok(WallclockReport {
        trials,
        drop,
        full,
        speedup: full.mean_s / drop.mean_s,
    })
}

/// One row of the benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub b: usize,
    pub stride: usize,
    pub n_tokens_mean: f64,
    pub macs_drop: u64,
    pub macs_full: u64,
    pub mac_ratio: f64,
    pub time_drop_s: f64,
    pub time_full_s: f64,
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: &str =
    "b,stride,n_tokens_mean,macs_drop,macs_full,mac_ratio,time_drop_s,time_full_s,speedup";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.4},{},{},{:.6},{:.6e},{:.6e},{:.4}",
            self.b,
            self.stride,
            self.n_tokens_mean,
            self.macs_drop,
            self.macs_full,
            self.mac_ratio,
            self.time_drop_s,
            self.time_full_s,
            self.speedup
        )
    }
}

/// For each width, times one smoothed forward pass of `x` (the full
/// ablation set of one image) on both paths and pairs it with the MAC model.
pub fn bench_sweep(
    params: &ModelParams,
    cfg: &ViTConfig,
    x: &Image,
    kind: AblationKind,
    widths: &[usize],
    stride: usize,
    trials: usize,
) -> Result<Vec<BenchRow>> {
    widths
        .iter()
        .map(|&b| {
            let spec = match kind {
                AblationKind::Column => AblationSpec::column(b),
                AblationKind::Block => AblationSpec::block(b),
            }
            .with_stride(stride);
            let cost = smoothing_cost(cfg, &spec)?;
            let batch = spec
                .anchors(cfg.h, cfg.w)?
                .into_iter()
                .map(|a| ablate(x, b, a))
                .collect::<Result<Vec<_>>>()?;
            let timing = wallclock_harness(params, cfg, &batch, trials)?;
            Ok(BenchRow {
                b,
                stride,
                n_tokens_mean: cost.tokens_mean,
                macs_drop: cost.macs_drop,
                macs_full: cost.macs_full,
                mac_ratio: cost.ratio(),
                time_drop_s: timing.drop.mean_s,
                time_full_s: timing.full.mean_s,
                speedup: timing.speedup,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
