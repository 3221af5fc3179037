//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line, even when all of them pass.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchcert::ablation::{ablate, ablation_mask, AblationKind, AblationSpec, Anchor, Image};
use patchcert::bench::{bench_sweep, predicted_macs, smoothing_cost, tokens_for_ablation};
use patchcert::certify::{
    adversarial_flip_search, aggregate_votes, certified_accuracy, certify_votes, delta_closed_form, delta_oracle,
    DeltaMode,
};
use patchcert::io::{
    checkpoint_from_bytes, checkpoint_to_bytes, idx_to_bytes, load_cifar10_binary, parse_idx, save_checkpoint,
    IdxTensor,
};
use patchcert::numerics::MacCounter;
use patchcert::train::{ablation_accuracy, fit, make_stripe_dataset, Split, TrainConfig};
use patchcert::vit::{
    block_survives, encoder_forward, full_token_logits, loss_and_gradients, masked_attention_oracle_forward,
    process_ablation_logits, tokenize_retained, ModelParams, ViTConfig, VisionTransformer,
};
use patchcert_cli::commands::delta_rows;
use patchcert_cli::Cli;
use patchcert_testkit::{fd_gradients, relative_error, spearman};

type Check = Result<String, String>;

/// Number, name, time limit in seconds, and the check itself.
type Criterion = (u32, &'static str, Option<u64>, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn spec_of(kind: AblationKind, b: usize) -> AblationSpec {
    match kind {
        AblationKind::Column => AblationSpec::column(b),
        AblationKind::Block => AblationSpec::block(b),
    }
}

fn random_anchor(kind: AblationKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Anchor {
    match kind {
        AblationKind::Column => Anchor::Column {
            start: rng.random_range(0..w),
        },
        AblationKind::Block => Anchor::Block {
            top: rng.random_range(0..h),
            left: rng.random_range(0..w),
        },
    }
}

fn c1_delta_stride_one() -> Check {
    let mut points = 0u64;
    for h in 6..=16 {
        for w in 6..=16 {
            for m in 1..=h.min(w) {
                for b in 1..=w {
                    let col = AblationSpec::column(b);
                    let safe = ok(delta_closed_form(h, w, &col, m, DeltaMode::Safe))?;
                    let oracle = ok(delta_oracle(h, w, &col, m))?;
                    let expect = (m + b - 1).min(w) as u64;
                    ensure!(
                        safe == oracle && oracle == expect,
                        "column h={h} w={w} b={b} m={m}: safe {safe}, oracle {oracle}, expected {expect}"
                    );
                    points += 1;
                    if b > h.min(w) {
                        continue;
                    }
                    let blk = AblationSpec::block(b);
                    let safe = ok(delta_closed_form(h, w, &blk, m, DeltaMode::Safe))?;
                    let oracle = ok(delta_oracle(h, w, &blk, m))?;
                    let expect = ((m + b - 1).min(h) * (m + b - 1).min(w)) as u64;
                    ensure!(
                        safe == oracle && oracle == expect,
                        "block h={h} w={w} b={b} m={m}: safe {safe}, oracle {oracle}, expected {expect}"
                    );
                    if m + b - 1 <= h.min(w) {
                        ensure!(oracle == ((m + b - 1) * (m + b - 1)) as u64, "block square law");
                    }
                    points += 1;
                }
            }
        }
    }
    Ok(format!("{points} grid points exact"))
}

fn c2_delta_strided() -> Check {
    let mut points = 0u64;
    for w in 1..=64 {
        for b in 1..=w {
            // strides beyond the width are rejected as invalid parameters
            for s in 1..=8.min(w) {
                for m in 1..=w.min(16) {
                    // column intersections do not depend on the patch's row
                    let spec = AblationSpec::column(b).with_stride(s);
                    let safe = ok(delta_closed_form(m, w, &spec, m, DeltaMode::Safe))?;
                    let oracle = ok(delta_oracle(m, w, &spec, m))?;
                    ensure!(safe == oracle, "w={w} b={b} s={s} m={m}: safe {safe} oracle {oracle}");
                    points += 1;
                }
            }
        }
    }
    // blocks on a smaller square grid
    for n in 4..=16 {
        for b in 1..=n {
            for s in 1..=4 {
                for m in 1..=n.min(6) {
                    let spec = AblationSpec::block(b).with_stride(s);
                    let safe = ok(delta_closed_form(n, n, &spec, m, DeltaMode::Safe))?;
                    let oracle = ok(delta_oracle(n, n, &spec, m))?;
                    ensure!(
                        safe == oracle,
                        "block n={n} b={b} s={s} m={m}: safe {safe} oracle {oracle}"
                    );
                    points += 1;
                }
            }
        }
    }
    let spec = AblationSpec::column(19).with_stride(5);
    let rows = ok(delta_rows(224, 224, &spec, &[32]).map_err(|e| e.to_string()))?;
    let r = &rows[0];
    let oracle = r.oracle.ok_or("oracle skipped at w=224")?;
    ensure!(r.paper < oracle, "paper {} not below oracle {oracle}", r.paper);
    ensure!(r.disagrees(), "delta table does not flag the disagreement");
    let out = ok(patchcert_cli::run(&Cli::parse_from([
        "patchcert",
        "delta",
        "--h",
        "224",
        "--w",
        "224",
        "--b",
        "19",
        "--stride",
        "5",
        "--patch-sizes",
        "32",
    ])))?;
    ensure!(out.contains("DISAGREE"), "delta command output lacks the flag:\n{out}");
    Ok(format!(
        "{points} grid points exact; w=224 b=19 s=5 m=32: paper {} < oracle {oracle}, flagged",
        r.paper
    ))
}

fn c3_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut images, mut certified, mut flipped) = (0, 0, 0);
    for seed in 0..240u64 {
        let n = [8, 12, 16][(seed % 3) as usize];
        let kind = if seed % 2 == 0 {
            AblationKind::Column
        } else {
            AblationKind::Block
        };
        let s = 1 + (seed / 2 % 3) as usize;
        let k = rng.random_range(2..=4);
        let b = rng.random_range(1..=n.min(6));
        let m = rng.random_range(1..=4);
        let spec = spec_of(kind, b).with_stride(s);
        let set = spec.set_size(n, n);
        let label = rng.random_range(0..k);
        let q: f64 = rng.random_range(0.5..=1.0);
        let preds: Vec<usize> = (0..set)
            .map(|_| {
                if rng.random_bool(q) {
                    label
                } else {
                    rng.random_range(0..k)
                }
            })
            .collect();
        let votes = ok(aggregate_votes(&preds, k))?;
        let delta = ok(delta_oracle(n, n, &spec, m))?;
        let cert = ok(certify_votes(&votes, delta, m, DeltaMode::Oracle))?;
        let flip = ok(adversarial_flip_search(&preds, k, &spec, n, n, m, cert.predicted))?;
        images += 1;
        if cert.certified {
            certified += 1;
            ensure!(
                !flip.changed(),
                "image {seed} ({kind} b={b} s={s} m={m}) certified but flipped at {:?}",
                flip.placement
            );
        } else if flip.changed() {
            flipped += 1;
        }
    }
    ensure!(certified > 0, "no image certified; the check is vacuous");
    Ok(format!(
        "{images} images, {certified} certified, 0 violations ({flipped} uncertified images flipped)"
    ))
}

fn c4_token_drop() -> Check {
    let cfg = ViTConfig::toy();
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ok(ModelParams::random(&cfg, seed, 0.2))?;
        let x = random_image(cfg.h, cfg.w, cfg.c, &mut rng);
        let kind = if seed % 2 == 0 {
            AblationKind::Column
        } else {
            AblationKind::Block
        };
        let b = rng.random_range(1..=16);
        let z = ok(ablate(&x, b, random_anchor(kind, cfg.h, cfg.w, &mut rng)))?;
        let fast = ok(process_ablation_logits(&z, &params, &cfg, &MacCounter::new()))?;
        let oracle = ok(masked_attention_oracle_forward(&z, &params, &cfg))?;
        for (a, o) in fast.iter().zip(&oracle) {
            worst = worst.max((a - o).abs());
        }
    }
    ensure!(worst < 1e-5, "max abs logit difference {worst:e}");
    Ok(format!("100 triples, max abs logit difference {worst:.2e}"))
}

fn c5_permutation() -> Check {
    let cfg = ViTConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let params = ok(ModelParams::random(&cfg, 1000 + seed, 0.2))?;
        let x = random_image(cfg.h, cfg.w, cfg.c, &mut rng);
        let z = ok(ablate(
            &x,
            rng.random_range(1..=16),
            random_anchor(AblationKind::Column, 16, 16, &mut rng),
        ))?;
        let macs = MacCounter::new();
        let tokens = ok(tokenize_retained(&z, &params, &cfg, &macs))?;
        let base = ok(encoder_forward(&tokens, &params, &cfg, &macs))?;
        let mut shuffled = tokens.clone();
        shuffled.tokens.shuffle(&mut rng);
        let perm = ok(encoder_forward(&shuffled, &params, &cfg, &macs))?;
        for (a, p) in base.iter().zip(&perm) {
            worst = worst.max((a - p).abs());
        }
    }
    ensure!(worst < 1e-5, "max abs logit difference {worst:e}");
    Ok(format!("100 permutations, max abs logit difference {worst:.2e}"))
}

fn c6_gradients() -> Check {
    let cfg = ViTConfig::toy();
    let mut worst = (0.0f64, String::new());
    let mut tensors = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let params = ok(ModelParams::random(&cfg, 60 + seed, 0.2))?;
        let x = random_image(cfg.h, cfg.w, cfg.c, &mut rng);
        let z = ok(ablate(
            &x,
            3,
            random_anchor(AblationKind::Column, cfg.h, cfg.w, &mut rng),
        ))?;
        let label = rng.random_range(0..cfg.k);
        let (_, _, grads) = ok(loss_and_gradients(&z, label, &params, &cfg))?;
        let fd = fd_gradients(&params, &cfg, &z, label, 1e-3);
        for ((name, g), (_, n)) in grads.tensors().into_iter().zip(fd) {
            let a: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
            let err = relative_error(&a, &n);
            if err > worst.0 {
                worst = (err, format!("seed {seed} {name}"));
            }
            tensors += 1;
        }
    }
    ensure!(worst.0 < 1e-3, "relative error {:.2e} at {}", worst.0, worst.1);
    Ok(format!(
        "10 seeds, {tensors} tensors, worst relative error {:.2e} ({})",
        worst.0, worst.1
    ))
}

/// Grid tokens kept by a mask, counted cell by cell, plus the class token.
fn inspected_tokens(cfg: &ViTConfig, b: usize, anchor: Anchor) -> usize {
    let mask = ablation_mask(cfg.h, cfg.w, b, anchor).unwrap();
    let grid = (0..cfg.grid_rows())
        .flat_map(|r| (0..cfg.grid_cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| block_survives(&mask, cfg, r, c))
        .count();
    grid + usize::from(cfg.use_class_token)
}

fn c7_mac_model() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let p = [2, 4][rng.random_range(0..2)];
        let heads = rng.random_range(1..=2);
        let cfg = ViTConfig {
            h: p * rng.random_range(1..=4),
            w: p * rng.random_range(1..=4),
            c: [1, 3][rng.random_range(0..2)],
            p,
            d: heads * [2, 4][rng.random_range(0..2)],
            heads,
            layers: rng.random_range(1..=3),
            k: rng.random_range(2..=5),
            use_class_token: rng.random_bool(0.5),
        };
        let params = ok(ModelParams::random(&cfg, i, 0.2))?;
        let x = random_image(cfg.h, cfg.w, cfg.c, &mut rng);
        let kind = if rng.random_bool(0.5) || cfg.h != cfg.w {
            AblationKind::Column
        } else {
            AblationKind::Block
        };
        let limit = if kind == AblationKind::Column {
            cfg.w
        } else {
            cfg.h.min(cfg.w)
        };
        let b = rng.random_range(1..=limit);
        let anchor = random_anchor(kind, cfg.h, cfg.w, &mut rng);
        let z = ok(ablate(&x, b, anchor))?;
        let macs = MacCounter::new();
        ok(process_ablation_logits(&z, &params, &cfg, &macs))?;
        let n = ok(tokens_for_ablation(&cfg, &spec_of(kind, b), anchor))?;
        let predicted = ok(predicted_macs(&cfg, n))?.total;
        ensure!(
            macs.get() == predicted,
            "config {i} {cfg:?}: counted {} predicted {predicted}",
            macs.get()
        );
        let macs = MacCounter::new();
        ok(full_token_logits(&z, &params, &cfg, &macs))?;
        let full = ok(predicted_macs(
            &cfg,
            cfg.grid_tokens() + usize::from(cfg.use_class_token),
        ))?
        .total;
        ensure!(
            macs.get() == full,
            "config {i} full path: counted {} predicted {full}",
            macs.get()
        );
    }
    let mut widths = 0;
    for cfg in [
        ViTConfig::toy(),
        ViTConfig {
            h: 32,
            w: 32,
            p: 8,
            ..ViTConfig::toy()
        },
    ] {
        let full_n = cfg.grid_tokens() + 1;
        for kind in [AblationKind::Column, AblationKind::Block] {
            for b in 1..=cfg.w {
                let spec = spec_of(kind, b);
                let cost = ok(smoothing_cost(&cfg, &spec))?;
                let spans = ok(spec.anchors(cfg.h, cfg.w))?
                    .into_iter()
                    .all(|a| inspected_tokens(&cfg, b, a) == full_n);
                ensure!(cost.macs_drop <= cost.macs_full, "{kind} b={b}: drop exceeds full");
                ensure!(
                    (cost.macs_drop == cost.macs_full) == spans,
                    "{kind} b={b}: equality {} but full-grid coverage {spans}",
                    cost.macs_drop == cost.macs_full
                );
                widths += 1;
            }
        }
    }
    Ok(format!(
        "20 configs counted exactly; drop <= full on {widths} widths, equality only at full coverage"
    ))
}

fn c8_token_count() -> Check {
    let mut cases = 0u64;
    for p in [2, 4, 8, 16] {
        for w in (p..=64).step_by(p) {
            let cfg = ViTConfig {
                h: 2 * p,
                w,
                p,
                ..ViTConfig::toy()
            };
            for b in 1..=w {
                for start in 0..w {
                    let a = Anchor::Column { start };
                    let got = ok(tokens_for_ablation(&cfg, &AblationSpec::column(b), a))?;
                    let want = inspected_tokens(&cfg, b, a);
                    ensure!(
                        got == want,
                        "p={p} w={w} b={b} start={start}: formula {got}, mask {want}"
                    );
                    cases += 1;
                }
            }
        }
        let cfg = ViTConfig {
            h: 4 * p,
            w: 4 * p,
            p,
            ..ViTConfig::toy()
        };
        for b in 1..=cfg.w {
            for top in 0..cfg.h {
                for left in (0..cfg.w).step_by(3) {
                    let a = Anchor::Block { top, left };
                    let got = ok(tokens_for_ablation(&cfg, &AblationSpec::block(b), a))?;
                    ensure!(
                        got == inspected_tokens(&cfg, b, a),
                        "block p={p} b={b} at ({top},{left})"
                    );
                    cases += 1;
                }
            }
        }
    }
    let big = ViTConfig {
        h: 224,
        w: 224,
        p: 16,
        ..ViTConfig::toy()
    };
    let at = |start| tokens_for_ablation(&big, &AblationSpec::column(19), Anchor::Column { start });
    let (aligned, straddling) = (ok(at(0))?, ok(at(14))?);
    ensure!(
        aligned == 29 && straddling == 43,
        "224/16/19: {aligned} and {straddling} tokens"
    );
    ensure!(
        aligned == inspected_tokens(&big, 19, Anchor::Column { start: 0 })
            && straddling == inspected_tokens(&big, 19, Anchor::Column { start: 14 }),
        "224/16/19 mask inspection disagrees"
    );
    Ok(format!(
        "{cases} (p, b, anchor) cases exact; 224/16/19 gives 28 and 42 grid tokens"
    ))
}

struct Trained {
    dir: tempfile::TempDir,
    ckpt: PathBuf,
}

fn c9_training(trained: &mut Option<Trained>) -> Check {
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let t = Instant::now();
        let data = ok(make_stripe_dataset(512, 16, 16, 4, 0.1, seed))?;
        let cfg = TrainConfig {
            seed,
            epochs: 30,
            b_train: 3,
            ..TrainConfig::default()
        };
        let model = ok(VisionTransformer::init(ViTConfig::toy(), seed))?;
        let mut finite = true;
        let out = ok(fit(model, &data, &cfg, |e| finite &= e.train_loss.is_finite()))?;
        ensure!(finite, "seed {seed}: non-finite training loss");
        let test = data.split(Split::Test);
        let abl = ok(ablation_accuracy(
            &out.model,
            &test.images,
            &test.labels,
            3,
            AblationKind::Column,
        ))?;
        let spec = AblationSpec::column(3);
        let report = ok(certified_accuracy(
            &test.images,
            &test.labels,
            &out.model,
            &spec,
            &[2],
            DeltaMode::Safe,
        ))?;
        let cert = &report.certified[0];
        let elapsed = t.elapsed();
        ensure!(cert.delta == 4, "seed {seed}: safe delta {} for m=2", cert.delta);
        ensure!(
            abl >= 0.95 && report.standard_accuracy >= 0.95 && cert.accuracy >= 0.5,
            "seed {seed}: ablation {abl:.3}, standard {:.3}, certified {:.3}",
            report.standard_accuracy,
            cert.accuracy
        );
        ensure!(elapsed < Duration::from_secs(300), "seed {seed} took {elapsed:?}");
        lines.push(format!(
            "seed {seed}: abl {abl:.3} std {:.3} cert {:.3} in {:.1}s",
            report.standard_accuracy,
            cert.accuracy,
            elapsed.as_secs_f64()
        ));
        if seed == 0 {
            let dir = ok(tempfile::tempdir())?;
            let ckpt = dir.path().join("toy.svit");
            ok(save_checkpoint(&ckpt, &out.model))?;
            *trained = Some(Trained { dir, ckpt });
        }
    }
    Ok(lines.join("; "))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let cli =
        Cli::try_parse_from(std::iter::once("patchcert").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    patchcert_cli::run(&cli).map_err(|e| e.record())
}

fn c10_sweep(trained: &Option<Trained>) -> Check {
    let t = trained.as_ref().ok_or("no trained model (criterion 9 failed)")?;
    let out = t.dir.path().join("sweep");
    let csv = cli(&[
        "sweep",
        "--ckpt",
        t.ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--b-values",
        "2,3,4,5,6,7,8",
        "--strides",
        "1,2,3",
        "--patch-sizes",
        "1,2",
    ])?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or(format!("missing column {name}"))
    };
    let (cb, cs, ca, cstd, ccert) = (
        col("b")?,
        col("stride")?,
        col("ablations")?,
        col("standard_accuracy")?,
        col("certified_accuracy")?,
    );
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == header.len(), "ragged row {line}");
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("non-numeric field {:?}", f[i]));
        let (b, s, abl, std, cert) = (num(cb)?, num(cs)?, num(ca)?, num(cstd)?, num(ccert)?);
        ensure!(cert <= std, "b={b} s={s}: certified {cert} above standard {std}");
        ensure!(abl == (16.0 / s).ceil(), "b={b} s={s}: {abl} ablations");
        rows.push((b as usize, s as usize, abl as usize));
    }
    ensure!(rows.len() == 7 * 3 * 2, "{} rows", rows.len());
    for b in 2..=8 {
        let counts: Vec<usize> = (1..=3)
            .map(|s| rows.iter().find(|r| r.0 == b && r.1 == s).map(|r| r.2).unwrap_or(0))
            .collect();
        ensure!(
            counts.windows(2).all(|w| w[1] <= w[0]),
            "b={b}: ablation counts {counts:?} increase with s"
        );
    }
    Ok(format!(
        "{} rows well-formed; certified <= standard; ablation count monotone in s",
        rows.len()
    ))
}

fn c11_wallclock(trained: &Option<Trained>) -> Check {
    let model = match trained {
        Some(t) => ok(patchcert::io::load_checkpoint(&t.ckpt))?,
        None => ok(VisionTransformer::init(ViTConfig::toy(), 0))?,
    };
    let x = ok(make_stripe_dataset(1, 16, 16, 4, 0.1, 11))?.images.remove(0);
    let widths = [1, 2, 3, 4, 6, 8, 12, 16];
    let rows = ok(bench_sweep(
        &model.params,
        &model.cfg,
        &x,
        AblationKind::Column,
        &widths,
        1,
        7,
    ))?;
    for r in rows.iter().filter(|r| r.b <= 4) {
        ensure!(r.speedup > 1.0, "b={}: speedup {:.2}", r.b, r.speedup);
    }
    let bs: Vec<f64> = rows.iter().map(|r| r.b as f64).collect();
    let times: Vec<f64> = rows.iter().map(|r| r.time_drop_s).collect();
    let rho = spearman(&bs, &times);
    ensure!(rho >= 0.9, "rank correlation {rho:.3}; times {times:?}");
    let low = rows
        .iter()
        .filter(|r| r.b <= 4)
        .map(|r| r.speedup)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "min speedup at b<=4 {low:.2}x; rank correlation of time with b {rho:.3}"
    ))
}

/// CIFAR-10 batch from `PATCHCERT_CIFAR10_BATCH`, or the usual extraction
/// path under the workspace root.
fn cifar_batch() -> Option<PathBuf> {
    let candidate = std::env::var_os("PATCHCERT_CIFAR10_BATCH")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin/data_batch_1.bin")
        });
    candidate.exists().then_some(candidate)
}

fn c12_determinism(trained: &Option<Trained>) -> Check {
    let t = trained.as_ref().ok_or("no trained model (criterion 9 failed)")?;
    let run_certify = |workers: &str, out: &str| -> Result<Vec<u8>, String> {
        let out = t.dir.path().join(out);
        cli(&[
            "certify",
            "--ckpt",
            t.ckpt.to_str().unwrap(),
            "--patch-sizes",
            "1,2",
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ])?;
        let json = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|p| p.extension().is_some_and(|x| x == "json"))
            .ok_or("no JSON report")?;
        std::fs::read(json).map_err(|e| e.to_string())
    };
    let a = run_certify("1", "det-a")?;
    let b = run_certify("1", "det-b")?;
    let c = run_certify("3", "det-c")?;
    ensure!(a == b, "rerun produced a different certify report");
    ensure!(a == c, "--workers 3 produced a different certify report");

    let data = ok(make_stripe_dataset(64, 16, 16, 4, 0.1, 12))?;
    let tc = TrainConfig {
        epochs: 2,
        seed: 12,
        ..TrainConfig::default()
    };
    let train = || -> Result<Vec<u8>, String> {
        let out = ok(fit(
            ok(VisionTransformer::init(ViTConfig::toy(), 12))?,
            &data,
            &tc,
            |_| {},
        ))?;
        ok(checkpoint_to_bytes(&out.model))
    };
    let ck = train()?;
    ensure!(ck == train()?, "training is not bit-reproducible");
    let back = ok(checkpoint_from_bytes(&ck))?;
    ensure!(
        ok(checkpoint_to_bytes(&back))? == ck,
        "checkpoint round trip changed bytes"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = vec![3, 5, 7];
    let u8s = IdxTensor::U8 {
        shape: shape.clone(),
        data: (0..105).map(|_| rng.random()).collect(),
    };
    let f32s = IdxTensor::F32 {
        shape,
        data: (0..105).map(|_| rng.random_range(-1e3f32..1e3)).collect(),
    };
    for t in [u8s, f32s] {
        let bytes = ok(idx_to_bytes(&t))?;
        let back = ok(parse_idx(&bytes))?;
        ensure!(
            back == t && ok(idx_to_bytes(&back))? == bytes,
            "IDX round trip changed {:?}",
            t.shape()
        );
    }

    let cifar = match cifar_batch() {
        None => "CIFAR-10 batch absent, loader check skipped".to_string(),
        Some(path) => {
            let raw = std::fs::read(&path).map_err(|e| e.to_string())?;
            let mut hist = [0usize; 10];
            for rec in raw.chunks_exact(3073) {
                hist[rec[0] as usize] += 1;
            }
            let ds = ok(load_cifar10_binary(&path))?;
            let mut got = [0usize; 10];
            ds.labels.iter().for_each(|&l| got[l] += 1);
            ensure!(
                ds.len() == raw.len() / 3073 && got == hist,
                "label histogram {got:?} vs {hist:?}"
            );
            let probe = &raw[1..3073];
            ensure!(
                ds.images[0].get(0, 0, 1) == probe[1024] as f32 / 255.0
                    && ds.images[0].get(31, 31, 2) == probe[3071] as f32 / 255.0,
                "pixel planes misread"
            );
            format!("CIFAR-10 batch: {} records, histogram {hist:?} matches", ds.len())
        }
    };
    Ok(format!(
        "reports identical across reruns and worker counts; checkpoint, training and IDX bit-exact; {cifar}"
    ))
}

fn main() {
    let mut trained: Option<Trained> = None;
    let criteria: [Criterion; 8] = [
        (1, "delta exactness, stride 1", Some(60), c1_delta_stride_one),
        (2, "delta exactness, strided", Some(300), c2_delta_strided),
        (3, "certification soundness", Some(600), c3_soundness),
        (4, "token-drop equivalence", Some(60), c4_token_drop),
        (5, "permutation equivariance", None, c5_permutation),
        (6, "gradient check", None, c6_gradients),
        (7, "MAC model exactness", None, c7_mac_model),
        (8, "token-count formula", None, c8_token_count),
    ];
    let mut failures = 0;
    let mut report = |n: u32, name: &str, limit: Option<u64>, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if secs > l as f64 => Err(format!("took {secs:.1}s, limit {l}s")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    };
    for (n, name, limit, mut f) in criteria {
        report(n, name, limit, &mut f);
    }
    report(9, "training smoke test", None, &mut || c9_training(&mut trained));
    report(10, "sweep shape", None, &mut || c10_sweep(&trained));
    report(11, "directional wall-clock", None, &mut || c11_wallclock(&trained));
    report(12, "determinism and formats", None, &mut || c12_determinism(&trained));
    if failures > 0 {
        println!("acceptance: {failures} of 12 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 12 criteria passed");
}
