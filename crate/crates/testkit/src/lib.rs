//! Straight-line f64 re-implementation of the ablation classifier.
//!
//! Shares no arithmetic with the library: survival is decided by scanning
//! mask pixels, every product is an explicit loop, and nothing is cached.
//! Used to check logits and, through central differences, gradients.

use std::collections::HashMap;

use patchcert::ablation::AblatedImage;
use patchcert::vit::{ModelParams, ViTConfig};

const EPS: f64 = 1e-5;

/// Parameters widened to f64, addressable by manifest name.
#[derive(Clone)]
pub struct RefParams {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl RefParams {
    pub fn from_model(params: &ModelParams) -> Self {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, t) in params.tensors() {
            names.push(name);
            values.push(t.data().iter().map(|&v| v as f64).collect());
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, values, index }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.values[self.index[name]]
    }
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = 1.0 / (var + EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * s * gamma[j] + beta[j])
        .collect()
}

/// `x (1 x in) * W (in x out) + b`
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Logits of one ablation, dropping patches whose mask block is all zero.
pub fn ref_logits(rp: &RefParams, cfg: &ViTConfig, z: &AblatedImage) -> Vec<f64> {
    let (p, c, d) = (cfg.p, cfg.c, cfg.d);
    let gc = cfg.w / p;
    let mut tokens: Vec<Vec<f64>> = Vec::new();
    if cfg.use_class_token {
        let cls = rp.get("cls_token");
        let cpos = rp.get("cls_pos");
        tokens.push((0..d).map(|j| cls[j] + cpos[j]).collect());
    }
    let pw = rp.get("patch_embed.weight");
    let pb = rp.get("patch_embed.bias");
    let pos = rp.get("pos_embed");
    for gr in 0..cfg.h / p {
        for gcol in 0..gc {
            let mut any = false;
            let mut flat = Vec::with_capacity(p * p * c);
            for dr in 0..p {
                for dc in 0..p {
                    let (r, col) = (gr * p + dr, gcol * p + dc);
                    any |= z.mask.get(r, col);
                    for ch in 0..c {
                        flat.push(z.pixels.get(r, col, ch) as f64);
                    }
                }
            }
            if !any {
                continue;
            }
            let mut e = affine(&flat, pw, pb);
            let cell = gr * gc + gcol;
            for j in 0..d {
                e[j] += pos[cell * d + j];
            }
            tokens.push(e);
        }
    }
    let n = tokens.len();
    let (heads, dh) = (cfg.heads, cfg.d / cfg.heads);
    let mut x = tokens;
    for l in 0..cfg.layers {
        let g = |s: &str| rp.get(&format!("blocks.{l}.{s}"));
        let a: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, g("ln1.gamma"), g("ln1.beta"))).collect();
        let q: Vec<Vec<f64>> = a
            .iter()
            .map(|r| affine(r, g("attn.q.weight"), g("attn.q.bias")))
            .collect();
        let k: Vec<Vec<f64>> = a
            .iter()
            .map(|r| affine(r, g("attn.k.weight"), g("attn.k.bias")))
            .collect();
        let v: Vec<Vec<f64>> = a
            .iter()
            .map(|r| affine(r, g("attn.v.weight"), g("attn.v.bias")))
            .collect();
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for t in 0..dh {
                    concat[i][h * dh + t] = (0..n).map(|j| ex[j] / z * v[j][h * dh + t]).sum();
                }
            }
        }
        for i in 0..n {
            let o = affine(&concat[i], g("attn.out.weight"), g("attn.out.bias"));
            for j in 0..d {
                x[i][j] += o[j];
            }
            let b = layer_norm(&x[i], g("ln2.gamma"), g("ln2.beta"));
            let hid: Vec<f64> = affine(&b, g("mlp.fc1.weight"), g("mlp.fc1.bias"))
                .into_iter()
                .map(gelu)
                .collect();
            let m = affine(&hid, g("mlp.fc2.weight"), g("mlp.fc2.bias"));
            for j in 0..d {
                x[i][j] += m[j];
            }
        }
    }
    let normed: Vec<Vec<f64>> = x
        .iter()
        .map(|r| layer_norm(r, rp.get("norm.gamma"), rp.get("norm.beta")))
        .collect();
    let readout: Vec<f64> = if cfg.use_class_token {
        normed[0].clone()
    } else {
        (0..d)
            .map(|j| normed.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect()
    };
    affine(&readout, rp.get("head.weight"), rp.get("head.bias"))
}

pub fn ref_loss(rp: &RefParams, cfg: &ViTConfig, z: &AblatedImage, label: usize) -> f64 {
    let logits = ref_logits(rp, cfg, z);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Central-difference gradient of [`ref_loss`] for every parameter tensor.
pub fn fd_gradients(
    params: &ModelParams,
    cfg: &ViTConfig,
    z: &AblatedImage,
    label: usize,
    h: f64,
) -> Vec<(String, Vec<f64>)> {
    let mut rp = RefParams::from_model(params);
    let mut out = Vec::with_capacity(rp.names.len());
    for t in 0..rp.names.len() {
        let mut grad = Vec::with_capacity(rp.values[t].len());
        for i in 0..rp.values[t].len() {
            let orig = rp.values[t][i];
            rp.values[t][i] = orig + h;
            let up = ref_loss(&rp, cfg, z, label);
            rp.values[t][i] = orig - h;
            let down = ref_loss(&rp, cfg, z, label);
            rp.values[t][i] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        out.push((rp.names[t].clone(), grad));
    }
    out
}

/// Denominator floor for [`relative_error`]. Key biases have an identically
/// zero gradient (softmax ignores a per-row constant), so their analytic and
/// numeric values are both rounding noise.
pub const GRADIENT_NORM_FLOOR: f64 = 1e-4;

/// `||a - b|| / max(||a||, ||b||, GRADIENT_NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(GRADIENT_NORM_FLOOR)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
