//! Reference for token dropping: the encoder over the full token grid with
//! dropped tokens masked out of attention instead of removed.
//!
//! Masked tokens are never attended to as keys, never updated as queries and
//! never read out. Every surviving row therefore sees exactly the arithmetic
//! of the reduced-set forward pass, which makes this an equivalence check for
//! [`super::process_ablation_logits`].

use crate::ablation::AblatedImage;
use crate::error::{Error, Result};
use crate::numerics::{add_bias, gelu, layer_norm, matmul, softmax_slice, MacCounter, Tensor};

use super::encoder::LN_EPS;
use super::{block_survives, tokenize, ModelParams, TokenPos, ViTConfig};

pub fn masked_attention_oracle_forward(z: &AblatedImage, params: &ModelParams, cfg: &ViTConfig) -> Result<Vec<f32>> {
    let macs = MacCounter::new();
    let tokens = tokenize(z, params, cfg, &macs)?;
    let alive: Vec<bool> = tokens
        .tokens
        .iter()
        .map(|t| match t.pos {
            TokenPos::Class => true,
            TokenPos::Grid { row, col } => block_survives(&z.mask, cfg, row, col),
        })
        .collect();
    if !alive.iter().any(|&a| a) {
        return Err(Error::EmptyTokens);
    }
    let n = tokens.len();
    let (d, dh) = (cfg.d, cfg.head_dim());
    let rows: Vec<&[f32]> = tokens.tokens.iter().map(|t| t.embedding.as_slice()).collect();
    let mut x = Tensor::from_rows(&rows)?.into_data();
    let inv = 1.0 / (dh as f32).sqrt();

    for l in &params.layers {
        let xt = Tensor::new(vec![n, d], x.clone())?;
        let a = layer_norm(&xt, &l.ln1_gamma, &l.ln1_beta, LN_EPS)?;
        let q = add_bias(&matmul(&a, &l.wq, &macs)?, &l.bq)?;
        let k = add_bias(&matmul(&a, &l.wk, &macs)?, &l.bk)?;
        let v = add_bias(&matmul(&a, &l.wv, &macs)?, &l.bv)?;
        let mut concat = vec![0.0f32; n * d];
        for h in 0..cfg.heads {
            for i in 0..n {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                let scores: Vec<f32> = (0..n)
                    .map(|j| {
                        if !alive[j] {
                            return f32::NEG_INFINITY;
                        }
                        let kj = &k.row(j)[h * dh..(h + 1) * dh];
                        let mut s = 0.0f32;
                        for (a, b) in qi.iter().zip(kj) {
                            s += a * b;
                        }
                        s * inv
                    })
                    .collect();
                let probs = softmax_slice(&scores);
                for c in 0..dh {
                    let mut acc = 0.0f32;
                    for (j, &pj) in probs.iter().enumerate() {
                        acc += pj * v.row(j)[h * dh + c];
                    }
                    concat[i * d + h * dh + c] = acc;
                }
            }
        }
        let concat = Tensor::new(vec![n, d], concat)?;
        let attn = add_bias(&matmul(&concat, &l.wo, &macs)?, &l.bo)?;
        let mut mid = x.clone();
        for i in (0..n).filter(|&i| alive[i]) {
            for c in 0..d {
                mid[i * d + c] += attn.row(i)[c];
            }
        }
        let midt = Tensor::new(vec![n, d], mid.clone())?;
        let b = layer_norm(&midt, &l.ln2_gamma, &l.ln2_beta, LN_EPS)?;
        let hidden = gelu(&add_bias(&matmul(&b, &l.w1, &macs)?, &l.b1)?);
        let mlp = add_bias(&matmul(&hidden, &l.w2, &macs)?, &l.b2)?;
        for i in (0..n).filter(|&i| alive[i]) {
            for c in 0..d {
                mid[i * d + c] += mlp.row(i)[c];
            }
        }
        x = mid;
    }

    let normed = layer_norm(
        &Tensor::new(vec![n, d], x)?,
        &params.norm_gamma,
        &params.norm_beta,
        LN_EPS,
    )?;
    let readout: Vec<f32> = if cfg.use_class_token {
        let r = tokens
            .tokens
            .iter()
            .position(|t| t.pos == TokenPos::Class)
            .expect("tokenize adds the class token");
        normed.row(r).to_vec()
    } else {
        let live: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
        (0..d)
            .map(|c| (live.iter().map(|&i| normed.row(i)[c] as f64).sum::<f64>() / live.len() as f64) as f32)
            .collect()
    };
    let logits = add_bias(
        &matmul(&Tensor::new(vec![1, d], readout)?, &params.head_w, &macs)?,
        &params.head_b,
    )?;
    Ok(logits.into_data())
}
