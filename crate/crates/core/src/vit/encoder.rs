//! Pre-norm transformer encoder over a variable-size token matrix, with an
//! optional trace for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::{
    add_bias, bias_backward, cross_entropy, gelu, gelu_backward, layer_norm_backward, layer_norm_forward, matmul,
    matmul_backward, softmax_backward, softmax_last_dim, LayerNormCache, MacCounter, Tensor,
};

use super::params::{LayerParams, ModelParams, ViTConfig};

pub(crate) const LN_EPS: f32 = 1e-5;

/// Columns `[start, start + width)` of a matrix.
pub(crate) fn take_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let d = x.last_dim();
    let rows = x.outer();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * d + start..r * d + start + width]);
    }
    Tensor::new(vec![rows, width], out).expect("column slice shape")
}

pub(crate) fn put_cols(dst: &mut [f32], d: usize, src: &Tensor, start: usize) {
    let width = src.last_dim();
    for r in 0..src.outer() {
        dst[r * d + start..r * d + start + width].copy_from_slice(src.row(r));
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn scale(a: &Tensor, s: f32) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect()).expect("same shape")
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor, macs: &MacCounter) -> Result<Tensor> {
    add_bias(&matmul(x, w, macs)?, b)
}

struct AttentionTrace {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    concat: Tensor,
}

struct LayerTrace {
    ln1: LayerNormCache,
    normed1: Tensor,
    attn: AttentionTrace,
    ln2: LayerNormCache,
    normed2: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

pub(crate) struct EncoderTrace {
    layers: Vec<LayerTrace>,
    final_ln: LayerNormCache,
    readout: Tensor,
    cls_row: Option<usize>,
    n: usize,
}

fn attention(normed: &Tensor, l: &LayerParams, cfg: &ViTConfig, macs: &MacCounter) -> Result<(Tensor, AttentionTrace)> {
    let n = normed.outer();
    let (d, dh) = (cfg.d, cfg.head_dim());
    let q = linear(normed, &l.wq, &l.bq, macs)?;
    let k = linear(normed, &l.wk, &l.bk, macs)?;
    let v = linear(normed, &l.wv, &l.bv, macs)?;
    let inv = 1.0 / (dh as f32).sqrt();
    let mut concat = vec![0.0f32; n * d];
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = take_cols(&q, h * dh, dh);
        let kh = take_cols(&k, h * dh, dh);
        let vh = take_cols(&v, h * dh, dh);
        let scores = scale(&matmul(&qh, &kh.transpose()?, macs)?, inv);
        let p = softmax_last_dim(&scores);
        let oh = matmul(&p, &vh, macs)?;
        put_cols(&mut concat, d, &oh, h * dh);
        probs.push(p);
    }
    let concat = Tensor::new(vec![n, d], concat)?;
    let out = linear(&concat, &l.wo, &l.bo, macs)?;
    Ok((out, AttentionTrace { q, k, v, probs, concat }))
}

/// Runs the encoder on `x0` (`n x d`). `cls_row` selects the readout row;
/// `None` averages all rows. Returns logits and, when `record`, the trace.
pub(crate) fn run(
    x0: Tensor,
    cls_row: Option<usize>,
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
    record: bool,
) -> Result<(Vec<f32>, Option<EncoderTrace>)> {
    let n = x0.outer();
    let mut x = x0;
    let mut traces = Vec::new();
    for l in &params.layers {
        let (normed1, ln1) = layer_norm_forward(&x, &l.ln1_gamma, &l.ln1_beta, LN_EPS)?;
        let (attn_out, attn) = attention(&normed1, l, cfg, macs)?;
        let x_mid = add(&x, &attn_out);
        let (normed2, ln2) = layer_norm_forward(&x_mid, &l.ln2_gamma, &l.ln2_beta, LN_EPS)?;
        let hidden_pre = linear(&normed2, &l.w1, &l.b1, macs)?;
        let hidden = gelu(&hidden_pre);
        let mlp_out = linear(&hidden, &l.w2, &l.b2, macs)?;
        let x_out = add(&x_mid, &mlp_out);
        if record {
            traces.push(LayerTrace {
                ln1,
                normed1,
                attn,
                ln2,
                normed2,
                hidden_pre,
                hidden,
            });
        }
        x = x_out;
    }
    let (normed, final_ln) = layer_norm_forward(&x, &params.norm_gamma, &params.norm_beta, LN_EPS)?;
    let readout = match cls_row {
        Some(r) => Tensor::new(vec![1, cfg.d], normed.row(r).to_vec())?,
        None => {
            let mut acc = vec![0.0f64; cfg.d];
            for r in 0..n {
                for (a, &v) in acc.iter_mut().zip(normed.row(r)) {
                    *a += v as f64;
                }
            }
            Tensor::new(vec![1, cfg.d], acc.into_iter().map(|v| (v / n as f64) as f32).collect())?
        }
    };
    let logits = linear(&readout, &params.head_w, &params.head_b, macs)?.into_data();
    let trace = record.then_some(EncoderTrace {
        layers: traces,
        final_ln,
        readout,
        cls_row,
        n,
    });
    Ok((logits, trace))
}

/// Gradients of the encoder parameters for the given upstream logit gradient.
/// Accumulates into `grads` and returns the gradient with respect to `x0`.
pub(crate) fn backward(
    trace: &EncoderTrace,
    params: &ModelParams,
    cfg: &ViTConfig,
    dlogits: &[f32],
    grads: &mut ModelParams,
) -> Result<Tensor> {
    let (n, d, dh) = (trace.n, cfg.d, cfg.head_dim());
    let dlog = Tensor::new(vec![1, cfg.k], dlogits.to_vec())?;
    let (dreadout, dhead_w) = matmul_backward(&trace.readout, &params.head_w, &dlog)?;
    accumulate(&mut grads.head_w, &dhead_w);
    accumulate(&mut grads.head_b, &bias_backward(&dlog));

    let mut dnormed = vec![0.0f32; n * d];
    match trace.cls_row {
        Some(r) => dnormed[r * d..(r + 1) * d].copy_from_slice(dreadout.data()),
        None => {
            for r in 0..n {
                for (dst, &g) in dnormed[r * d..(r + 1) * d].iter_mut().zip(dreadout.data()) {
                    *dst = g / n as f32;
                }
            }
        }
    }
    let dnormed = Tensor::new(vec![n, d], dnormed)?;
    let (mut dx, dg, db) = layer_norm_backward(&trace.final_ln, &params.norm_gamma, &dnormed)?;
    accumulate(&mut grads.norm_gamma, &dg);
    accumulate(&mut grads.norm_beta, &db);

    for ((lt, l), g) in trace
        .layers
        .iter()
        .zip(&params.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        let (dhidden, dw2) = matmul_backward(&lt.hidden, &l.w2, &dx)?;
        accumulate(&mut g.w2, &dw2);
        accumulate(&mut g.b2, &bias_backward(&dx));
        let dpre = gelu_backward(&lt.hidden_pre, &dhidden)?;
        let (dnormed2, dw1) = matmul_backward(&lt.normed2, &l.w1, &dpre)?;
        accumulate(&mut g.w1, &dw1);
        accumulate(&mut g.b1, &bias_backward(&dpre));
        let (dmid_ln, dg2, db2) = layer_norm_backward(&lt.ln2, &l.ln2_gamma, &dnormed2)?;
        accumulate(&mut g.ln2_gamma, &dg2);
        accumulate(&mut g.ln2_beta, &db2);
        let dmid = add(&dx, &dmid_ln);

        // attention branch: x_mid = x_in + out(attn(ln1(x_in)))
        let at = &lt.attn;
        let (dconcat, dwo) = matmul_backward(&at.concat, &l.wo, &dmid)?;
        accumulate(&mut g.wo, &dwo);
        accumulate(&mut g.bo, &bias_backward(&dmid));
        let inv = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0f32; n * d];
        let mut dk = vec![0.0f32; n * d];
        let mut dv = vec![0.0f32; n * d];
        for (h, p) in at.probs.iter().enumerate() {
            let doh = take_cols(&dconcat, h * dh, dh);
            let qh = take_cols(&at.q, h * dh, dh);
            let kh = take_cols(&at.k, h * dh, dh);
            let vh = take_cols(&at.v, h * dh, dh);
            let (dp, dvh) = matmul_backward(p, &vh, &doh)?;
            let dscores = scale(&softmax_backward(p, &dp)?, inv);
            // scores = qh x kh^T
            let (dqh, dkt) = matmul_backward(&qh, &kh.transpose()?, &dscores)?;
            put_cols(&mut dq, d, &dqh, h * dh);
            put_cols(&mut dk, d, &dkt.transpose()?, h * dh);
            put_cols(&mut dv, d, &dvh, h * dh);
        }
        let mut dnormed1 = Tensor::zeros(vec![n, d]);
        for (dproj, w, gw, gb) in [
            (dq, &l.wq, &mut g.wq, &mut g.bq),
            (dk, &l.wk, &mut g.wk, &mut g.bk),
            (dv, &l.wv, &mut g.wv, &mut g.bv),
        ] {
            let dproj = Tensor::new(vec![n, d], dproj)?;
            let (dinput, dw) = matmul_backward(&lt.normed1, w, &dproj)?;
            accumulate(gw, &dw);
            accumulate(gb, &bias_backward(&dproj));
            dnormed1 = add(&dnormed1, &dinput);
        }
        let (din_ln, dg1, db1) = layer_norm_backward(&lt.ln1, &l.ln1_gamma, &dnormed1)?;
        accumulate(&mut g.ln1_gamma, &dg1);
        accumulate(&mut g.ln1_beta, &db1);
        dx = add(&dmid, &din_ln);
    }
    Ok(dx)
}

pub(crate) fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

/// Loss and logit gradient for one labelled example.
pub(crate) fn loss_grad(logits: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    let (loss, grad) = cross_entropy(logits, label)?;
    if !loss.is_finite() {
        return Err(Error::Input("non-finite loss".into()));
    }
    Ok((loss, grad))
}
