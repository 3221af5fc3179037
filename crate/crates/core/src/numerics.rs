//! Dense f32 tensor math with hand-written reverse-mode gradients.
//!
//! Everything here is a pure function of its inputs. Reductions may accumulate
//! in f64, but storage and elementwise compute stay in f32. Matrix products use
//! a fixed summation order (ascending inner index), so results are
//! reproducible bit-for-bit across runs and thread counts.
//!
//! [`MacCounter`] is the only shared state: every counted [`matmul`] adds
//! exactly `m * k * n` to it. Counters are atomic and owned by the caller, so
//! parallel workers can either share one or keep one each and sum at the end.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::param(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Stacks equal-length rows into a `rows.len() x width` matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::param("cannot build a matrix from zero rows"))?;
        let width = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![width],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of slices along the last dimension.
    pub fn outer(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.shape.clone())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Multiply-accumulate counter consumed by the cost model.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, macs: u64) {
        self.0.fetch_add(macs, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// `c = a x b` for 2-D tensors, adding `m * k * n` to `macs`.
pub fn matmul(a: &Tensor, b: &Tensor, macs: &MacCounter) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    macs.add((m * k * n) as u64);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a x b` with respect to both operands. Not counted.
pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let scratch = MacCounter::new();
    let da = matmul(upstream, &b.transpose()?, &scratch)?;
    let db = matmul(&a.transpose()?, upstream, &scratch)?;
    Ok((da, db))
}

/// Adds `bias` to every slice along the last dimension.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if bias.len() != d {
        return Err(Error::Dimension {
            op: "add_bias",
            left: x.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    let mut out = x.data.clone();
    for chunk in out.chunks_mut(d) {
        for (v, b) in chunk.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Bias gradient: upstream summed over all leading dimensions.
pub fn bias_backward(upstream: &Tensor) -> Tensor {
    let d = upstream.last_dim();
    let mut acc = vec![0.0f64; d];
    for chunk in upstream.data.chunks(d) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v as f64;
        }
    }
    Tensor {
        shape: vec![d],
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}

pub fn softmax_slice(slice: &[f32]) -> Vec<f32> {
    let max = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = slice.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().map(|&v| v as f64).sum();
    exps.into_iter().map(|e| (e as f64 / sum) as f32).collect()
}

pub fn softmax_last_dim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(x.len());
    for chunk in x.data.chunks(d) {
        data.extend(softmax_slice(chunk));
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Given the softmax output `y` and upstream `dy`, returns `dx = y * (dy - <dy, y>)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape != dy.shape {
        return Err(Error::Dimension {
            op: "softmax_backward",
            left: y.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let d = y.last_dim();
    let mut out = Vec::with_capacity(y.len());
    for (ys, gs) in y.data.chunks(d).zip(dy.data.chunks(d)) {
        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a as f64 * b as f64).sum();
        out.extend(
            ys.iter()
                .zip(gs)
                .map(|(&yv, &gv)| (yv as f64 * (gv as f64 - dot)) as f32),
        );
    }
    Tensor::new(y.shape.clone(), out)
}

/// Saved state from [`layer_norm_forward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::param("layer_norm eps must be positive"));
    }
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.outer());
    for chunk in x.data.chunks(d) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = chunk
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(is as f32);
        for (j, &v) in chunk.iter().enumerate() {
            let h = ((v as f64 - mean) * is) as f32;
            xhat.push(h);
            out.push(h * gamma.data[j] + beta.data[j]);
        }
    }
    let y = Tensor::new(x.shape.clone(), out)?;
    let xhat = Tensor::new(x.shape.clone(), xhat)?;
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = gamma.len();
    if dy.shape != cache.xhat.shape {
        return Err(Error::Dimension {
            op: "layer_norm_backward",
            left: cache.xhat.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    let mut dx = Vec::with_capacity(dy.len());
    for ((hs, gs), &is) in cache.xhat.data.chunks(d).zip(dy.data.chunks(d)).zip(&cache.inv_std) {
        let mut sum_g = 0.0f64;
        let mut sum_gh = 0.0f64;
        for j in 0..d {
            let g = gs[j] as f64 * gamma.data[j] as f64;
            sum_g += g;
            sum_gh += g * hs[j] as f64;
            dgamma[j] += gs[j] as f64 * hs[j] as f64;
            dbeta[j] += gs[j] as f64;
        }
        let n = d as f64;
        for j in 0..d {
            let g = gs[j] as f64 * gamma.data[j] as f64;
            let v = is as f64 / n * (n * g - sum_g - hs[j] as f64 * sum_gh);
            dx.push(v as f32);
        }
    }
    Ok((
        Tensor::new(dy.shape.clone(), dx)?,
        Tensor::new(vec![d], dgamma.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![d], dbeta.into_iter().map(|v| v as f32).collect())?,
    ))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())) as f32
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// `dx = dy * gelu'(x)` where `x` is the forward input.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape != dy.shape {
        return Err(Error::Dimension {
            op: "gelu_backward",
            left: x.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&xv, &g)| g * gelu_grad_scalar(xv))
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Softmax cross-entropy for one example. Returns the loss and `softmax(logits) - onehot`.
pub fn cross_entropy(logits: &[f32], target: usize) -> Result<(f32, Vec<f32>)> {
    if target >= logits.len() {
        return Err(Error::Input(format!(
            "target class {target} outside {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = (lse - logits[target] as f64) as f32;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v as f64 - lse).exp();
            (p - if i == target { 1.0 } else { 0.0 }) as f32
        })
        .collect();
    Ok((loss, grad))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// [`finite_difference_gradient`] on a tensor, evaluating `f` on a 64-bit copy.
pub fn finite_difference_tensor<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&[f64]) -> f64,
{
    let wide: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let g = finite_difference_gradient(f, &wide, h);
    Tensor {
        shape: x.shape.clone(),
        data: g.into_iter().map(|v| v as f32).collect(),
    }
}
