//! Toy-scale vision transformer that classifies image ablations.
//!
//! An ablated image is cut into `p x p` patches; each patch is flattened,
//! projected to `d` dimensions and given a learned positional vector. Patches
//! whose mask block is entirely zero are dropped before the encoder, so the
//! attention runs over only the surviving tokens (plus the class token).
//! Token identity travels with the token, so the encoder output does not
//! depend on token order.

mod encoder;
mod oracle;
mod params;

use rayon::prelude::*;

use crate::ablation::{ablate, AblatedImage, AblationSpec, Image, Mask};
use crate::certify::{aggregate_votes, smoothed_predict, BaseClassifier, VoteCounts};
use crate::error::{Error, Result};
use crate::numerics::{add_bias, matmul, MacCounter, Tensor};

pub use oracle::masked_attention_oracle_forward;
pub use params::{LayerParams, ManifestEntry, ModelParams, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenPos {
    Class,
    Grid { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub pos: TokenPos,
    pub embedding: Vec<f32>,
}

/// Positionally encoded tokens. Semantically a set: order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn grid_positions(&self) -> Vec<(usize, usize)> {
        self.tokens
            .iter()
            .filter_map(|t| match t.pos {
                TokenPos::Grid { row, col } => Some((row, col)),
                TokenPos::Class => None,
            })
            .collect()
    }

    pub fn has_class_token(&self) -> bool {
        self.tokens.iter().any(|t| t.pos == TokenPos::Class)
    }
}

/// Lowest index among the maximal logits.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn check_image(z: &AblatedImage, cfg: &ViTConfig) -> Result<()> {
    let x = &z.pixels;
    if x.height() != cfg.h || x.width() != cfg.w || x.channels() != cfg.c {
        return Err(Error::Dimension {
            op: "vit input",
            left: vec![x.height(), x.width(), x.channels()],
            right: vec![cfg.h, cfg.w, cfg.c],
        });
    }
    if z.mask.height() != cfg.h || z.mask.width() != cfg.w {
        return Err(Error::Dimension {
            op: "vit mask",
            left: vec![z.mask.height(), z.mask.width()],
            right: vec![cfg.h, cfg.w],
        });
    }
    Ok(())
}

/// Flattened `p x p x c` patch at grid cell `(row, col)`.
fn patch(x: &Image, cfg: &ViTConfig, row: usize, col: usize) -> Vec<f32> {
    let (p, c) = (cfg.p, cfg.c);
    let mut out = Vec::with_capacity(cfg.patch_dim());
    for dr in 0..p {
        let start = ((row * p + dr) * cfg.w + col * p) * c;
        out.extend_from_slice(&x.pixels()[start..start + p * c]);
    }
    out
}

/// True when the mask block under grid cell `(row, col)` has a retained pixel.
pub fn block_survives(mask: &Mask, cfg: &ViTConfig, row: usize, col: usize) -> bool {
    mask.any_in(row * cfg.p, col * cfg.p, cfg.p, cfg.p)
}

/// Grid cells (row-major) whose patches are embedded.
fn embed_cells(
    x: &Image,
    cells: &[(usize, usize)],
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
) -> Result<Option<(Tensor, Tensor)>> {
    if cells.is_empty() {
        return Ok(None);
    }
    let rows: Vec<Vec<f32>> = cells.iter().map(|&(r, c)| patch(x, cfg, r, c)).collect();
    let patches = Tensor::from_rows(&rows)?;
    let mut emb = add_bias(&matmul(&patches, &params.patch_w, macs)?, &params.patch_b)?.into_data();
    let d = cfg.d;
    for (t, &(r, c)) in cells.iter().enumerate() {
        let pos = params.pos.row(r * cfg.grid_cols() + c);
        for (e, &pv) in emb[t * d..(t + 1) * d].iter_mut().zip(pos) {
            *e += pv;
        }
    }
    Ok(Some((patches, Tensor::new(vec![cells.len(), d], emb)?)))
}

fn class_embedding(params: &ModelParams) -> Vec<f32> {
    params
        .cls
        .data()
        .iter()
        .zip(params.cls_pos.data())
        .map(|(a, b)| a + b)
        .collect()
}

/// Encodes every grid patch of `z` (already masked) plus the class token if configured.
pub fn tokenize(z: &AblatedImage, params: &ModelParams, cfg: &ViTConfig, macs: &MacCounter) -> Result<TokenSet> {
    check_image(z, cfg)?;
    let cells: Vec<(usize, usize)> = (0..cfg.grid_rows())
        .flat_map(|r| (0..cfg.grid_cols()).map(move |c| (r, c)))
        .collect();
    let (_, emb) = embed_cells(&z.pixels, &cells, params, cfg, macs)?.expect("grid is nonempty");
    let mut tokens = Vec::with_capacity(cells.len() + 1);
    if cfg.use_class_token {
        tokens.push(Token {
            pos: TokenPos::Class,
            embedding: class_embedding(params),
        });
    }
    for (i, &(row, col)) in cells.iter().enumerate() {
        tokens.push(Token {
            pos: TokenPos::Grid { row, col },
            embedding: emb.row(i).to_vec(),
        });
    }
    Ok(TokenSet { tokens })
}

/// Keeps the class token and every grid token whose mask block is not all zero.
pub fn drop_masked_tokens(tokens: &TokenSet, mask: &Mask, cfg: &ViTConfig) -> Result<TokenSet> {
    if mask.height() != cfg.h || mask.width() != cfg.w {
        return Err(Error::Dimension {
            op: "drop_masked_tokens",
            left: vec![mask.height(), mask.width()],
            right: vec![cfg.h, cfg.w],
        });
    }
    let tokens = tokens
        .tokens
        .iter()
        .filter(|t| match t.pos {
            TokenPos::Class => true,
            TokenPos::Grid { row, col } => block_survives(mask, cfg, row, col),
        })
        .cloned()
        .collect();
    Ok(TokenSet { tokens })
}

fn stack(tokens: &TokenSet, cfg: &ViTConfig) -> Result<(Tensor, Option<usize>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let rows: Vec<&[f32]> = tokens.tokens.iter().map(|t| t.embedding.as_slice()).collect();
    let x0 = Tensor::from_rows(&rows)?;
    if x0.last_dim() != cfg.d {
        return Err(Error::Dimension {
            op: "encoder input",
            left: x0.shape().to_vec(),
            right: vec![cfg.d],
        });
    }
    let cls_row = if cfg.use_class_token {
        Some(
            tokens
                .tokens
                .iter()
                .position(|t| t.pos == TokenPos::Class)
                .ok_or_else(|| Error::Input("class-token readout but no class token in the set".into()))?,
        )
    } else {
        None
    };
    Ok((x0, cls_row))
}

/// Logits for exactly the tokens present.
pub fn encoder_forward(
    tokens: &TokenSet,
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
) -> Result<Vec<f32>> {
    let (x0, cls_row) = stack(tokens, cfg)?;
    encoder::run(x0, cls_row, params, cfg, macs, false).map(|(l, _)| l)
}

/// Saved forward state for one ablation, consumed by [`Tape::backward`].
struct Recorded {
    patches: Option<Tensor>,
    cells: Vec<(usize, usize)>,
    cls_row: Option<usize>,
    trace: encoder::EncoderTrace,
}

/// Records one forward pass (with token dropping) so gradients can be taken.
#[derive(Default)]
pub struct Tape {
    recorded: Option<Recorded>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tokenizes only the surviving patches, runs the encoder and keeps the trace.
    pub fn forward(
        &mut self,
        z: &AblatedImage,
        params: &ModelParams,
        cfg: &ViTConfig,
        macs: &MacCounter,
    ) -> Result<Vec<f32>> {
        check_image(z, cfg)?;
        let cells: Vec<(usize, usize)> = (0..cfg.grid_rows())
            .flat_map(|r| (0..cfg.grid_cols()).map(move |c| (r, c)))
            .filter(|&(r, c)| block_survives(&z.mask, cfg, r, c))
            .collect();
        let embedded = embed_cells(&z.pixels, &cells, params, cfg, macs)?;
        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(cells.len() + 1);
        let cls_row = cfg.use_class_token.then(|| {
            rows.push(class_embedding(params));
            0
        });
        let patches = embedded.map(|(patches, emb)| {
            rows.extend((0..emb.outer()).map(|i| emb.row(i).to_vec()));
            patches
        });
        if rows.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let x0 = Tensor::from_rows(&rows)?;
        let (logits, trace) = encoder::run(x0, cls_row, params, cfg, macs, true)?;
        self.recorded = Some(Recorded {
            patches,
            cells,
            cls_row,
            trace: trace.expect("recorded"),
        });
        Ok(logits)
    }

    /// Parameter gradients for the upstream logit gradient of the last forward pass.
    pub fn backward(&self, params: &ModelParams, cfg: &ViTConfig, dlogits: &[f32]) -> Result<ModelParams> {
        let rec = self
            .recorded
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called before any forward pass".into()))?;
        if dlogits.len() != cfg.k {
            return Err(Error::Dimension {
                op: "backward",
                left: vec![dlogits.len()],
                right: vec![cfg.k],
            });
        }
        let mut grads = params.zeros_like();
        let dx0 = encoder::backward(&rec.trace, params, cfg, dlogits, &mut grads)?;
        let d = cfg.d;
        if let Some(r) = rec.cls_row {
            encoder::accumulate(&mut grads.cls, &Tensor::new(vec![d], dx0.row(r).to_vec())?);
            encoder::accumulate(&mut grads.cls_pos, &Tensor::new(vec![d], dx0.row(r).to_vec())?);
        }
        if let Some(patches) = &rec.patches {
            let skip = rec.cls_row.map_or(0, |_| 1);
            let rows: Vec<&[f32]> = (0..rec.cells.len()).map(|i| dx0.row(skip + i)).collect();
            let demb = Tensor::from_rows(&rows)?;
            let scratch = MacCounter::new();
            let dw = matmul(&patches.transpose()?, &demb, &scratch)?;
            encoder::accumulate(&mut grads.patch_w, &dw);
            encoder::accumulate(&mut grads.patch_b, &crate::numerics::bias_backward(&demb));
            let gc = cfg.grid_cols();
            let pos = grads.pos.data_mut();
            for (i, &(r, c)) in rec.cells.iter().enumerate() {
                let at = (r * gc + c) * d;
                for (dst, &g) in pos[at..at + d].iter_mut().zip(demb.row(i)) {
                    *dst += g;
                }
            }
        }
        Ok(grads)
    }
}

/// Cross-entropy loss, logits and parameter gradients for one labelled ablation.
pub fn loss_and_gradients(
    z: &AblatedImage,
    label: usize,
    params: &ModelParams,
    cfg: &ViTConfig,
) -> Result<(f32, Vec<f32>, ModelParams)> {
    let mut tape = Tape::new();
    let logits = tape.forward(z, params, cfg, &MacCounter::new())?;
    let (loss, dlogits) = encoder::loss_grad(&logits, label)?;
    let grads = tape.backward(params, cfg, &dlogits)?;
    Ok((loss, logits, grads))
}

/// Logits of one ablation with fully masked tokens dropped.
pub fn process_ablation_logits(
    z: &AblatedImage,
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
) -> Result<Vec<f32>> {
    let tokens = tokenize_retained(z, params, cfg, macs)?;
    encoder_forward(&tokens, params, cfg, macs)
}

/// Tokenizes only patches whose mask block survives; same result as
/// [`tokenize`] followed by [`drop_masked_tokens`] without embedding the
/// dropped patches.
pub fn tokenize_retained(
    z: &AblatedImage,
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
) -> Result<TokenSet> {
    check_image(z, cfg)?;
    let cells: Vec<(usize, usize)> = (0..cfg.grid_rows())
        .flat_map(|r| (0..cfg.grid_cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| block_survives(&z.mask, cfg, r, c))
        .collect();
    let mut tokens = Vec::with_capacity(cells.len() + 1);
    if cfg.use_class_token {
        tokens.push(Token {
            pos: TokenPos::Class,
            embedding: class_embedding(params),
        });
    }
    if let Some((_, emb)) = embed_cells(&z.pixels, &cells, params, cfg, macs)? {
        for (i, &(row, col)) in cells.iter().enumerate() {
            tokens.push(Token {
                pos: TokenPos::Grid { row, col },
                embedding: emb.row(i).to_vec(),
            });
        }
    }
    Ok(TokenSet { tokens })
}

pub fn process_ablation(z: &AblatedImage, params: &ModelParams, cfg: &ViTConfig) -> Result<usize> {
    process_ablation_logits(z, params, cfg, &MacCounter::new()).map(|l| argmax(&l))
}

/// Logits on the full token grid (no dropping), the baseline for timing.
pub fn full_token_logits(
    z: &AblatedImage,
    params: &ModelParams,
    cfg: &ViTConfig,
    macs: &MacCounter,
) -> Result<Vec<f32>> {
    encoder_forward(&tokenize(z, params, cfg, macs)?, params, cfg, macs)
}

/// Classifies every ablation in the set and takes the majority vote.
pub fn smoothed_vit_forward(
    x: &Image,
    spec: &AblationSpec,
    params: &ModelParams,
    cfg: &ViTConfig,
) -> Result<(usize, VoteCounts)> {
    let anchors = spec.anchors(x.height(), x.width())?;
    let preds: Vec<usize> = anchors
        .par_iter()
        .map(|&a| process_ablation(&ablate(x, spec.b, a)?, params, cfg))
        .collect::<Result<_>>()?;
    let votes = aggregate_votes(&preds, cfg.k)?;
    Ok((smoothed_predict(&votes)?, votes))
}

/// A configured model usable as the base classifier of the smoothed classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer {
    pub cfg: ViTConfig,
    pub params: ModelParams,
}

impl VisionTransformer {
    pub fn new(cfg: ViTConfig, params: ModelParams) -> Result<Self> {
        params.check_config(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ViTConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ModelParams::init(&cfg, seed)?,
            cfg,
        })
    }
}

impl BaseClassifier for VisionTransformer {
    fn classes(&self) -> usize {
        self.cfg.k
    }

    fn classify(&self, ablation: &AblatedImage) -> Result<usize> {
        process_ablation(ablation, &self.params, &self.cfg)
    }
}
