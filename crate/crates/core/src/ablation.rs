//! Column and block image ablations.
//!
//! An ablation keeps a `b`-wide column (or a `b x b` block) of the image and
//! zeroes every other pixel in all channels. Retained regions wrap around the
//! image edges. Masking happens in `[0, 1]` pixel space, before any model-side
//! processing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `h x w x c` image, channel-interleaved (`(row * w + col) * c + channel`),
/// with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::param(format!("image size {h}x{w} must be positive")));
        }
        if c != 1 && c != 3 {
            return Err(Error::param(format!("channel count {c} must be 1 or 3")));
        }
        if pixels.len() != h * w * c {
            return Err(Error::Dimension {
                op: "image",
                left: vec![h, w, c],
                right: vec![pixels.len()],
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, c, pixels })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.w + col) * self.c + ch]
    }
}

/// `h x w` binary mask; `true` marks a retained pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![h, w],
                right: vec![bits.len()],
            });
        }
        Ok(Self { h, w, bits })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when any pixel of the `rows x cols` rectangle at `(top, left)` is retained.
    /// The rectangle must lie inside the mask.
    pub fn any_in(&self, top: usize, left: usize, rows: usize, cols: usize) -> bool {
        (top..top + rows).any(|r| {
            self.bits[r * self.w + left..r * self.w + left + cols]
                .iter()
                .any(|&b| b)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblatedImage {
    pub pixels: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    Column,
    Block,
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationKind::Column => "column",
            AblationKind::Block => "block",
        })
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(AblationKind::Column),
            "block" => Ok(AblationKind::Block),
            other => Err(Error::param(format!("unknown ablation kind {other:?}"))),
        }
    }
}

/// An ablation family: kind, retained size `b`, stride and grid offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub b: usize,
    pub stride: usize,
    #[serde(default)]
    pub offset: usize,
}

impl AblationSpec {
    pub fn column(b: usize) -> Self {
        Self {
            kind: AblationKind::Column,
            b,
            stride: 1,
            offset: 0,
        }
    }

    pub fn block(b: usize) -> Self {
        Self {
            kind: AblationKind::Block,
            b,
            stride: 1,
            offset: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let limit = match self.kind {
            AblationKind::Column => w,
            AblationKind::Block => h.min(w),
        };
        if self.b == 0 || self.b > limit {
            return Err(Error::param(format!(
                "{} ablation size b={} must be in [1, {limit}]",
                self.kind, self.b
            )));
        }
        if self.stride == 0 || self.stride > w {
            return Err(Error::param(format!("stride {} must be in [1, {w}]", self.stride)));
        }
        if self.offset >= self.stride {
            return Err(Error::param(format!(
                "offset {} must be below the stride {}",
                self.offset, self.stride
            )));
        }
        if self.kind == AblationKind::Block && self.offset >= h {
            return Err(Error::param(format!(
                "offset {} must be below the height {h}",
                self.offset
            )));
        }
        Ok(())
    }

    /// Number of ablations in the set for an `h x w` image.
    pub fn set_size(&self, h: usize, w: usize) -> usize {
        let along = |len: usize| (len - self.offset).div_ceil(self.stride);
        match self.kind {
            AblationKind::Column => along(w),
            AblationKind::Block => along(h) * along(w),
        }
    }

    /// Anchors of the strided grid, ascending (row-major for blocks).
    pub fn anchors(&self, h: usize, w: usize) -> Result<Vec<Anchor>> {
        self.validate(h, w)?;
        let cols = (self.offset..w).step_by(self.stride);
        Ok(match self.kind {
            AblationKind::Column => cols.map(|start| Anchor::Column { start }).collect(),
            AblationKind::Block => (self.offset..h)
                .step_by(self.stride)
                .flat_map(|top| {
                    (self.offset..w)
                        .step_by(self.stride)
                        .map(move |left| Anchor::Block { top, left })
                })
                .collect(),
        })
    }
}

/// Where a single ablation sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Anchor {
    Column { start: usize },
    Block { top: usize, left: usize },
}

/// Retained mask for one ablation of size `b` at `anchor`, wrapping in both axes.
pub fn ablation_mask(h: usize, w: usize, b: usize, anchor: Anchor) -> Result<Mask> {
    let mut bits = vec![false; h * w];
    match anchor {
        Anchor::Column { start } => {
            if start >= w {
                return Err(Error::param(format!("column start {start} outside width {w}")));
            }
            if b == 0 || b > w {
                return Err(Error::param(format!("column width b={b} must be in [1, {w}]")));
            }
            for row in 0..h {
                for k in 0..b {
                    bits[row * w + (start + k) % w] = true;
                }
            }
        }
        Anchor::Block { top, left } => {
            if top >= h || left >= w {
                return Err(Error::param(format!("block anchor ({top}, {left}) outside {h}x{w}")));
            }
            if b == 0 || b > h.min(w) {
                return Err(Error::param(format!("block side b={b} must be in [1, {}]", h.min(w))));
            }
            for dr in 0..b {
                let row = (top + dr) % h;
                for dc in 0..b {
                    bits[row * w + (left + dc) % w] = true;
                }
            }
        }
    }
    Mask::new(h, w, bits)
}

/// Zeroes every channel of `x` wherever `mask` is 0.
pub fn apply_mask(x: &Image, mask: &Mask) -> Result<AblatedImage> {
    if mask.h != x.h || mask.w != x.w {
        return Err(Error::Dimension {
            op: "apply_mask",
            left: vec![x.h, x.w],
            right: vec![mask.h, mask.w],
        });
    }
    let c = x.c;
    let mut pixels = x.pixels.clone();
    for (idx, &keep) in mask.bits.iter().enumerate() {
        if !keep {
            pixels[idx * c..(idx + 1) * c].fill(0.0);
        }
    }
    Ok(AblatedImage {
        pixels: Image {
            h: x.h,
            w: x.w,
            c: x.c,
            pixels,
        },
        mask: mask.clone(),
    })
}

pub fn ablate(x: &Image, b: usize, anchor: Anchor) -> Result<AblatedImage> {
    let mask = ablation_mask(x.h, x.w, b, anchor)?;
    apply_mask(x, &mask)
}

pub fn column_ablation(x: &Image, start: usize, b: usize) -> Result<AblatedImage> {
    ablate(x, b, Anchor::Column { start })
}

pub fn block_ablation(x: &Image, top: usize, left: usize, b: usize) -> Result<AblatedImage> {
    ablate(x, b, Anchor::Block { top, left })
}

pub fn ablation_set(x: &Image, spec: &AblationSpec) -> Result<Vec<AblatedImage>> {
    spec.anchors(x.h, x.w)?
        .into_iter()
        .map(|a| ablate(x, spec.b, a))
        .collect()
}
