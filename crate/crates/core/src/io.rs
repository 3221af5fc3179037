//! On-disk formats: model checkpoints, IDX tensors, the CIFAR-10 binary
//! batches, and binary PPM/PGM dumps of ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::{AblatedImage, Image, Mask};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::train::LabeledDataset;
use crate::vit::{ManifestEntry, ModelParams, ViTConfig, VisionTransformer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ViTConfig,
    manifest: Vec<ManifestEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// `"SVIT"`, version (u32 LE), header length (u32 LE), JSON header with the
/// config and the tensor manifest, then every tensor as f32 LE in manifest
/// order.
pub fn checkpoint_to_bytes(model: &VisionTransformer) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.cfg,
        manifest: model.params.manifest(),
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::param("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * model.params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<VisionTransformer> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32_le("header length")? as usize;
    let header_at = r.pos as u64;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
    let mut params = ModelParams::zeros(&header.config)?;
    if params.manifest() != header.manifest {
        return Err(Error::format(
            header_at,
            "manifest does not match the stored configuration",
        ));
    }
    for (_, t) in params.tensors_mut() {
        let raw = r.take(4 * t.len(), "tensor data")?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    VisionTransformer::new(header.config, params)
}

pub fn save_checkpoint(path: &Path, model: &VisionTransformer) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VisionTransformer> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// An IDX tensor with its stored element type.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxTensor {
    U8 { shape: Vec<usize>, data: Vec<u8> },
    F32 { shape: Vec<usize>, data: Vec<f32> },
}

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

impl IdxTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            IdxTensor::U8 { shape, .. } | IdxTensor::F32 { shape, .. } => shape,
        }
    }

    /// Values as f32; unsigned bytes are scaled to `[0, 1]`.
    pub fn to_scaled(&self) -> Vec<f32> {
        match self {
            IdxTensor::U8 { data, .. } => data.iter().map(|&b| b as f32 / 255.0).collect(),
            IdxTensor::F32 { data, .. } => data.clone(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape().to_vec(), self.to_scaled())
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::format(0, "bad IDX magic: first two bytes must be zero"));
    }
    let (code, ndim) = (magic[2], magic[3] as usize);
    let width = match code {
        IDX_U8 => 1,
        IDX_F32 => 4,
        other => return Err(Error::format(2, format!("unsupported IDX type code {other:#04x}"))),
    };
    let shape = (0..ndim)
        .map(|_| r.u32_be("dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(4, "dimension product overflows"))?;
    let payload = &bytes[r.pos..];
    if count.checked_mul(width) != Some(payload.len()) {
        return Err(Error::format(
            r.pos as u64,
            format!(
                "declared dimensions {shape:?} hold {count} elements ({} bytes) but the payload has {} bytes",
                count.saturating_mul(width),
                payload.len()
            ),
        ));
    }
    Ok(match code {
        IDX_U8 => IdxTensor::U8 {
            shape,
            data: payload.to_vec(),
        },
        _ => IdxTensor::F32 {
            shape,
            data: payload
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        },
    })
}

pub fn idx_to_bytes(t: &IdxTensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::param("IDX supports at most 255 dimensions"))?;
    let code = match t {
        IdxTensor::U8 { .. } => IDX_U8,
        IdxTensor::F32 { .. } => IDX_F32,
    };
    let mut out = vec![0, 0, code, ndim];
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::param(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    let count: usize = shape.iter().product();
    match t {
        IdxTensor::U8 { data, .. } => {
            if data.len() != count {
                return Err(Error::param(format!(
                    "shape {shape:?} needs {count} values, got {}",
                    data.len()
                )));
            }
            out.extend_from_slice(data);
        }
        IdxTensor::F32 { data, .. } => {
            if data.len() != count {
                return Err(Error::param(format!(
                    "shape {shape:?} needs {count} values, got {}",
                    data.len()
                )));
            }
            data.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
        }
    }
    Ok(out)
}

pub fn load_idx_tensor(path: &Path) -> Result<IdxTensor> {
    parse_idx(&std::fs::read(path)?)
}

pub fn save_idx_tensor(path: &Path, t: &IdxTensor) -> Result<()> {
    std::fs::write(path, idx_to_bytes(t)?)?;
    Ok(())
}

/// Images from an `n x h x w` or `n x h x w x c` IDX tensor plus an `n`-long
/// label tensor. Every image is tagged `Test`.
pub fn idx_dataset(images: &IdxTensor, labels: &IdxTensor, k: usize) -> Result<LabeledDataset> {
    let shape = images.shape();
    let (n, h, w, c) = match *shape {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => {
            return Err(Error::Input(format!(
                "image tensor must have 3 or 4 dimensions, got {shape:?}"
            )))
        }
    };
    if labels.shape() != [n] {
        return Err(Error::Input(format!(
            "label tensor shape {:?} does not match {n} images",
            labels.shape()
        )));
    }
    let values = images.to_scaled();
    let per = h * w * c;
    let images = (0..n)
        .map(|i| Image::new(h, w, c, values[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        IdxTensor::U8 { data, .. } => data.iter().map(|&l| l as usize).collect(),
        IdxTensor::F32 { data, .. } => data.iter().map(|&l| l as usize).collect(),
    };
    LabeledDataset::unsplit(images, labels, k)
}

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batch: per record one label byte (0-9) then the red,
/// green and blue 32x32 planes, row-major, scaled by 1/255.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    let full = bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD;
    if full != bytes.len() {
        return Err(Error::format(
            full as u64,
            format!(
                "truncated record: {} bytes is not a multiple of {CIFAR10_RECORD}",
                bytes.len()
            ),
        ));
    }
    let plane = 32 * 32;
    let mut images = Vec::with_capacity(full / CIFAR10_RECORD);
    let mut labels = Vec::with_capacity(full / CIFAR10_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::format(
                (i * CIFAR10_RECORD) as u64,
                format!("label byte {label} exceeds 9"),
            ));
        }
        let px = &rec[1..];
        let mut pixels = Vec::with_capacity(3 * plane);
        for at in 0..plane {
            for ch in 0..3 {
                pixels.push(px[ch * plane + at] as f32 / 255.0);
            }
        }
        images.push(Image::new(32, 32, 3, pixels)?);
        labels.push(label as usize);
    }
    LabeledDataset::unsplit(images, labels, 10)
}

pub fn load_cifar10_binary(path: &Path) -> Result<LabeledDataset> {
    parse_cifar10(&std::fs::read(path)?)
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) of the pixels; gray images are replicated to RGB.
pub fn ppm_bytes(x: &Image) -> Vec<u8> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in x.pixels() {
        let b = to_byte(v);
        if c == 1 {
            out.extend_from_slice(&[b, b, b]);
        } else {
            out.push(b);
        }
    }
    out
}

/// Binary PGM (P5) of the mask: 255 retained, 0 masked.
pub fn pgm_bytes(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// A parsed binary PNM: magic (`P5` or `P6`), size and raw samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PNM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let magic = fields[0].clone();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(Error::format(0, format!("unsupported PNM magic {magic:?}"))),
    };
    let num = |i: usize| {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::format(0, format!("bad PNM header field {:?}", fields[i])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            0,
            format!("only 8-bit PNM is supported, maxval {maxval}"),
        ));
    }
    let need = width * height * channels;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != need {
        return Err(Error::format(
            pos as u64,
            format!("expected {need} sample bytes, found {}", data.len()),
        ));
    }
    Ok(Pnm {
        magic,
        width,
        height,
        maxval: maxval as u16,
        data: data.to_vec(),
    })
}

/// Writes `abl_<index>.ppm` and `mask_<index>.pgm` into `dir`.
pub fn write_ablation_dump(dir: &Path, index: usize, z: &AblatedImage) -> Result<()> {
    std::fs::write(dir.join(format!("abl_{index}.ppm")), ppm_bytes(&z.pixels))?;
    std::fs::write(dir.join(format!("mask_{index}.pgm")), pgm_bytes(&z.mask))?;
    Ok(())
}
