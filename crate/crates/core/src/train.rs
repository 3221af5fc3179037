//! Training on randomly ablated images: SGD with momentum and weight decay,
//! early stopping on validation ablation accuracy, and a synthetic dataset
//! whose label survives any column ablation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablate, AblationKind, AblationSpec, Anchor, Image};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, MacCounter};
use crate::vit::{process_ablation, ModelParams, Tape, ViTConfig, VisionTransformer};

/// Multiply the learning rate by `factor` every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub factor: f32,
    pub period: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub schedule: Option<StepSchedule>,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Ablation width used for training.
    pub b_train: usize,
    pub kind: AblationKind,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 0.05,
            schedule: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            b_train: 3,
            kind: AblationKind::Column,
            seed: 0,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.b_train == 0 || self.patience == 0 {
            return Err(Error::param("epochs, batch, b_train and patience must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if let Some(s) = self.schedule {
            if s.period == 0 || s.factor.is_nan() || s.factor <= 0.0 {
                return Err(Error::param("schedule needs a positive factor and period"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Some(s) => self.lr * s.factor.powi((epoch / s.period) as i32),
            None => self.lr,
        }
    }

    pub fn spec(&self) -> AblationSpec {
        match self.kind {
            AblationKind::Column => AblationSpec::column(self.b_train),
            AblationKind::Block => AblationSpec::block(self.b_train),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub k: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, splits: Vec<Split>, k: usize) -> Result<Self> {
        if images.len() != labels.len() || images.len() != splits.len() {
            return Err(Error::Input(format!(
                "{} images, {} labels and {} split tags",
                images.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            return Err(Error::Input(format!(
                "label {} at index {i} is outside [0, {k})",
                labels[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            splits,
            k,
        })
    }

    /// Everything tagged `Test`.
    pub fn unsplit(images: Vec<Image>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let splits = vec![Split::Test; images.len()];
        Self::new(images, labels, splits, k)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self, which: Split) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == which).collect();
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: vec![which; idx.len()],
            k: self.k,
        }
    }
}

/// Base intensity of class `c` out of `k`: the midpoints `(c + 0.5) / k`.
pub fn stripe_color(c: usize, k: usize) -> f32 {
    (c as f32 + 0.5) / k as f32
}

/// Synthetic RGB images whose every pixel carries the label: class `c` is the
/// uniform gray `(c + 0.5) / k` plus independent uniform noise in
/// `[-noise, noise]`, clamped to `[0, 1]`.
///
/// Labels are drawn uniformly; the first 70% of images are tagged train, the
/// next 15% val, the rest test.
pub fn make_stripe_dataset(n: usize, h: usize, w: usize, k: usize, noise: f32, seed: u64) -> Result<LabeledDataset> {
    if !(2..=8).contains(&k) {
        return Err(Error::param(format!("stripe dataset needs 2 <= k <= 8, got {k}")));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::param(format!("noise {noise} must lie in [0, 0.5)")));
    }
    if h == 0 || w == 0 {
        return Err(Error::param("image size must be positive"));
    }
    const C: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..k);
        let base = stripe_color(label, k);
        let pixels = (0..h * w * C)
            .map(|_| {
                let jitter = if noise > 0.0 {
                    rng.random_range(-noise..=noise)
                } else {
                    0.0
                };
                (base + jitter).clamp(0.0, 1.0)
            })
            .collect();
        images.push(Image::new(h, w, C, pixels)?);
        labels.push(label);
    }
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let splits = (0..n)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + n_val => Split::Val,
            _ => Split::Test,
        })
        .collect();
    LabeledDataset::new(images, labels, splits, k)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub velocity: ModelParams,
}

impl Optimizer {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    /// `v <- momentum * v + g + wd * theta; theta <- theta - lr * v`
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f32, momentum: f32, wd: f32) {
        let vel = self.velocity.tensors_mut();
        let theta = params.tensors_mut();
        let g = grads.tensors();
        for (((_, v), (_, p)), (_, g)) in vel.into_iter().zip(theta).zip(g) {
            for ((v, p), &g) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

fn random_anchor(rng: &mut ChaCha8Rng, kind: AblationKind, h: usize, w: usize) -> Anchor {
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

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over the training split with a fresh random ablation per image.
/// Gradients are averaged over each mini-batch. Returns the mean loss.
pub fn train_epoch(
    model: &mut VisionTransformer,
    opt: &mut Optimizer,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f32> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.splits[i] == Split::Train).collect();
    if idx.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    check_dataset(&model.cfg, data)?;
    let (h, w) = (model.cfg.h, model.cfg.w);
    let b = cfg.b_train.min(h.min(w));
    let lr = cfg.lr_at(epoch);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order = idx;
    order.shuffle(&mut rng);

    let macs = MacCounter::new();
    let mut total = 0.0f64;
    for (batch_index, batch) in order.chunks(cfg.batch).enumerate() {
        let mut grads = model.params.zeros_like();
        let mut batch_loss = 0.0f64;
        for &i in batch {
            let z = ablate(&data.images[i], b, random_anchor(&mut rng, cfg.kind, h, w))?;
            let mut tape = Tape::new();
            let logits = tape.forward(&z, &model.params, &model.cfg, &macs)?;
            let (loss, dlogits) = cross_entropy(&logits, data.labels[i])?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    batch: batch_index,
                    loss,
                });
            }
            batch_loss += loss as f64;
            grads.add_scaled(&tape.backward(&model.params, &model.cfg, &dlogits)?, 1.0);
        }
        let scale = 1.0 / batch.len() as f32;
        for (_, t) in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(&mut model.params, &grads, lr, cfg.momentum, cfg.weight_decay);
        if !model.params.is_finite() {
            return Err(Error::Divergence {
                batch: batch_index,
                loss: (batch_loss / batch.len() as f64) as f32,
            });
        }
        total += batch_loss;
    }
    Ok((total / order.len() as f64) as f32)
}

fn check_dataset(cfg: &ViTConfig, data: &LabeledDataset) -> Result<()> {
    if data.k > cfg.k {
        return Err(Error::param(format!(
            "dataset has {} classes, model only {}",
            data.k, cfg.k
        )));
    }
    if let Some(x) = data
        .images
        .iter()
        .find(|x| x.height() != cfg.h || x.width() != cfg.w || x.channels() != cfg.c)
    {
        return Err(Error::param(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            x.height(),
            x.width(),
            x.channels(),
            cfg.h,
            cfg.w,
            cfg.c
        )));
    }
    Ok(())
}

/// Epoch with the best validation accuracy among those seen before training
/// would have stopped (`patience` epochs without improvement). Ties go to the
/// earliest epoch.
pub fn early_stopping_select(history: &[f64], patience: usize) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::Input("empty validation history".into()));
    }
    let mut best = 0;
    for (e, &acc) in history.iter().enumerate().skip(1) {
        if e - best > patience {
            break;
        }
        if acc > history[best] {
            best = e;
        }
    }
    Ok(best)
}

/// Fraction of correct single-ablation predictions over every (image,
/// ablation) pair of the stride-1 set of width `b_eval`.
pub fn ablation_accuracy(
    model: &VisionTransformer,
    images: &[Image],
    labels: &[usize],
    b_eval: usize,
    kind: AblationKind,
) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let spec = match kind {
        AblationKind::Column => AblationSpec::column(b_eval),
        AblationKind::Block => AblationSpec::block(b_eval),
    };
    let anchors = spec.anchors(model.cfg.h, model.cfg.w)?;
    let pairs: Vec<(usize, Anchor)> = (0..images.len())
        .flat_map(|i| anchors.iter().map(move |&a| (i, a)))
        .collect();
    let correct = pairs
        .par_iter()
        .map(|&(i, a)| {
            let pred = process_ablation(&ablate(&images[i], b_eval, a)?, &model.params, &model.cfg)?;
            Ok(u64::from(pred == labels[i]))
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum::<u64>();
    Ok(correct as f64 / pairs.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_ablation_acc: f64,
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: VisionTransformer,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains from `model` until `cfg.epochs` or early stopping, calling
/// `on_epoch` after every epoch, and returns the best validation checkpoint.
/// Validation falls back to the training split when no val images exist.
pub fn fit(
    mut model: VisionTransformer,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut val = data.split(Split::Val);
    if val.is_empty() {
        val = data.split(Split::Train);
    }
    let b_eval = cfg.b_train.min(model.cfg.h.min(model.cfg.w));
    let mut opt = Optimizer::new(&model.params);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        let train_loss = train_epoch(&mut model, &mut opt, data, cfg, epoch)?;
        let val_ablation_acc = ablation_accuracy(&model, &val.images, &val.labels, b_eval, cfg.kind)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_ablation_acc,
            lr: cfg.lr_at(epoch),
        };
        on_epoch(&entry);
        log.push(entry);
        let history: Vec<f64> = log.iter().map(|e| e.val_ablation_acc).collect();
        let selected = early_stopping_select(&history, cfg.patience)?;
        if best.as_ref().is_none_or(|(e, _)| *e != selected) {
            best = Some((selected, model.params.clone()));
        }
        if epoch - selected >= cfg.patience {
            break;
        }
    }
    let (best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: VisionTransformer::new(model.cfg, params)?,
        best_epoch,
        log,
    })
}
