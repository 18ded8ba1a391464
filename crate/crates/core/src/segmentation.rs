//! Segmentation network: encoder-decoder UNet whose pooled bottleneck is
//! projected to the morphology code, which in turn modulates the decoder.

use std::path::Path;

use dmcvr_nn::{Adam, Archive, Linear, ParamStore, Tape, Var};
use log::info;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayViewD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{read_manifest, CheckpointManifest};
use crate::error::{Error, Result};
use crate::unet::{image_batch, Decoder, Encoder, UnetSpec};
use crate::volume::{LabelMask, NUM_CLASSES};
use crate::Real;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegSpec {
    pub image_size: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    pub groups: usize,
    pub space_to_depth: usize,
    pub d_mor: usize,
}

impl Default for SegSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            num_res_blocks: 1,
            groups: 8,
            space_to_depth: 1,
            d_mor: 128,
        }
    }
}

impl SegSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_mor == 0 {
            return Err(Error::Parameter("d_mor must be positive".into()));
        }
        self.unet().validate()
    }

    fn unet(&self) -> UnetSpec {
        UnetSpec {
            image_size: self.image_size,
            in_channels: 1,
            out_channels: NUM_CLASSES,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            num_res_blocks: self.num_res_blocks,
            attention_resolutions: vec![],
            groups: self.groups,
            space_to_depth: self.space_to_depth,
            time_dim: 0,
            enc_cond_dim: 0,
            dec_cond_dim: self.d_mor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Validation every this many steps (one "epoch" of logging).
    pub eval_every: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
            eval_every: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub store: ParamStore<T>,
    pub spec: SegSpec,
    enc: Encoder,
    dec: Decoder,
    mor_head: Linear,
    pub trained: bool,
    pub steps_trained: u64,
    /// `(step, validation soft dice)` pairs.
    pub history: Vec<(usize, f64)>,
}

struct Forward {
    logits: Var,
    mor: Var,
}

impl<T: Real> SegModel<T> {
    pub fn new(spec: SegSpec, seed: u64) -> Result<Self> {
        let u = spec.unet();
        u.validate()?;
        if spec.d_mor == 0 {
            return Err(Error::Config("d_mor must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "seg.enc", &u, &mut rng);
        let dec = Decoder::new(&mut store, "seg.dec", &u, &enc, &mut rng);
        let mor_head = Linear::new(&mut store, "seg.mor", enc.out_channels(), spec.d_mor, &mut rng);
        Ok(Self {
            store,
            spec,
            enc,
            dec,
            mor_head,
            trained: false,
            steps_trained: 0,
            history: Vec::new(),
        })
    }

    fn check(&self, x: &ArrayView3<'_, T>) -> Result<()> {
        let (_, h, w) = x.dim();
        let s = self.spec.image_size;
        if (h, w) != (s, s) {
            return Err(Error::Contract(format!("segmenter expects {s}x{s} images, got {h}x{w}")));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Forward {
        let (h, skips) = self.enc.forward(tape, &self.store, x, None, None);
        let h = self.dec.middle(tape, &self.store, h, None, None);
        let pooled = tape.global_avg_pool(h);
        let mor = self.mor_head.forward(tape, &self.store, pooled);
        let logits = self.dec.upward(tape, &self.store, h, skips, None, Some(mor));
        Forward { logits, mor }
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State("segmentation model has not been trained or loaded".into()));
        }
        Ok(())
    }

    /// Logits `[n, 4, h, w]` and morphology codes `[n, d_mor]`; no state check.
    pub fn logits_batch(&self, x: ArrayView3<'_, T>) -> Result<(Array4<T>, Array2<T>)> {
        self.check(&x)?;
        let mut tape = Tape::new();
        let v = image_batch(&mut tape, x);
        let f = self.forward(&mut tape, v);
        Ok((
            tape.value(f.logits).clone().into_dimensionality().unwrap(),
            tape.value(f.mor).clone().into_dimensionality().unwrap(),
        ))
    }

    /// Morphology codes `[n, d_mor]`.
    pub fn encode_morphology_batch(&self, x: ArrayView3<'_, T>) -> Result<Array2<T>> {
        self.require_trained()?;
        self.check(&x)?;
        // only the encoder half is needed
        let mut tape = Tape::new();
        let v = image_batch(&mut tape, x);
        let (h, _) = self.enc.forward(&mut tape, &self.store, v, None, None);
        let h = self.dec.middle(&mut tape, &self.store, h, None, None);
        let pooled = tape.global_avg_pool(h);
        let mor = self.mor_head.forward(&mut tape, &self.store, pooled);
        Ok(tape.value(mor).clone().into_dimensionality().unwrap())
    }

    pub fn encode_morphology(&self, x: &Array2<T>) -> Result<Array1<T>> {
        Ok(self.encode_morphology_batch(x.view().insert_axis(Axis(0)))?.row(0).to_owned())
    }

    pub fn segment_batch(&self, x: ArrayView3<'_, T>) -> Result<Vec<LabelMask>> {
        self.require_trained()?;
        let (logits, _) = self.logits_batch(x)?;
        Ok(logits.outer_iter().map(|l| argmax_labels(l.view().into_dyn())).collect())
    }

    pub fn segment(&self, x: &Array2<T>) -> Result<LabelMask> {
        Ok(self.segment_batch(x.view().insert_axis(Axis(0)))?.remove(0))
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self, opt: &mut Adam<T>, x: ArrayView3<'_, T>, targets: &[&Array2<u8>]) -> Result<T> {
        self.check(&x)?;
        let mut tape = Tape::new();
        let v = image_batch(&mut tape, x);
        let f = self.forward(&mut tape, v);
        let (loss, grad) = focal_dice_loss_batch(tape.value(f.logits).view(), targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite segmentation loss at step {}", self.steps_trained)));
        }
        let grads = tape.backward(f.logits, grad);
        opt.step(&mut self.store, &grads.params());
        self.steps_trained += 1;
        Ok(loss)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let manifest = CheckpointManifest {
            kind: "segmentation".into(),
            spec: serde_json::to_value(&self.spec).expect("spec serializes"),
            schedule: None,
            step: self.steps_trained,
            seed,
            rng_word_pos: "0".into(),
            trained: self.trained,
        };
        let mut v = serde_json::to_value(manifest).unwrap();
        v["history"] = serde_json::to_value(&self.history).unwrap();
        Archive::write(path, &self.store, &v)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = read_manifest(path)?;
        if manifest.kind != "segmentation" {
            return Err(Error::Format(format!("{} is a {} checkpoint", path.display(), manifest.kind)));
        }
        let spec: SegSpec = serde_json::from_value(manifest.spec).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Self::new(spec, 0)?;
        let v = Archive::read_into(path, &mut model.store)?;
        model.trained = manifest.trained;
        model.steps_trained = manifest.step;
        model.history = serde_json::from_value(v["history"].clone()).unwrap_or_default();
        Ok(model)
    }
}

/// Argmax over the class axis of `[4, h, w]` logits; ties go to the lower
/// class index.
pub fn argmax_labels<T: Real>(logits: ArrayViewD<'_, T>) -> LabelMask {
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for c in 1..logits.shape()[0] {
            if logits[[c, i, j]] > logits[[best, i, j]] {
                best = c;
            }
        }
        best as u8
    });
    LabelMask::new(out).expect("argmax stays in class range")
}

struct LossTerms {
    focal: f64,
    dice: f64,
    grad: Vec<f64>,
}

/// Focal loss (per-pixel mean) plus one minus the mean soft dice over the
/// foreground classes, with the dice sums taken over the whole batch.
/// Returns the loss and its gradient with respect to the logits.
pub fn focal_dice_loss_batch<T: Real>(logits: ArrayViewD<'_, T>, targets: &[&Array2<u8>]) -> Result<(T, ArrayD<T>)> {
    let t = loss_terms(logits.view(), targets)?;
    let grad = ArrayD::from_shape_vec(logits.raw_dim(), t.grad.into_iter().map(T::cast).collect()).unwrap();
    Ok((T::cast(t.focal + (1.0 - t.dice)), grad))
}

fn loss_terms<T: Real>(logits: ArrayViewD<'_, T>, targets: &[&Array2<u8>]) -> Result<LossTerms> {
    let sh = logits.shape();
    if sh.len() != 4 || sh[1] != NUM_CLASSES || sh[0] != targets.len() {
        return Err(Error::Contract(format!("logits shape {sh:?} vs {} targets", targets.len())));
    }
    let (n, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    for t in targets {
        if t.dim() != (h, w) {
            return Err(Error::Contract("target shape differs from logits".into()));
        }
        if let Some(v) = t.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Contract(format!("unknown class {v} in target")));
        }
    }
    let npix = (n * h * w) as f64;
    let gamma = FOCAL_GAMMA;
    // softmax probabilities in f64
    let mut p = vec![0.0f64; n * k * h * w];
    let idx = |b: usize, c: usize, i: usize, j: usize| ((b * k + c) * h + i) * w + j;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let m = (0..k).map(|c| logits[[b, c, i, j]].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (logits[[b, c, i, j]].to_f64_lossy() - m).exp();
                    p[idx(b, c, i, j)] = e;
                    z += e;
                }
                for c in 0..k {
                    p[idx(b, c, i, j)] /= z;
                }
            }
        }
    }
    let mut focal = 0.0;
    let mut grad = vec![0.0f64; p.len()];
    // dice statistics per foreground class
    let mut inter = [0.0f64; NUM_CLASSES];
    let mut psum = [0.0f64; NUM_CLASSES];
    let mut gsum = [0.0f64; NUM_CLASSES];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let t = targets[b][[i, j]] as usize;
                let pt = p[idx(b, t, i, j)].max(1e-12);
                let q = 1.0 - pt;
                focal -= q.powf(gamma) * pt.ln();
                let a = (gamma * q.powf(gamma - 1.0) * pt * pt.ln() - q.powf(gamma)) / npix;
                for c in 0..k {
                    let delta = if c == t { 1.0 } else { 0.0 };
                    grad[idx(b, c, i, j)] = a * (delta - p[idx(b, c, i, j)]);
                }
                for c in 1..k {
                    let pc = p[idx(b, c, i, j)];
                    psum[c] += pc;
                    if c == t {
                        inter[c] += pc;
                        gsum[c] += 1.0;
                    }
                }
            }
        }
    }
    focal /= npix;
    let fg = (NUM_CLASSES - 1) as f64;
    let mut dice_mean = 0.0;
    for c in 1..k {
        dice_mean += (2.0 * inter[c] + DICE_SMOOTH) / (psum[c] + gsum[c] + DICE_SMOOTH);
    }
    dice_mean /= fg;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let t = targets[b][[i, j]] as usize;
                let mut u = [0.0f64; NUM_CLASSES];
                for (c, uc) in u.iter_mut().enumerate().skip(1) {
                    let g = if c == t { 1.0 } else { 0.0 };
                    let den = psum[c] + gsum[c] + DICE_SMOOTH;
                    *uc = -(2.0 * g * den - (2.0 * inter[c] + DICE_SMOOTH)) / (den * den) / fg;
                }
                let dot: f64 = (0..k).map(|c| u[c] * p[idx(b, c, i, j)]).sum();
                for c in 0..k {
                    grad[idx(b, c, i, j)] += p[idx(b, c, i, j)] * (u[c] - dot);
                }
            }
        }
    }
    Ok(LossTerms {
        focal,
        dice: dice_mean,
        grad,
    })
}

/// Single-image form of [`focal_dice_loss_batch`] on `[4, h, w]` logits.
pub fn focal_dice_loss<T: Real>(logits: &Array3<T>, target: &LabelMask) -> Result<T> {
    let l = logits.view().insert_axis(Axis(0)).into_dyn();
    Ok(focal_dice_loss_batch(l, &[target.as_array()])?.0)
}

/// Mean soft dice over foreground classes for a set of images.
pub fn soft_dice<T: Real>(model: &SegModel<T>, x: ArrayView3<'_, T>, targets: &[&Array2<u8>]) -> Result<f64> {
    let (logits, _) = model.logits_batch(x)?;
    Ok(loss_terms(logits.view().into_dyn(), targets)?.dice)
}

/// Trains a segmentation network on `(image, mask)` pairs.
pub fn train_segmentation<T: Real>(
    spec: SegSpec,
    images: &[Array2<T>],
    masks: &[LabelMask],
    val_images: &[Array2<T>],
    val_masks: &[LabelMask],
    cfg: &SegTrainConfig,
) -> Result<SegModel<T>> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Parameter("segmentation training needs a non-empty, paired dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Parameter("batch size and step count must be positive".into()));
    }
    let mut model = SegModel::new(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
    let mut opt = Adam::new(cfg.learning_rate);
    let s = model.spec.image_size;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let bsz = cfg.batch_size.min(images.len());
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut x = Array3::<T>::zeros((bsz, s, s));
        for (k, &i) in batch.iter().enumerate() {
            x.index_axis_mut(Axis(0), k).assign(&images[i]);
        }
        let targets: Vec<&Array2<u8>> = batch.iter().map(|&i| masks[i].as_array()).collect();
        let loss = model.train_step(&mut opt, x.view(), &targets)?;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            let vd = if val_images.is_empty() {
                f64::NAN
            } else {
                validation_dice(&model, val_images, val_masks)?
            };
            model.history.push((step, vd));
            info!("seg step {step}: loss {:.4}, val soft dice {vd:.4}", loss.to_f64_lossy());
        }
    }
    model.trained = true;
    Ok(model)
}

fn validation_dice<T: Real>(model: &SegModel<T>, images: &[Array2<T>], masks: &[LabelMask]) -> Result<f64> {
    let s = model.spec.image_size;
    let mut x = Array3::<T>::zeros((images.len(), s, s));
    for (k, im) in images.iter().enumerate() {
        x.index_axis_mut(Axis(0), k).assign(im);
    }
    let targets: Vec<&Array2<u8>> = masks.iter().map(|m| m.as_array()).collect();
    let mut total = 0.0;
    let chunk = 32;
    let mut count = 0;
    for start in (0..images.len()).step_by(chunk) {
        let end = (start + chunk).min(images.len());
        let v = soft_dice(model, x.slice(ndarray::s![start..end, .., ..]), &targets[start..end])?;
        total += v * (end - start) as f64;
        count += end - start;
    }
    Ok(total / count as f64)
}
