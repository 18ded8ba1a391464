//! Conditional noise predictor with its jointly trained semantic encoder.

use std::path::Path;

use dmcvr_nn::{Adam, Archive, GroupNorm, Linear, ParamStore, Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis, IxDyn};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Conditioning, NoisePredictor, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::unet::{image_batch, vector_batch, Decoder, Encoder, TimeMlp, UnetSpec};
use crate::Real;

/// Only supported injection mode: per-block scale and shift from the
/// concatenated conditioning vector.
pub const SCALE_SHIFT: &str = "scale-shift";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalUnetSpec {
    pub image_size: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    #[serde(default)]
    pub attention_resolutions: Vec<usize>,
    pub groups: usize,
    pub space_to_depth: usize,
    pub time_dim: usize,
    pub d_sem: usize,
    pub d_mor: usize,
    /// `false` gives the semantic-only ablation.
    pub use_morphology: bool,
    pub injection: String,
}

impl Default for ConditionalUnetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_width: 64,
            channel_mults: vec![1, 2, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![],
            groups: 8,
            space_to_depth: 1,
            time_dim: 128,
            d_sem: 128,
            d_mor: 128,
            use_morphology: true,
            injection: SCALE_SHIFT.into(),
        }
    }
}

impl ConditionalUnetSpec {
    pub fn cond_dim(&self) -> usize {
        self.d_sem + if self.use_morphology { self.d_mor } else { 0 }
    }

    fn unet(&self) -> UnetSpec {
        UnetSpec {
            image_size: self.image_size,
            in_channels: 1,
            out_channels: 1,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            num_res_blocks: self.num_res_blocks,
            attention_resolutions: self.attention_resolutions.clone(),
            groups: self.groups,
            space_to_depth: self.space_to_depth,
            time_dim: self.time_dim,
            enc_cond_dim: self.cond_dim(),
            dec_cond_dim: self.cond_dim(),
        }
    }

    fn semantic(&self) -> UnetSpec {
        UnetSpec {
            time_dim: 0,
            enc_cond_dim: 0,
            dec_cond_dim: 0,
            ..self.unet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.injection != SCALE_SHIFT {
            return Err(Error::Config(format!("unknown injection mode `{}`", self.injection)));
        }
        if self.d_sem == 0 || (self.use_morphology && self.d_mor == 0) || self.time_dim % 2 != 0 {
            return Err(Error::Config("code and time dimensions must be positive (time even)".into()));
        }
        self.unet().validate()
    }
}

/// First half of a UNet followed by pooling and a projection.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    enc: Encoder,
    norm: GroupNorm,
    head: Linear,
}

impl SemanticEncoder {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, spec: &ConditionalUnetSpec, rng: &mut R) -> Self {
        let s = spec.semantic();
        let enc = Encoder::new(store, "sem", &s, rng);
        let c = enc.out_channels();
        Self {
            norm: GroupNorm::new(store, "sem.norm", c, s.groups),
            head: Linear::new(store, "sem.head", c, spec.d_sem, rng),
            enc,
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (h, _) = self.enc.forward(tape, store, x, None, None);
        let h = self.norm.forward(tape, store, h);
        let h = tape.silu(h);
        let p = tape.global_avg_pool(h);
        self.head.forward(tape, store, p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub spec: serde_json::Value,
    pub schedule: Option<ScheduleConfig>,
    pub step: u64,
    pub seed: u64,
    /// ChaCha8 word position of the training stream, decimal.
    pub rng_word_pos: String,
    pub trained: bool,
}

#[derive(Clone, Debug)]
pub struct DiffusionModel<T> {
    pub store: ParamStore<T>,
    pub spec: ConditionalUnetSpec,
    pub schedule: NoiseSchedule<T>,
    time: TimeMlp,
    enc: Encoder,
    dec: Decoder,
    sem: SemanticEncoder,
    pub steps_trained: u64,
}

impl<T: Real> DiffusionModel<T> {
    pub fn new(spec: ConditionalUnetSpec, schedule: NoiseSchedule<T>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let u = spec.unet();
        let time = TimeMlp::new(&mut store, "time", spec.time_dim, &mut rng);
        let enc = Encoder::new(&mut store, "unet.enc", &u, &mut rng);
        let dec = Decoder::new(&mut store, "unet.dec", &u, &enc, &mut rng);
        let sem = SemanticEncoder::new(&mut store, &spec, &mut rng);
        Ok(Self {
            store,
            spec,
            schedule,
            time,
            enc,
            dec,
            sem,
            steps_trained: 0,
        })
    }

    fn check_images(&self, x: &ArrayView3<'_, T>) -> Result<()> {
        let (_, h, w) = x.dim();
        let s = self.spec.image_size;
        if (h, w) != (s, s) {
            return Err(Error::Contract(format!("model expects {s}x{s} images, got {h}x{w}")));
        }
        Ok(())
    }

    fn check_cond(&self, c: &Conditioning<T>) -> Result<()> {
        if c.sem.len() != self.spec.d_sem || (self.spec.use_morphology && c.mor.len() != self.spec.d_mor) {
            return Err(Error::Contract(format!(
                "conditioning dims ({}, {}) vs model ({}, {})",
                c.sem.len(),
                c.mor.len(),
                self.spec.d_sem,
                self.spec.d_mor
            )));
        }
        Ok(())
    }

    /// Semantic codes of a batch of clean images, `[n, d_sem]`.
    pub fn encode_semantic_batch(&self, x0: ArrayView3<'_, T>) -> Result<Array2<T>> {
        self.check_images(&x0)?;
        let mut tape = Tape::new();
        let x = image_batch(&mut tape, x0);
        let out = self.sem.forward(&mut tape, &self.store, x);
        Ok(tape.value(out).clone().into_dimensionality().unwrap())
    }

    pub fn encode_semantic(&self, x0: &Array2<T>) -> Result<Array1<T>> {
        let b = x0.view().insert_axis(Axis(0));
        Ok(self.encode_semantic_batch(b)?.row(0).to_owned())
    }

    /// Conditioning vector as the network consumes it.
    fn cond_vector(&self, c: &Conditioning<T>) -> Array1<T> {
        if self.spec.use_morphology {
            c.concat()
        } else {
            c.sem.clone()
        }
    }

    fn unet_forward(&self, tape: &mut Tape<T>, x: Var, t: &[usize], cond: Var) -> Var {
        let te = self.time.forward(tape, &self.store, t);
        let (h, skips) = self.enc.forward(tape, &self.store, x, Some(te), Some(cond));
        let h = self.dec.middle(tape, &self.store, h, Some(te), Some(cond));
        self.dec.upward(tape, &self.store, h, skips, Some(te), Some(cond))
    }

    /// One optimizer step on the simple loss. `mor` rows are the frozen
    /// morphology codes of `x0` (ignored by the ablation).
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        opt: &mut Adam<T>,
        x0: ArrayView3<'_, T>,
        mor: &Array2<T>,
        rng: &mut R,
    ) -> Result<T> {
        self.check_images(&x0)?;
        let (n, h, w) = x0.dim();
        let big_t = self.schedule.steps();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=big_t)).collect();
        let eps: Array3<T> = Array3::from_shape_simple_fn((n, h, w), || {
            T::cast(rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
        });
        let mut xt = Array3::<T>::zeros((n, h, w));
        for i in 0..n {
            let v = diffusion::q_sample(
                &x0.index_axis(Axis(0), i).to_owned(),
                t[i],
                &eps.index_axis(Axis(0), i).to_owned(),
                &self.schedule,
            )?;
            xt.index_axis_mut(Axis(0), i).assign(&v);
        }
        let mut tape = Tape::new();
        let clean = image_batch(&mut tape, x0);
        let sem = self.sem.forward(&mut tape, &self.store, clean);
        let cond = if self.spec.use_morphology {
            let m = tape.input(mor.clone().into_dyn());
            tape.concat(sem, m)
        } else {
            sem
        };
        let xv = image_batch(&mut tape, xt.view());
        let out = self.unet_forward(&mut tape, xv, &t, cond);
        let target = eps.view().into_shape_with_order(IxDyn(&[n, 1, h, w])).unwrap();
        let (loss, seed) = diffusion::mse_loss_grad(tape.value(out).view(), target);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite diffusion loss at step {}", self.steps_trained)));
        }
        let grads = tape.backward(out, seed);
        opt.step(&mut self.store, &grads.params());
        self.steps_trained += 1;
        Ok(loss)
    }

    /// FNV checksum of the semantic-encoder parameters.
    pub fn semantic_checksum(&self) -> u64 {
        self.store.checksum_where(|n| n.starts_with("sem."))
    }

    pub fn save(&self, path: &Path, seed: u64, rng_word_pos: u128) -> Result<()> {
        let manifest = CheckpointManifest {
            kind: "diffusion".into(),
            spec: serde_json::to_value(&self.spec).expect("spec serializes"),
            schedule: Some(self.schedule.config().clone()),
            step: self.steps_trained,
            seed,
            rng_word_pos: rng_word_pos.to_string(),
            trained: self.steps_trained > 0,
        };
        Archive::write(path, &self.store, &serde_json::to_value(manifest).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let manifest = read_manifest(path)?;
        if manifest.kind != "diffusion" {
            return Err(Error::Format(format!("{} is a {} checkpoint", path.display(), manifest.kind)));
        }
        let spec: ConditionalUnetSpec =
            serde_json::from_value(manifest.spec.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let sched = NoiseSchedule::from_config(manifest.schedule.as_ref().ok_or_else(|| {
            Error::Format("diffusion checkpoint without schedule".into())
        })?)?;
        let mut model = Self::new(spec, sched, 0)?;
        Archive::read_into(path, &mut model.store)?;
        model.steps_trained = manifest.step;
        Ok((model, manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch_size: 32,
            learning_rate: 1e-4,
            final_lr_fraction: 1.0,
            seed: 0,
            log_every: 500,
        }
    }
}

/// Learning rate at `step` (1-based) under cosine decay.
pub fn cosine_lr(cfg: &DiffTrainConfig, step: usize) -> f64 {
    let progress = (step - 1) as f64 / cfg.steps.max(1) as f64;
    let f = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * f
}

/// Trains the noise predictor and semantic encoder end to end. `mor` holds
/// the frozen morphology code of each training image, one row per image.
pub fn train_diffusion<T: Real>(
    spec: ConditionalUnetSpec,
    schedule: NoiseSchedule<T>,
    images: &[Array2<T>],
    mor: &Array2<T>,
    cfg: &DiffTrainConfig,
) -> Result<DiffusionModel<T>> {
    if images.is_empty() || mor.nrows() != images.len() {
        return Err(Error::Parameter("diffusion training needs one morphology code per image".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Parameter("batch size and step count must be positive".into()));
    }
    let mut model = DiffusionModel::new(spec, schedule, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff);
    let mut opt = Adam::new(cfg.learning_rate);
    let s = model.spec.image_size;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut running = 0.0;
    for step in 1..=cfg.steps {
        let bsz = cfg.batch_size.min(images.len());
        let mut x = Array3::<T>::zeros((bsz, s, s));
        let mut m = Array2::<T>::zeros((bsz, mor.ncols()));
        for k in 0..bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            x.index_axis_mut(Axis(0), k).assign(&images[i]);
            m.row_mut(k).assign(&mor.row(i));
        }
        opt.lr = cosine_lr(cfg, step);
        let loss = model.train_step(&mut opt, x.view(), &m, &mut rng)?.to_f64_lossy();
        running += loss;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let n = if step % cfg.log_every.max(1) == 0 { cfg.log_every.max(1) } else { step % cfg.log_every.max(1) };
            info!("diffusion step {step}: mean loss {:.5}", running / n as f64);
            running = 0.0;
        }
    }
    Ok(model)
}

/// Reads only the manifest of an archive.
pub(crate) fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let v = Archive::read_manifest(path)?;
    serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))
}

impl<T: Real> NoisePredictor<T> for DiffusionModel<T> {
    fn predict_noise(&self, x_t: &Array2<T>, t: usize, cond: &Conditioning<T>) -> Result<Array2<T>> {
        let out = self.predict_noise_batch(&x_t.view().insert_axis(Axis(0)).to_owned(), t, std::slice::from_ref(cond))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    fn predict_noise_batch(&self, x_t: &Array3<T>, t: usize, conds: &[Conditioning<T>]) -> Result<Array3<T>> {
        self.check_images(&x_t.view())?;
        if conds.len() != x_t.len_of(Axis(0)) {
            return Err(Error::Contract("one conditioning per image".into()));
        }
        if t > self.schedule.steps() {
            return Err(Error::Contract(format!("timestep {t} outside schedule")));
        }
        for c in conds {
            self.check_cond(c)?;
        }
        let (n, h, w) = x_t.dim();
        let rows: Vec<Array1<T>> = conds.iter().map(|c| self.cond_vector(c)).collect();
        let mut tape = Tape::new();
        let x = image_batch(&mut tape, x_t.view());
        let c = vector_batch(&mut tape, &rows.iter().collect::<Vec<_>>());
        let out = self.unet_forward(&mut tape, x, &vec![t; n], c);
        Ok(tape.value(out).clone().into_shape_with_order((n, h, w)).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    pub(crate) fn tiny_spec() -> ConditionalUnetSpec {
        ConditionalUnetSpec {
            image_size: 16,
            base_width: 8,
            channel_mults: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![],
            groups: 4,
            space_to_depth: 2,
            time_dim: 8,
            d_sem: 4,
            d_mor: 3,
            use_morphology: true,
            injection: SCALE_SHIFT.into(),
        }
    }

    #[test]
    fn semantic_code_shape_and_determinism() {
        let m = DiffusionModel::<f32>::new(tiny_spec(), make_schedule(100, 1e-4, 0.02).unwrap(), 1).unwrap();
        let x = Array2::from_shape_fn((16, 16), |(i, j)| ((i * j) as f32 / 200.0).sin());
        let a = m.encode_semantic(&x).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, m.encode_semantic(&x).unwrap());
        assert!(m.encode_semantic(&Array2::zeros((8, 8))).is_err());
    }

    #[test]
    fn predict_noise_shape_and_dim_check() {
        let m = DiffusionModel::<f32>::new(tiny_spec(), make_schedule(100, 1e-4, 0.02).unwrap(), 1).unwrap();
        let x = Array2::from_elem((16, 16), 0.1f32);
        let c = Conditioning::zeros(4, 3);
        assert_eq!(m.predict_noise(&x, 10, &c).unwrap().dim(), (16, 16));
        assert!(m.predict_noise(&x, 10, &Conditioning::zeros(5, 3)).is_err());
    }

    #[test]
    fn training_moves_semantic_encoder_and_checkpoint_round_trips() {
        let mut m = DiffusionModel::<f32>::new(tiny_spec(), make_schedule(100, 1e-4, 0.02).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array3::from_shape_fn((2, 16, 16), |(b, i, j)| ((b + i + j) as f32 / 10.0).cos());
        let mor = Array2::from_elem((2, 3), 0.5f32);
        let before = m.semantic_checksum();
        let mut opt = Adam::new(1e-3);
        for _ in 0..3 {
            m.train_step(&mut opt, x0.view(), &mor, &mut rng).unwrap();
        }
        assert_ne!(before, m.semantic_checksum());
        let dir = std::env::temp_dir().join(format!("dmcvr-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("diff.ckpt");
        m.save(&p, 2, 77).unwrap();
        let (back, man) = DiffusionModel::<f32>::load(&p).unwrap();
        assert_eq!(man.step, 3);
        assert_eq!(man.rng_word_pos, "77");
        assert_eq!(back.store.checksum(), m.store.checksum());
        std::fs::remove_dir_all(dir).ok();
    }
}
