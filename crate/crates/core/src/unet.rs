//! Residual UNet shared by the noise predictor, the semantic encoder and the
//! segmentation network.
//!
//! Every residual block normalizes, then applies per-channel `(1 + s) h + b`
//! modulation from the timestep embedding and, separately, from a
//! conditioning vector.

use dmcvr_nn::{Conv2d, GroupNorm, Linear, ParamStore, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetSpec {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Not supported; must be empty.
    #[serde(default)]
    pub attention_resolutions: Vec<usize>,
    pub groups: usize,
    /// Lossless `f x f` pixel unshuffle before the first convolution.
    pub space_to_depth: usize,
    /// Sinusoidal timestep embedding width; 0 disables time conditioning.
    pub time_dim: usize,
    /// Conditioning vector width seen by encoder-side blocks (0 = none).
    pub enc_cond_dim: usize,
    /// Conditioning vector width seen by middle and decoder blocks.
    pub dec_cond_dim: usize,
}

impl UnetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.image_size.is_power_of_two() {
            return bad(format!("image size {} is not a power of two", self.image_size));
        }
        if self.channel_mults.is_empty() || self.base_width == 0 || self.groups == 0 {
            return bad("need at least one level, a base width and a group count".into());
        }
        if !self.attention_resolutions.is_empty() {
            return bad("attention blocks are not supported".into());
        }
        let f = self.space_to_depth.max(1);
        if !f.is_power_of_two() {
            return bad("space_to_depth must be a power of two".into());
        }
        let down = f << (self.channel_mults.len() - 1);
        if down > self.image_size {
            return bad(format!(
                "{} levels with unshuffle {f} are too deep for size {}",
                self.channel_mults.len(),
                self.image_size
            ));
        }
        for &m in &self.channel_mults {
            if (self.base_width * m) % self.groups != 0 {
                return bad(format!("width {} not divisible by {} groups", self.base_width * m, self.groups));
            }
        }
        if self.base_width % self.groups != 0 {
            return bad("base width not divisible by groups".into());
        }
        Ok(())
    }

    /// Channel count at the bottleneck.
    pub fn bottleneck_width(&self) -> usize {
        self.base_width * self.channel_mults.last().copied().unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    time: Option<Linear>,
    cond: Option<Linear>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    out_ch: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        time_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        let time = (time_dim > 0).then(|| Linear::new(store, &format!("{name}.time"), time_dim, 2 * c_out, rng));
        let cond = (cond_dim > 0).then(|| Linear::new(store, &format!("{name}.cond"), cond_dim, 2 * c_out, rng));
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups),
            time,
            cond,
            conv2: Conv2d::zeroed(store, &format!("{name}.conv2"), c_out, c_out, 3),
            skip: (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, rng)),
            out_ch: c_out,
        }
    }

    fn modulate<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, lin: &Linear, v: Var) -> Var {
        let ss = lin.forward(tape, store, v);
        let scale = tape.narrow(ss, 0, self.out_ch);
        let shift = tape.narrow(ss, self.out_ch, self.out_ch);
        tape.modulate(h, scale, shift)
    }

    /// `temb` is the already-activated time embedding.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Option<Var>,
        cond: Option<Var>,
    ) -> Var {
        let h = self.norm1.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h);
        let mut h = self.norm2.forward(tape, store, h);
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            h = self.modulate(tape, store, h, lin, t);
        }
        if let (Some(lin), Some(c)) = (&self.cond, cond) {
            h = self.modulate(tape, store, h, lin, c);
        }
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, store, x),
            None => x,
        };
        tape.add(s, h)
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> ArrayD<T> {
    let half = dim / 2;
    let mut out = Array2::<T>::zeros((t.len(), dim));
    for (i, &step) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = step as f64 * freq;
            out[[i, k]] = T::cast(a.cos());
            out[[i, half + k]] = T::cast(a.sin());
        }
    }
    out.into_dyn()
}

/// Encoder half: input convolution plus the downsampling path.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
    space_to_depth: usize,
    /// Channels of every tensor pushed on the skip stack.
    skip_channels: Vec<usize>,
    out_channels: usize,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, spec: &UnetSpec, rng: &mut R) -> Self {
        let f = spec.space_to_depth.max(1);
        let c0 = spec.base_width;
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), spec.in_channels * f * f, c0, 3, 1, rng);
        let mut skip_channels = vec![c0];
        let mut ch = c0;
        let mut levels = Vec::new();
        for (l, &m) in spec.channel_mults.iter().enumerate() {
            let out = spec.base_width * m;
            let mut blocks = Vec::new();
            for r in 0..spec.num_res_blocks {
                blocks.push(ResBlock::new(
                    store,
                    &format!("{name}.down{l}.res{r}"),
                    ch,
                    out,
                    spec.groups,
                    spec.time_dim,
                    spec.enc_cond_dim,
                    rng,
                ));
                ch = out;
                skip_channels.push(ch);
            }
            let down = (l + 1 < spec.channel_mults.len())
                .then(|| Conv2d::new(store, &format!("{name}.down{l}.pool"), ch, ch, 3, 2, rng));
            if down.is_some() {
                skip_channels.push(ch);
            }
            levels.push((blocks, down));
        }
        Self {
            conv_in,
            levels,
            space_to_depth: f,
            skip_channels,
            out_channels: ch,
        }
    }

    /// Returns the deepest activation and the skip stack.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Option<Var>,
        cond: Option<Var>,
    ) -> (Var, Vec<Var>) {
        let x = if self.space_to_depth > 1 {
            tape.space_to_depth(x, self.space_to_depth)
        } else {
            x
        };
        let mut h = self.conv_in.forward(tape, store, x);
        let mut skips = vec![h];
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(tape, store, h, temb, cond);
                skips.push(h);
            }
            if let Some(d) = down {
                h = d.forward(tape, store, h);
                skips.push(h);
            }
        }
        (h, skips)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Middle blocks, upsampling path and output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    mid: Vec<ResBlock>,
    levels: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    space_to_depth: usize,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &UnetSpec,
        enc: &Encoder,
        rng: &mut R,
    ) -> Self {
        let f = enc.space_to_depth;
        let mut ch = enc.out_channels;
        let (g, td, cd) = (spec.groups, spec.time_dim, spec.dec_cond_dim);
        // the middle blocks see the encoder-side conditioning
        let mid = (0..2)
            .map(|i| ResBlock::new(store, &format!("{name}.mid{i}"), ch, ch, g, td, spec.enc_cond_dim, rng))
            .collect();
        let mut skip_ch = enc.skip_channels.clone();
        let mut levels = Vec::new();
        for (l, &m) in spec.channel_mults.iter().enumerate().rev() {
            let out = spec.base_width * m;
            let mut blocks = Vec::new();
            for r in 0..=spec.num_res_blocks {
                let s = skip_ch.pop().expect("skip stack");
                blocks.push(ResBlock::new(store, &format!("{name}.up{l}.res{r}"), ch + s, out, g, td, cd, rng));
                ch = out;
            }
            let up = (l > 0).then(|| Conv2d::new(store, &format!("{name}.up{l}.conv"), ch, ch, 3, 1, rng));
            levels.push((blocks, up));
        }
        Self {
            mid,
            levels,
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), ch, g),
            conv_out: Conv2d::zeroed(store, &format!("{name}.conv_out"), ch, spec.out_channels * f * f, 3),
            space_to_depth: f,
        }
    }

    /// Runs only the middle blocks.
    pub fn middle<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut h: Var,
        temb: Option<Var>,
        cond: Option<Var>,
    ) -> Var {
        for b in &self.mid {
            h = b.forward(tape, store, h, temb, cond);
        }
        h
    }

    /// Upsampling path from the output of [`Decoder::middle`].
    pub fn upward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut h: Var,
        mut skips: Vec<Var>,
        temb: Option<Var>,
        cond: Option<Var>,
    ) -> Var {
        for (blocks, up) in &self.levels {
            for b in blocks {
                let s = skips.pop().expect("skip stack");
                let cat = tape.concat(h, s);
                h = b.forward(tape, store, cat, temb, cond);
            }
            if let Some(conv) = up {
                let u = tape.upsample2(h);
                h = conv.forward(tape, store, u);
            }
        }
        let h = self.norm_out.forward(tape, store, h);
        let h = tape.silu(h);
        let out = self.conv_out.forward(tape, store, h);
        if self.space_to_depth > 1 {
            tape.depth_to_space(out, self.space_to_depth)
        } else {
            out
        }
    }
}

/// Timestep MLP: sinusoid -> linear -> SiLU -> linear -> SiLU.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl TimeMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, dim, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim, rng),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, t: &[usize]) -> Var {
        let e = tape.input(timestep_embedding::<T>(t, self.dim));
        let h = self.l1.forward(tape, store, e);
        let h = tape.silu(h);
        let h = self.l2.forward(tape, store, h);
        tape.silu(h)
    }
}

/// Puts a batch of single-channel images `[n, h, w]` on the tape as
/// `[n, 1, h, w]`.
pub fn image_batch<T: Real>(tape: &mut Tape<T>, x: ndarray::ArrayView3<'_, T>) -> Var {
    let (n, h, w) = x.dim();
    let v = x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[n, 1, h, w])).unwrap();
    tape.input(v)
}

/// Puts `[n, d]` row vectors on the tape.
pub fn vector_batch<T: Real>(tape: &mut Tape<T>, rows: &[&ndarray::Array1<T>]) -> Var {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::<T>::zeros((rows.len(), d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    tape.input(out.into_dyn())
}
