//! Noise schedule, forward noising, Tweedie denoising and the deterministic
//! DDIM sampler / inverter.
//!
//! `alpha_bar(t)` is the cumulative signal-retention coefficient; index 0 is
//! the clean-image extension with `alpha_bar(0) = 1`.

use std::cell::Cell;

use dmcvr_nn::{Conv2d, ParamStore, Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, Axis, IxDyn, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: String,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            family: "linear-beta".into(),
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    config: ScheduleConfig,
    alpha_bar: Vec<T>,
}

/// Linear-beta schedule: `alpha_bar(t) = prod_{i<=t} (1 - beta_i)` with
/// `beta_i` evenly spaced from `beta_start` to `beta_end`.
pub fn make_schedule<T: Real>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    if steps < 1 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(T::one());
    let mut acc = T::one();
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        let beta = beta_start + frac * (beta_end - beta_start);
        acc *= T::one() - T::cast(beta);
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            family: "linear-beta".into(),
            train_steps: steps,
            beta_start,
            beta_end,
        },
        alpha_bar,
    })
}

impl<T: Real> NoiseSchedule<T> {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.family != "linear-beta" {
            return Err(Error::Config(format!("unknown schedule family `{}`", cfg.family)));
        }
        make_schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Contract(format!("timestep {t} outside 0..={}", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("schedule config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: ScheduleConfig =
            serde_json::from_value(v.clone()).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_config(&cfg)
    }
}

/// Strictly increasing subsequence of `1..=T` ending at `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSequence(Vec<usize>);

impl StepSequence {
    /// `count` evenly spaced steps `floor(i T / count)`, `i = 1..=count`.
    pub fn uniform(train_steps: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Parameter("step sequence must not be empty".into()));
        }
        if count > train_steps {
            return Err(Error::Parameter(format!(
                "{count} sampling steps exceed {train_steps} training steps"
            )));
        }
        Ok(Self((1..=count).map(|i| i * train_steps / count).collect()))
    }

    pub fn new(steps: Vec<usize>, train_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Parameter("step sequence must not be empty".into()));
        }
        if steps[0] < 1 || steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("steps must be strictly increasing from >= 1".into()));
        }
        if *steps.last().unwrap() != train_steps {
            return Err(Error::Parameter(format!("last step must equal T = {train_steps}")));
        }
        Ok(Self(steps))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Semantic and morphology codes conditioning the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T> {
    pub sem: Array1<T>,
    pub mor: Array1<T>,
}

impl<T: Real> Conditioning<T> {
    pub fn new(sem: Array1<T>, mor: Array1<T>) -> Result<Self> {
        if sem.iter().chain(mor.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("conditioning codes must be finite".into()));
        }
        Ok(Self { sem, mor })
    }

    pub fn zeros(d_sem: usize, d_mor: usize) -> Self {
        Self {
            sem: Array1::zeros(d_sem),
            mor: Array1::zeros(d_mor),
        }
    }

    /// `[sem, mor]` concatenated.
    pub fn concat(&self) -> Array1<T> {
        self.sem.iter().chain(self.mor.iter()).copied().collect()
    }
}

/// `eps_theta(x_t, t, l_sem, l_mor)`.
pub trait NoisePredictor<T: Real> {
    fn predict_noise(&self, x_t: &Array2<T>, t: usize, cond: &Conditioning<T>) -> Result<Array2<T>>;

    /// Batched form over `[n, h, w]` at a shared timestep.
    fn predict_noise_batch(&self, x_t: &Array3<T>, t: usize, conds: &[Conditioning<T>]) -> Result<Array3<T>> {
        if conds.len() != x_t.len_of(Axis(0)) {
            return Err(Error::Contract("one conditioning per image".into()));
        }
        let mut out = Array3::zeros(x_t.raw_dim());
        for (i, c) in conds.iter().enumerate() {
            let e = self.predict_noise(&x_t.index_axis(Axis(0), i).to_owned(), t, c)?;
            out.index_axis_mut(Axis(0), i).assign(&e);
        }
        Ok(out)
    }
}

fn check_same(a: &Array2<impl Sized>, b: &Array2<impl Sized>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "{what}: shape {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn lincomb<T: Real>(a: &Array2<T>, ca: T, b: &Array2<T>, cb: T) -> Array2<T> {
    Zip::from(a).and(b).map_collect(|&x, &y| ca * x + cb * y)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, no clipping.
pub fn q_sample<T: Real>(x0: &Array2<T>, t: usize, eps: &Array2<T>, sched: &NoiseSchedule<T>) -> Result<Array2<T>> {
    check_same(x0, eps, "q_sample")?;
    let a = sched.alpha_bar(t)?;
    Ok(lincomb(x0, a.sqrt(), eps, (T::one() - a).sqrt()))
}

/// Tweedie estimate `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn tweedie_denoise<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    eps_hat: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    check_same(x_t, eps_hat, "tweedie_denoise")?;
    let a = sched.alpha_bar(t)?;
    if a <= T::zero() {
        return Err(Error::Singularity(format!("alpha_bar({t}) = 0")));
    }
    let inv = T::one() / a.sqrt();
    Ok(lincomb(x_t, inv, eps_hat, -(T::one() - a).sqrt() * inv))
}

/// Moves `x_t` to timestep `to` along the deterministic DDIM path using one
/// noise estimate taken at `t`.
fn ddim_move<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    to: usize,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    let eps = net.predict_noise(x_t, t, cond)?;
    check_same(x_t, &eps, "noise predictor output")?;
    let x0 = tweedie_denoise(x_t, t, &eps, sched)?;
    let a_to = sched.alpha_bar(to)?;
    Ok(lincomb(&x0, a_to.sqrt(), &eps, (T::one() - a_to).sqrt()))
}

/// One generative step `t -> t_prev` (`t_prev < t`).
pub fn ddim_step<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    t_prev: usize,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    if t_prev >= t {
        return Err(Error::Contract(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    ddim_move(x_t, t, t_prev, cond, net, sched)
}

/// One inversion step `t -> t_next` (`t_next > t`).
pub fn ddim_invert_step<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    t_next: usize,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    if t_next <= t {
        return Err(Error::Contract(format!(
            "ddim_invert_step needs t_next > t, got {t_next} <= {t}"
        )));
    }
    ddim_move(x_t, t, t_next, cond, net, sched)
}

/// Decodes a stochastic latent `x_T` to an image, walking `steps` downwards
/// and finishing at `alpha_bar = 1`.
pub fn sample<T: Real>(
    x_t: &Array2<T>,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
    steps: &StepSequence,
) -> Result<Array2<T>> {
    if steps.is_empty() {
        return Err(Error::Parameter("empty step sequence".into()));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("x_T must be finite".into()));
    }
    let s = steps.as_slice();
    let mut x = x_t.clone();
    for i in (0..s.len()).rev() {
        let prev = if i == 0 { 0 } else { s[i - 1] };
        x = ddim_step(&x, s[i], prev, cond, net, sched)?;
    }
    Ok(x)
}

/// Stochastic encoder: runs the sampler backwards from the clean image
/// (`t = 0`) up to `T`.
pub fn invert<T: Real>(
    x0: &Array2<T>,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
    steps: &StepSequence,
) -> Result<Array2<T>> {
    if steps.is_empty() {
        return Err(Error::Parameter("empty step sequence".into()));
    }
    let s = steps.as_slice();
    let mut x = x0.clone();
    let mut cur = 0;
    for &next in s {
        x = ddim_invert_step(&x, cur, next, cond, net, sched)?;
        cur = next;
    }
    Ok(x)
}

fn ddim_move_batch<T: Real>(
    x: &Array3<T>,
    t: usize,
    to: usize,
    conds: &[Conditioning<T>],
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array3<T>> {
    let eps = net.predict_noise_batch(x, t, conds)?;
    if eps.dim() != x.dim() {
        return Err(Error::Contract("noise predictor output shape".into()));
    }
    let (a, a_to) = (sched.alpha_bar(t)?, sched.alpha_bar(to)?);
    if a <= T::zero() {
        return Err(Error::Singularity(format!("alpha_bar({t}) = 0")));
    }
    let inv = T::one() / a.sqrt();
    let (ca, cb) = (a_to.sqrt(), (T::one() - a_to).sqrt());
    let s = (T::one() - a).sqrt();
    Ok(Zip::from(x).and(&eps).map_collect(|&xv, &e| {
        let x0 = inv * xv + (-s * inv) * e;
        ca * x0 + cb * e
    }))
}

/// [`sample`] over a batch `[n, h, w]`; each image follows exactly the same
/// arithmetic as the single-image path.
pub fn sample_batch<T: Real>(
    x_t: &Array3<T>,
    conds: &[Conditioning<T>],
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
    steps: &StepSequence,
) -> Result<Array3<T>> {
    if steps.is_empty() {
        return Err(Error::Parameter("empty step sequence".into()));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("x_T must be finite".into()));
    }
    let s = steps.as_slice();
    let mut x = x_t.clone();
    for i in (0..s.len()).rev() {
        let prev = if i == 0 { 0 } else { s[i - 1] };
        x = ddim_move_batch(&x, s[i], prev, conds, net, sched)?;
    }
    Ok(x)
}

/// [`invert`] over a batch `[n, h, w]`.
pub fn invert_batch<T: Real>(
    x0: &Array3<T>,
    conds: &[Conditioning<T>],
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
    steps: &StepSequence,
) -> Result<Array3<T>> {
    if steps.is_empty() {
        return Err(Error::Parameter("empty step sequence".into()));
    }
    let mut x = x0.clone();
    let mut cur = 0;
    for &next in steps.as_slice() {
        x = ddim_move_batch(&x, cur, next, conds, net, sched)?;
        cur = next;
    }
    Ok(x)
}

/// Per-pixel mean squared error between the predicted and true noise.
///
/// Reduction: per-image sum of squares divided by the pixel count, then
/// averaged over the batch.
pub fn simple_loss<T: Real>(
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
    cond: &Conditioning<T>,
    net: &dyn NoisePredictor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<T> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = net.predict_noise(&x_t, t, cond)?;
    check_same(&pred, eps, "simple_loss")?;
    let (loss, _) = mse_loss_grad(pred.view().into_dyn(), eps.view().into_dyn());
    Ok(loss)
}

/// Loss value and its gradient with respect to `pred` for a batch laid out
/// with the batch on axis 0. Same reduction as [`simple_loss`].
pub fn mse_loss_grad<T: Real>(pred: ArrayViewD<'_, T>, eps: ArrayViewD<'_, T>) -> (T, ArrayD<T>) {
    assert_eq!(pred.shape(), eps.shape(), "mse shapes");
    let total = T::cast(pred.len().max(1));
    let mut loss = T::zero();
    let grad = Zip::from(&pred).and(&eps).map_collect(|&p, &e| {
        let d = p - e;
        loss += d * d;
        (d + d) / total
    });
    (loss / total, grad)
}

/// Draws a standard-normal image.
pub fn gaussian_image<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::cast(rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
    })
}

/// Predicts the same image regardless of input.
#[derive(Clone, Debug)]
pub struct ConstantPredictor<T>(pub Array2<T>);

impl<T: Real> NoisePredictor<T> for ConstantPredictor<T> {
    fn predict_noise(&self, x_t: &Array2<T>, _t: usize, _c: &Conditioning<T>) -> Result<Array2<T>> {
        check_same(x_t, &self.0, "constant predictor")?;
        Ok(self.0.clone())
    }
}

/// Wraps a predictor and counts evaluations.
pub struct CountingPredictor<'a, T> {
    pub inner: &'a dyn NoisePredictor<T>,
    pub calls: Cell<usize>,
}

impl<'a, T: Real> CountingPredictor<'a, T> {
    pub fn new(inner: &'a dyn NoisePredictor<T>) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }
}

impl<T: Real> NoisePredictor<T> for CountingPredictor<'_, T> {
    fn predict_noise(&self, x_t: &Array2<T>, t: usize, c: &Conditioning<T>) -> Result<Array2<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_noise(x_t, t, c)
    }
}

/// Two-parameter predictor `w * x_t + b` realized as a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct AffinePredictor<T> {
    pub store: ParamStore<T>,
    conv: Conv2d,
}

impl<T: Real> AffinePredictor<T> {
    pub fn new(w: T, b: T) -> Self {
        let mut store = ParamStore::new();
        let conv = Conv2d::zeroed(&mut store, "affine", 1, 1, 1);
        store.value_mut(conv.weight).fill(w);
        store.value_mut(conv.bias).fill(b);
        Self { store, conv }
    }

    pub fn params(&self) -> [T; 2] {
        [
            self.store.value(self.conv.weight).iter().copied().next().unwrap(),
            self.store.value(self.conv.bias).iter().copied().next().unwrap(),
        ]
    }

    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var) -> Var {
        self.conv.forward(tape, &self.store, x)
    }

    /// Batch loss and `[dL/dw, dL/db]` via reverse mode.
    pub fn loss_and_grad(
        &self,
        x0: &Array3<T>,
        t: &[usize],
        eps: &Array3<T>,
        sched: &NoiseSchedule<T>,
    ) -> Result<(T, [T; 2])> {
        let (n, h, w) = x0.dim();
        if eps.dim() != x0.dim() || t.len() != n {
            return Err(Error::Contract("batch shapes disagree".into()));
        }
        let mut noisy = Array3::<T>::zeros((n, h, w));
        for i in 0..n {
            let xt = q_sample(
                &x0.index_axis(Axis(0), i).to_owned(),
                t[i],
                &eps.index_axis(Axis(0), i).to_owned(),
                sched,
            )?;
            noisy.index_axis_mut(Axis(0), i).assign(&xt);
        }
        let mut tape = Tape::new();
        let x = tape.input(noisy.into_shape_with_order(IxDyn(&[n, 1, h, w])).unwrap());
        let out = self.forward_tape(&mut tape, x);
        let target = eps.view().into_shape_with_order(IxDyn(&[n, 1, h, w])).unwrap();
        let (loss, seed) = mse_loss_grad(tape.value(out).view(), target);
        let grads = tape.backward(out, seed);
        let g = grads.params();
        let pick = |id| {
            g.iter()
                .find(|(p, _)| *p == id)
                .map(|(_, a)| a.iter().copied().next().unwrap())
                .unwrap_or_else(T::zero)
        };
        Ok((loss, [pick(self.conv.weight), pick(self.conv.bias)]))
    }
}

impl<T: Real> NoisePredictor<T> for AffinePredictor<T> {
    fn predict_noise(&self, x_t: &Array2<T>, _t: usize, _c: &Conditioning<T>) -> Result<Array2<T>> {
        let [w, b] = self.params();
        Ok(x_t.mapv(|v| w * v + b))
    }
}
