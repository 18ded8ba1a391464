use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::Real;

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.kaiming(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in,
            1.0,
            rng,
        );
        let bias = store.zeros(format!("{name}.bias"), &[c_out]);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// Same as [`Conv2d::new`] but with all weights zero, so the layer starts
    /// as the zero map (used for residual branch outputs).
    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        let weight = store.zeros(format!("{name}.weight"), &[c_out, c_in, kernel, kernel]);
        let bias = store.zeros(format!("{name}.bias"), &[c_out]);
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        f_in: usize,
        f_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.kaiming(format!("{name}.weight"), &[f_out, f_in], f_in, 1.0, rng);
        let bias = store.zeros(format!("{name}.bias"), &[f_out]);
        Self { weight, bias }
    }

    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, f_in: usize, f_out: usize) -> Self {
        let weight = store.zeros(format!("{name}.weight"), &[f_out, f_in]);
        let bias = store.zeros(format!("{name}.bias"), &[f_out]);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels, {groups} groups");
        let gamma = store.ones(format!("{name}.gamma"), &[channels]);
        let beta = store.zeros(format!("{name}.beta"), &[channels]);
        Self {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, g, b, self.groups, 1e-5)
    }
}
