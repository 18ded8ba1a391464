//! Slice stacks, dense volumes and label maps.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Segmentation classes. Discriminants are the stored label values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    /// Left-ventricle cavity.
    Lvc = 1,
    /// Left-ventricle myocardium.
    Lvm = 2,
    /// Right-ventricle cavity.
    Rvc = 3,
}

pub const NUM_CLASSES: usize = 4;
pub const FOREGROUND: [Class; 3] = [Class::Lvc, Class::Lvm, Class::Rvc];

impl Class {
    pub fn from_u8(v: u8) -> Option<Class> {
        match v {
            0 => Some(Class::Background),
            1 => Some(Class::Lvc),
            2 => Some(Class::Lvm),
            3 => Some(Class::Rvc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "BG",
            Class::Lvc => "LVC",
            Class::Lvm => "LVM",
            Class::Rvc => "RVC",
        }
    }

    /// Display colour: red LVC, green LVM, blue RVC.
    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Background => [0, 0, 0],
            Class::Lvc => [255, 0, 0],
            Class::Lvm => [0, 255, 0],
            Class::Rvc => [0, 0, 255],
        }
    }
}

fn check_labels<'a>(values: impl IntoIterator<Item = &'a u8>) -> Result<()> {
    match values.into_iter().find(|&&v| v as usize >= NUM_CLASSES) {
        Some(v) => Err(Error::Contract(format!("label value {v} is not a known class"))),
        None => Ok(()),
    }
}

/// Per-pixel class map of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask(Array2<u8>);

impl LabelMask {
    pub fn new(classes: Array2<u8>) -> Result<Self> {
        check_labels(classes.iter())?;
        Ok(Self(classes))
    }

    pub fn background(rows: usize, cols: usize) -> Self {
        Self(Array2::zeros((rows, cols)))
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn into_array(self) -> Array2<u8> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn class_mask(&self, class: Class) -> Array2<bool> {
        self.0.mapv(|v| v == class as u8)
    }

    pub fn count(&self, class: Class) -> usize {
        self.0.iter().filter(|&&v| v == class as u8).count()
    }
}

/// Dense scalar volume indexed `[slice, row, col]`, intensities in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub data: Array3<T>,
    pub labels: Option<Array3<u8>>,
    /// `(row, col, through-plane)` spacing in mm.
    pub spacing: [f64; 3],
    /// Through-plane position of slice 0 in mm.
    pub origin: f64,
    pub orientation: String,
}

pub const SAX_ORIENTATION: &str = "sax:slice-row-col";

impl<T: Real> Volume<T> {
    pub fn new(data: Array3<T>, labels: Option<Array3<u8>>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(l) = &labels {
            if l.dim() != data.dim() {
                return Err(Error::Contract(format!(
                    "label shape {:?} differs from data shape {:?}",
                    l.dim(),
                    data.dim()
                )));
            }
            check_labels(l.iter())?;
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            data,
            labels,
            spacing,
            origin: 0.0,
            orientation: SAX_ORIENTATION.to_string(),
        })
    }

    pub fn n_slices(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn slice_dim(&self) -> (usize, usize) {
        let (_, r, c) = self.data.dim();
        (r, c)
    }

    pub fn slice(&self, i: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn label_slice(&self, i: usize) -> Option<LabelMask> {
        self.labels
            .as_ref()
            .map(|l| LabelMask(l.index_axis(Axis(0), i).to_owned()))
    }

    pub fn position(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.spacing[2]
    }

    /// Contiguous sub-volume `[start, end)` along the slice axis.
    pub fn slab(&self, start: usize, end: usize) -> Volume<T> {
        Volume {
            data: self.data.slice(s![start..end, .., ..]).to_owned(),
            labels: self
                .labels
                .as_ref()
                .map(|l| l.slice(s![start..end, .., ..]).to_owned()),
            spacing: self.spacing,
            origin: self.position(start),
            orientation: self.orientation.clone(),
        }
    }
}

/// Ordered, sparsely spaced 2D slices as acquired.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack<T> {
    pub slices: Vec<Array2<T>>,
    pub labels: Option<Vec<LabelMask>>,
    /// Through-plane coordinates in mm, strictly increasing.
    pub positions: Vec<f64>,
    /// In-plane `(row, col)` spacing in mm.
    pub pixel_spacing: [f64; 2],
}

impl<T: Real> SliceStack<T> {
    pub fn new(
        slices: Vec<Array2<T>>,
        labels: Option<Vec<LabelMask>>,
        positions: Vec<f64>,
        pixel_spacing: [f64; 2],
    ) -> Result<Self> {
        if slices.len() != positions.len() {
            return Err(Error::Contract(format!(
                "{} slices but {} positions",
                slices.len(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("slice positions must be strictly increasing".into()));
        }
        if let Some(first) = slices.first() {
            if slices.iter().any(|s| s.dim() != first.dim()) {
                return Err(Error::Contract("all slices must share one shape".into()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != slices.len() || l.iter().zip(&slices).any(|(m, s)| m.dim() != s.dim()) {
                return Err(Error::Contract("labels must match slices one-to-one".into()));
            }
        }
        Ok(Self {
            slices,
            labels,
            positions,
            pixel_spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice_dim(&self) -> (usize, usize) {
        self.slices.first().map(|s| s.dim()).unwrap_or((0, 0))
    }
}

/// Stacks equally shaped 2D arrays along a new leading axis.
pub fn stack_slices<A: Clone + num_traits::Zero>(slices: &[Array2<A>]) -> Array3<A> {
    let (r, c) = slices.first().map(|s| s.dim()).unwrap_or((0, 0));
    let mut out = Array3::zeros((slices.len(), r, c));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(slices) {
        dst.assign(src);
    }
    out
}
