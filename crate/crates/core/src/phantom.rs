//! Procedural cardiac-like phantoms with exact labels.
//!
//! Geometry lives in pixel units on a `grid_size x grid_size` slice grid and a
//! normalized long-axis coordinate `z in [0, 1]` (base at 0, apex side at 1).
//! Pixel `(row, col)` has its centre at the point `(row, col)`.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Class, SliceStack, Volume};
use crate::Real;

/// Smooth LV centre curve: straight segment from `base` to `apex` plus a
/// perpendicular bow `bow * sin(pi z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterPath {
    /// `(row, col)` at `z = 0`.
    pub base: [f64; 2],
    /// `(row, col)` at `z = 1`.
    pub apex: [f64; 2],
    pub bow: f64,
}

impl CenterPath {
    pub fn at(&self, z: f64) -> [f64; 2] {
        let d = [self.apex[0] - self.base[0], self.apex[1] - self.base[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let perp = if len > 0.0 { [-d[1] / len, d[0] / len] } else { [0.0, 0.0] };
        let b = self.bow * (PI * z).sin();
        [
            self.base[0] + z * d[0] + b * perp[0],
            self.base[1] + z * d[1] + b * perp[1],
        ]
    }
}

/// LV cavity radius: `base * sqrt(1 - (z / apex_z)^2)` before `apex_z`, zero after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityProfile {
    pub base: f64,
    pub apex_z: f64,
}

impl CavityProfile {
    pub fn at(&self, z: f64) -> f64 {
        if z >= self.apex_z || self.base <= 0.0 {
            return 0.0;
        }
        let u = z / self.apex_z;
        self.base * (1.0 - u * u).max(0.0).sqrt()
    }
}

/// Myocardial wall. Thickness varies linearly from `wall_base` to
/// `wall_apex` over the cavity, then the wall closes as a cap ending at
/// `apex_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallProfile {
    pub wall_base: f64,
    pub wall_apex: f64,
    pub apex_z: f64,
}

/// Right-ventricle crescent hugging the septum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvProfile {
    /// Peak radial thickness at the base (px).
    pub thickness: f64,
    /// Lower bound on the peak thickness wherever the LV cavity exists.
    pub min_thickness: f64,
    /// Angular width (radians) at the base and at the cavity apex.
    pub extent_base: f64,
    pub extent_apex: f64,
    /// Direction of the crescent centre (radians, atan2(row, col) frame).
    pub angle_base: f64,
    pub angle_apex: f64,
}

impl RvProfile {
    pub fn extent(&self, z: f64, cavity_apex: f64) -> f64 {
        let u = (z / cavity_apex).clamp(0.0, 1.0);
        self.extent_base + u * (self.extent_apex - self.extent_base)
    }

    pub fn angle(&self, z: f64, cavity_apex: f64) -> f64 {
        let u = (z / cavity_apex).clamp(0.0, 1.0);
        self.angle_base + u * (self.angle_apex - self.angle_base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub outside: f64,
    pub torso: f64,
    pub lvc: f64,
    pub lvm: f64,
    pub rvc: f64,
    pub bias_amplitude: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            outside: -0.9,
            torso: -0.45,
            lvc: 0.75,
            lvm: -0.1,
            rvc: 0.55,
            bias_amplitude: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub grid_size: usize,
    pub n_slices_dense: usize,
    /// In-plane pixel spacing (mm).
    pub pixel_spacing: f64,
    /// Spacing between dense slices (mm).
    pub slice_spacing: f64,
    pub lv_center_path: CenterPath,
    pub cavity: CavityProfile,
    pub wall: WallProfile,
    pub rv: RvProfile,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let g = 64.0;
        Self {
            grid_size: 64,
            n_slices_dense: 64,
            pixel_spacing: 1.8,
            slice_spacing: 2.0,
            lv_center_path: CenterPath {
                base: [0.47 * g, 0.55 * g],
                apex: [0.60 * g, 0.68 * g],
                bow: 2.0,
            },
            cavity: CavityProfile {
                base: 9.5,
                apex_z: 0.78,
            },
            wall: WallProfile {
                wall_base: 3.5,
                wall_apex: 3.0,
                apex_z: 0.86,
            },
            rv: RvProfile {
                thickness: 7.0,
                min_thickness: 2.0,
                extent_base: 170f64.to_radians(),
                extent_apex: 100f64.to_radians(),
                angle_base: PI * 0.95,
                angle_apex: PI * 1.15,
            },
            intensities: Intensities::default(),
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomParams {
    /// Default geometry rescaled to `grid_size`, with per-case variation
    /// drawn from `seed`.
    pub fn random_case(seed: u64, grid_size: usize, n_slices_dense: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca5e);
        let s = grid_size as f64 / 64.0;
        let g = grid_size as f64;
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let base = [g * u(0.43, 0.53), g * u(0.48, 0.58)];
        let tilt = u(0.0, 2.0 * PI);
        let shift = u(16.0, 22.0) * s;
        let apex = [base[0] + shift * tilt.sin(), base[1] + shift * tilt.cos()];
        let cavity_apex = u(0.72, 0.84);
        let angle_base = PI * u(0.85, 1.05);
        Self {
            grid_size,
            n_slices_dense,
            pixel_spacing: 1.8 * 64.0 / g,
            slice_spacing: 2.0 * 64.0 / n_slices_dense as f64,
            lv_center_path: CenterPath {
                base,
                apex,
                bow: u(-5.0, 5.0) * s,
            },
            cavity: CavityProfile {
                base: u(8.0, 11.0) * s,
                apex_z: cavity_apex,
            },
            wall: WallProfile {
                wall_base: u(3.0, 4.2) * s,
                wall_apex: u(2.6, 3.4) * s,
                apex_z: (cavity_apex + u(0.05, 0.1)).min(0.97),
            },
            rv: RvProfile {
                thickness: u(5.5, 8.5) * s,
                min_thickness: 2.0 * s.max(1.0),
                extent_base: u(150.0, 190.0).to_radians(),
                extent_apex: u(90.0, 120.0).to_radians(),
                angle_base,
                angle_apex: angle_base + u(-0.9, 0.9),
            },
            intensities: Intensities::default(),
            noise_sigma: 0.03,
            seed,
        }
    }

    pub fn r_cavity(&self, z: f64) -> f64 {
        self.cavity.at(z)
    }

    pub fn r_myo(&self, z: f64) -> f64 {
        let ca = self.cavity.apex_z;
        let w = &self.wall;
        if z < ca {
            let u = (z / ca).clamp(0.0, 1.0);
            return self.cavity.at(z) + w.wall_base + u * (w.wall_apex - w.wall_base);
        }
        if z >= w.apex_z {
            return 0.0;
        }
        let u = (z - ca) / (w.apex_z - ca);
        w.wall_apex * (1.0 - u * u).max(0.0).sqrt()
    }

    /// Peak RV thickness at `z`; zero where the LV cavity is absent.
    pub fn rv_thickness(&self, z: f64) -> f64 {
        let rc = self.r_cavity(z);
        if rc <= 0.0 {
            return 0.0;
        }
        let frac = (rc / self.cavity.base).sqrt();
        (self.rv.thickness * frac).max(self.rv.min_thickness)
    }

    pub fn rv_extent(&self, z: f64) -> f64 {
        self.rv.extent(z, self.cavity.apex_z)
    }

    pub fn slice_z(&self, index: usize) -> f64 {
        if self.n_slices_dense <= 1 {
            0.0
        } else {
            index as f64 / (self.n_slices_dense - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.grid_size < 32 {
            return bad(format!("grid_size {} < 32", self.grid_size));
        }
        if self.n_slices_dense < 2 {
            return bad("need at least 2 dense slices".into());
        }
        if !(self.pixel_spacing > 0.0 && self.slice_spacing > 0.0) {
            return bad("spacings must be positive".into());
        }
        if self.cavity.base < 0.0 || !(self.cavity.apex_z > 0.0 && self.cavity.apex_z <= 1.0) {
            return bad("cavity radius must be >= 0 with apex in (0, 1]".into());
        }
        let w = &self.wall;
        if !(w.wall_base > 0.0 && w.wall_apex > 0.0) {
            return bad("myocardial wall must be thicker than zero (r_myo > r_cavity)".into());
        }
        if w.apex_z <= self.cavity.apex_z || w.apex_z > 1.0 {
            return bad("myocardial apex must lie beyond the cavity apex".into());
        }
        if self.rv.thickness < 0.0 || self.rv.min_thickness <= 0.0 {
            return bad("RV thickness must be non-negative".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        let half = self.grid_size as f64 / 2.0;
        let outer = self.cavity.base + w.wall_base.max(w.wall_apex) + self.rv.thickness.max(self.rv.min_thickness);
        if outer >= half {
            return bad(format!("outer heart radius {outer:.2} >= grid_size/2 = {half}"));
        }
        Ok(())
    }

    /// Class of the point `(row, col)` at long-axis position `z` from the
    /// continuous geometry (no pixel-level guarantees applied).
    pub fn classify_point(&self, z: f64, row: f64, col: f64) -> Class {
        let c = self.lv_center_path.at(z);
        let dy = row - c[0];
        let dx = col - c[1];
        let d2 = dy * dy + dx * dx;
        let rc = self.r_cavity(z);
        if rc > 0.0 && d2 <= rc * rc {
            return Class::Lvc;
        }
        let rm = self.r_myo(z);
        if d2 <= rm * rm {
            return Class::Lvm;
        }
        let t = self.rv_thickness(z);
        if t > 0.0 {
            let d = d2.sqrt();
            let ext = self.rv_extent(z);
            let dang = wrap_angle(dy.atan2(dx) - self.rv.angle(z, self.cavity.apex_z));
            if dang.abs() < ext / 2.0 {
                let profile = (PI * dang / ext).cos();
                if d - rm < t * profile {
                    return Class::Rvc;
                }
            }
        }
        Class::Background
    }

    fn torso_inside(&self, row: f64, col: f64) -> bool {
        let g = self.grid_size as f64;
        let a = (row - 0.5 * (g - 1.0)) / (0.46 * g);
        let b = (col - 0.5 * (g - 1.0)) / (0.42 * g);
        a * a + b * b <= 1.0
    }

    fn base_intensity(&self, class: Class, row: f64, col: f64) -> f64 {
        let it = &self.intensities;
        match class {
            Class::Lvc => it.lvc,
            Class::Lvm => it.lvm,
            Class::Rvc => it.rvc,
            Class::Background if self.torso_inside(row, col) => it.torso,
            Class::Background => it.outside,
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Labels of one slice at long-axis position `z`.
///
/// Pixel-centre rasterization of the continuous geometry, plus two
/// guarantees used wherever the cavity exists: the pixel nearest the LV
/// centre is LVC, every 8-neighbour of LVC outside the cavity is LVM, and
/// the RV crescent has at least one pixel.
pub fn rasterize_labels(params: &PhantomParams, z: f64) -> Array2<u8> {
    let g = params.grid_size;
    let mut labels = Array2::from_shape_fn((g, g), |(r, c)| {
        params.classify_point(z, r as f64, c as f64) as u8
    });
    if params.r_cavity(z) <= 0.0 {
        return labels;
    }
    let c = params.lv_center_path.at(z);
    let clamp = |v: f64| (v.round().max(0.0) as usize).min(g - 1);
    labels[[clamp(c[0]), clamp(c[1])]] = Class::Lvc as u8;
    let lvc: Vec<(usize, usize)> = labels
        .indexed_iter()
        .filter(|(_, &v)| v == Class::Lvc as u8)
        .map(|(p, _)| p)
        .collect();
    for (r, col) in lvc {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, col as i64 + dc);
                if rr < 0 || cc < 0 || rr >= g as i64 || cc >= g as i64 {
                    continue;
                }
                let v = &mut labels[[rr as usize, cc as usize]];
                if *v != Class::Lvc as u8 {
                    *v = Class::Lvm as u8;
                }
            }
        }
    }
    if !labels.iter().any(|&v| v == Class::Rvc as u8) {
        let a = params.rv.angle(z, params.cavity.apex_z);
        let rho = params.r_myo(z) + 0.5 * params.rv_thickness(z) + 1.0;
        let p = [c[0] + rho * a.sin(), c[1] + rho * a.cos()];
        let v = &mut labels[[clamp(p[0]), clamp(p[1])]];
        if *v == Class::Background as u8 {
            *v = Class::Rvc as u8;
        }
    }
    labels
}

const SUPERSAMPLE: usize = 4;

/// Noiseless intensities of one slice: 4x4 supersampled class intensities
/// plus the smooth bias field.
fn clean_intensity(params: &PhantomParams, z: f64, phases: [f64; 2]) -> Array2<f64> {
    let g = params.grid_size;
    let gf = g as f64;
    let amp = params.intensities.bias_amplitude;
    Array2::from_shape_fn((g, g), |(r, c)| {
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let rr = r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                let cc = c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                let class = params.classify_point(z, rr, cc);
                acc += params.base_intensity(class, rr, cc);
            }
        }
        let base = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let (u, v) = (r as f64 / gf, c as f64 / gf);
        let bias = amp
            * (2.0 * PI * (0.7 * u + 0.3 * v) + phases[0]).sin()
            * (2.0 * PI * (0.4 * v - 0.25 * z) + phases[1]).cos();
        base + bias
    })
}

/// Dense labelled phantom volume. Bit-identical for identical parameters.
pub fn generate_phantom<T: Real>(params: &PhantomParams) -> Result<Volume<T>> {
    params.validate()?;
    let (g, n) = (params.grid_size, params.n_slices_dense);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Array3::<T>::zeros((n, g, g));
    let mut labels = Array3::<u8>::zeros((n, g, g));
    for k in 0..n {
        let z = params.slice_z(k);
        labels
            .index_axis_mut(Axis(0), k)
            .assign(&rasterize_labels(params, z));
        let clean = clean_intensity(params, z, phases);
        for (dst, &v) in data.index_axis_mut(Axis(0), k).iter_mut().zip(clean.iter()) {
            let e = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *dst = T::cast((v + e).clamp(-1.0, 1.0));
        }
    }
    let spacing = [params.pixel_spacing, params.pixel_spacing, params.slice_spacing];
    Volume::new(data, Some(labels), spacing)
}

/// Indices kept by [`downsample_stack`]: `0, factor, 2*factor, ... <= n-1`.
pub fn kept_indices(n_dense: usize, factor: usize) -> Vec<usize> {
    (0..n_dense).step_by(factor.max(1)).collect()
}

/// Sparse acquisition simulation: keeps every `factor`-th dense slice
/// verbatim, truncating any tail past the last multiple.
pub fn downsample_stack<T: Real>(vol: &Volume<T>, factor: usize) -> Result<SliceStack<T>> {
    if factor < 2 {
        return Err(Error::Parameter(format!("downsample factor {factor} < 2")));
    }
    let n = vol.n_slices();
    if factor >= n {
        return Err(Error::Parameter(format!(
            "factor {factor} leaves fewer than 2 of {n} slices"
        )));
    }
    let idx = kept_indices(n, factor);
    let slices = idx.iter().map(|&i| vol.slice(i).to_owned()).collect();
    let labels = vol
        .labels
        .as_ref()
        .map(|_| idx.iter().map(|&i| vol.label_slice(i).unwrap()).collect());
    let positions = idx.iter().map(|&i| vol.position(i)).collect();
    SliceStack::new(slices, labels, positions, [vol.spacing[0], vol.spacing[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::FOREGROUND;

    fn small() -> PhantomParams {
        let mut p = PhantomParams::default();
        p.n_slices_dense = 16;
        p
    }

    #[test]
    fn default_and_random_params_validate() {
        PhantomParams::default().validate().unwrap();
        for seed in 0..50 {
            PhantomParams::random_case(seed, 64, 64).validate().unwrap();
            PhantomParams::random_case(seed, 32, 32).validate().unwrap();
        }
    }

    #[test]
    fn bad_ordering_is_rejected() {
        let mut p = PhantomParams::default();
        p.wall.wall_base = 0.0;
        assert!(matches!(p.validate(), Err(Error::Parameter(_))));
        let mut p = PhantomParams::default();
        p.grid_size = 16;
        assert!(p.validate().is_err());
        let mut p = PhantomParams::default();
        p.cavity.base = 30.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = PhantomParams {
            seed: 7,
            ..small()
        };
        let a: Volume<f32> = generate_phantom(&p).unwrap();
        let b: Volume<f32> = generate_phantom(&p).unwrap();
        assert_eq!(a, b);
        let c: Volume<f32> = generate_phantom(&PhantomParams { seed: 8, ..p }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn zero_cavity_has_no_lvc() {
        let mut p = small();
        p.cavity.base = 0.0;
        let v: Volume<f32> = generate_phantom(&p).unwrap();
        assert!(v.labels.unwrap().iter().all(|&c| c != Class::Lvc as u8));
    }

    /// Row-span enumeration of the disk, independent of the per-pixel test.
    fn disk_count_oracle(center: [f64; 2], r: f64, g: usize) -> usize {
        let mut n = 0;
        for row in 0..g {
            let dy = row as f64 - center[0];
            if dy.abs() > r {
                continue;
            }
            let half = (r * r - dy * dy).sqrt();
            let lo = (center[1] - half).ceil().max(0.0) as i64;
            let hi = (center[1] + half).floor().min(g as f64 - 1.0) as i64;
            if hi >= lo {
                n += (hi - lo + 1) as usize;
            }
        }
        n
    }

    #[test]
    fn lvc_count_matches_disk_rasterization_at_mid_axis() {
        let p = PhantomParams::default();
        let z = 0.5;
        let labels = rasterize_labels(&p, z);
        let got = labels.iter().filter(|&&v| v == Class::Lvc as u8).count();
        let want = disk_count_oracle(p.lv_center_path.at(z), p.r_cavity(z), p.grid_size);
        assert!(want > 100);
        assert_eq!(got, want);
    }

    #[test]
    fn every_cavity_slice_has_all_foreground_classes_and_closed_wall() {
        for seed in 0..20 {
            let p = PhantomParams::random_case(seed, 64, 64);
            for k in 0..p.n_slices_dense {
                let z = p.slice_z(k);
                let l = rasterize_labels(&p, z);
                if p.r_cavity(z) <= 0.0 {
                    continue;
                }
                for c in FOREGROUND {
                    assert!(l.iter().any(|&v| v == c as u8), "seed {seed} slice {k} lacks {c:?}");
                }
                // every LVC pixel on the cavity boundary touches LVM
                let g = p.grid_size as i64;
                for ((r, col), &v) in l.indexed_iter() {
                    if v != Class::Lvc as u8 {
                        continue;
                    }
                    let mut boundary = false;
                    let mut touches = false;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (rr, cc) = (r as i64 + dr, col as i64 + dc);
                            if rr < 0 || cc < 0 || rr >= g || cc >= g {
                                continue;
                            }
                            let n = l[[rr as usize, cc as usize]];
                            boundary |= n != Class::Lvc as u8;
                            touches |= n == Class::Lvm as u8;
                        }
                    }
                    assert!(!boundary || touches);
                }
            }
        }
    }

    #[test]
    fn slices_past_apex_are_background() {
        let p = PhantomParams::default();
        let l = rasterize_labels(&p, 0.99);
        assert!(l.iter().all(|&v| v == 0));
    }

    #[test]
    fn intensities_are_clipped() {
        let mut p = small();
        p.noise_sigma = 0.8;
        let v: Volume<f64> = generate_phantom(&p).unwrap();
        assert!(v.data.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn downsample_selects_exact_slices() {
        let mut p = small();
        p.n_slices_dense = 9;
        let v: Volume<f32> = generate_phantom(&p).unwrap();
        let s = downsample_stack(&v, 2).unwrap();
        assert_eq!(s.len(), 5);
        for (j, i) in [0, 2, 4, 6, 8].into_iter().enumerate() {
            assert_eq!(s.slices[j], v.slice(i));
            assert_eq!(s.positions[j], v.position(i));
            assert_eq!(s.labels.as_ref().unwrap()[j], v.label_slice(i).unwrap());
        }
        assert!(downsample_stack(&v, 9).is_err());
        assert!(downsample_stack(&v, 1).is_err());
        // truncation: 9 slices, factor 3 keeps 0, 3, 6
        assert_eq!(kept_indices(9, 3), vec![0, 3, 6]);
    }
}
