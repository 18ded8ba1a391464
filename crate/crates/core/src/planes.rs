//! Long-axis analogue planes and nearest-voxel plane sampling.
//!
//! World coordinates are millimetres along `(slice, row, col)`:
//! `(origin + k dz, r dr, c dc)`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Class, LabelMask, Volume};
use crate::Real;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    scale(a, 1.0 / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "2ch-analogue")]
    TwoChamber,
    #[serde(rename = "3ch-analogue")]
    ThreeChamber,
    #[serde(rename = "4ch-analogue")]
    FourChamber,
}

impl View {
    pub const ALL: [View; 3] = [View::TwoChamber, View::ThreeChamber, View::FourChamber];

    pub fn name(self) -> &'static str {
        match self {
            View::TwoChamber => "2ch",
            View::ThreeChamber => "3ch",
            View::FourChamber => "4ch",
        }
    }

    /// Azimuth about the long axis in degrees.
    pub fn azimuth_deg(self) -> f64 {
        match self {
            View::TwoChamber => 0.0,
            View::ThreeChamber => 60.0,
            View::FourChamber => 120.0,
        }
    }
}

/// Sampling grid on a plane: pixel `(i, j)` sits at
/// `corner + i spacing u + j spacing v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub corner: Vec3,
    pub normal: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub view: View,
}

impl PlaneSpec {
    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        add(
            self.corner,
            add(scale(self.u, i as f64 * self.spacing), scale(self.v, j as f64 * self.spacing)),
        )
    }

    /// Orthonormal basis check.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let unit = |a: Vec3| (dot(a, a) - 1.0).abs() <= tol;
        unit(self.u)
            && unit(self.v)
            && unit(self.normal)
            && dot(self.u, self.v).abs() <= tol
            && dot(self.u, self.normal).abs() <= tol
            && dot(self.v, self.normal).abs() <= tol
    }
}

/// Least-squares long axis through the per-slice LV (cavity plus wall)
/// centroids: returns `(point on axis, unit direction)`.
pub fn long_axis<T: Real>(vol: &Volume<T>) -> Result<(Vec3, Vec3)> {
    let labels = vol
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("long-axis planes need a labelled volume".into()))?;
    let mut pts = Vec::new();
    for (k, sl) in labels.axis_iter(Axis(0)).enumerate() {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for ((r, c), &v) in sl.indexed_iter() {
            if v == Class::Lvc as u8 || v == Class::Lvm as u8 {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
        if n > 0 {
            pts.push([
                vol.position(k),
                sr / n as f64 * vol.spacing[0],
                sc / n as f64 * vol.spacing[1],
            ]);
        }
    }
    if pts.is_empty() {
        return Err(Error::Contract("volume contains no left ventricle".into()));
    }
    let m = pts.len() as f64;
    let mean = pts.iter().fold([0.0; 3], |a, p| add(a, scale(*p, 1.0 / m)));
    if pts.len() < 2 {
        return Ok((mean, [1.0, 0.0, 0.0]));
    }
    // principal direction of the centred points by power iteration
    let mut cov = [[0.0; 3]; 3];
    for p in &pts {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    let mut dir = [1.0, 0.0, 0.0];
    for _ in 0..200 {
        let next = [dot(cov[0], dir), dot(cov[1], dir), dot(cov[2], dir)];
        let n = dot(next, next).sqrt();
        if n == 0.0 {
            break;
        }
        dir = scale(next, 1.0 / n);
    }
    if dir[0] < 0.0 {
        dir = scale(dir, -1.0);
    }
    Ok((mean, dir))
}

/// Three planes containing the long axis at azimuths 0, 60 and 120 degrees,
/// sampled at the in-plane resolution and large enough to cover the volume.
pub fn lax_plane_set<T: Real>(vol: &Volume<T>) -> Result<Vec<PlaneSpec>> {
    let (centre, axis) = long_axis(vol)?;
    // reference direction: the row axis made perpendicular to the long axis
    let mut e1 = [0.0, 1.0, 0.0];
    e1 = add(e1, scale(axis, -dot(e1, axis)));
    if dot(e1, e1) < 1e-12 {
        e1 = add([0.0, 0.0, 1.0], scale(axis, -axis[2]));
    }
    let e1 = normalize(e1);
    let e2 = cross(axis, e1);
    let spacing = vol.spacing[0].min(vol.spacing[1]);
    let (n, r, c) = vol.data.dim();
    let extent = [
        n as f64 * vol.spacing[2],
        r as f64 * vol.spacing[0],
        c as f64 * vol.spacing[1],
    ];
    let half = 0.5 * dot(extent, extent).sqrt();
    let size = 2 * (half / spacing).ceil() as usize + 1;
    Ok(View::ALL
        .iter()
        .map(|&view| {
            let phi = view.azimuth_deg().to_radians();
            let v = normalize(add(scale(e1, phi.cos()), scale(e2, phi.sin())));
            let u = axis;
            let normal = normalize(cross(u, v));
            let offset = (size / 2) as f64 * spacing;
            let corner = add(centre, add(scale(u, -offset), scale(v, -offset)));
            PlaneSpec {
                corner,
                normal,
                u,
                v,
                rows: size,
                cols: size,
                spacing,
                view,
            }
        })
        .collect())
}

/// Voxel whose cell contains world point `p`, if inside the volume.
pub fn nearest_voxel<T: Real>(vol: &Volume<T>, p: Vec3) -> Option<(usize, usize, usize)> {
    let (n, r, c) = vol.data.dim();
    let k = ((p[0] - vol.origin) / vol.spacing[2]).round();
    let i = (p[1] / vol.spacing[0]).round();
    let j = (p[2] / vol.spacing[1]).round();
    let inside = |x: f64, len: usize| x >= 0.0 && x < len as f64;
    (inside(k, n) && inside(i, r) && inside(j, c)).then(|| (k as usize, i as usize, j as usize))
}

/// Nearest-voxel resampling of intensities and labels onto the plane grid.
/// Points outside the volume read as zero intensity and background.
pub fn sample_plane<T: Real>(vol: &Volume<T>, plane: &PlaneSpec) -> (Array2<T>, LabelMask) {
    let mut img = Array2::<T>::zeros((plane.rows, plane.cols));
    let mut lab = Array2::<u8>::zeros((plane.rows, plane.cols));
    for i in 0..plane.rows {
        for j in 0..plane.cols {
            if let Some(idx) = nearest_voxel(vol, plane.point(i, j)) {
                img[[i, j]] = vol.data[idx];
                if let Some(l) = &vol.labels {
                    lab[[i, j]] = l[idx];
                }
            }
        }
    }
    (img, LabelMask::new(lab).expect("volume labels are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Concentric cavity and wall cylinders on a straight axis.
    fn cylinder() -> Volume<f32> {
        let (n, g) = (20, 40);
        let mut lab = Array3::<u8>::zeros((n, g, g));
        for k in 2..18 {
            for r in 0..g {
                for c in 0..g {
                    let d = ((r as f64 - 19.5).powi(2) + (c as f64 - 19.5).powi(2)).sqrt();
                    lab[[k, r, c]] = if d < 7.0 { 1 } else if d < 10.0 { 2 } else { 0 };
                }
            }
        }
        let data = lab.mapv(|v| v as f32 / 3.0);
        Volume::new(data, Some(lab), [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn three_orthonormal_planes_through_axis() {
        let vol = cylinder();
        let planes = lax_plane_set(&vol).unwrap();
        assert_eq!(planes.len(), 3);
        let (centre, _) = long_axis(&vol).unwrap();
        for p in &planes {
            assert!(p.is_orthonormal(1e-9));
            let d = [centre[0] - p.corner[0], centre[1] - p.corner[1], centre[2] - p.corner[2]];
            assert!(dot(d, p.normal).abs() < 1e-9);
            assert_eq!(p.spacing, 1.0);
        }
    }

    #[test]
    fn symmetric_volume_gives_congruent_sections() {
        let vol = cylinder();
        let counts: Vec<usize> = lax_plane_set(&vol)
            .unwrap()
            .iter()
            .map(|p| sample_plane(&vol, p).1.count(Class::Lvc))
            .collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(min > 0.0 && (max - min) / max < 0.1, "{counts:?}");
    }

    #[test]
    fn axis_aligned_plane_reproduces_slice() {
        let vol = cylinder();
        let plane = PlaneSpec {
            corner: [5.0, 0.0, 0.0],
            normal: [1.0, 0.0, 0.0],
            u: [0.0, 1.0, 0.0],
            v: [0.0, 0.0, 1.0],
            rows: 40,
            cols: 40,
            spacing: 1.0,
            view: View::TwoChamber,
        };
        let (img, lab) = sample_plane(&vol, &plane);
        assert_eq!(img, vol.slice(5).to_owned());
        assert_eq!(lab, vol.label_slice(5).unwrap());
    }

    #[test]
    fn plane_outside_volume_is_empty() {
        let vol = cylinder();
        let plane = PlaneSpec {
            corner: [500.0, 0.0, 0.0],
            normal: [1.0, 0.0, 0.0],
            u: [0.0, 1.0, 0.0],
            v: [0.0, 0.0, 1.0],
            rows: 8,
            cols: 8,
            spacing: 1.0,
            view: View::FourChamber,
        };
        let (img, lab) = sample_plane(&vol, &plane);
        assert!(img.iter().all(|&v| v == 0.0));
        assert_eq!(lab.count(Class::Background), 64);
    }

    /// Voxel-to-plane projection: a plane pixel reads a voxel exactly when
    /// its sample point lies inside that voxel's cell.
    fn projected_count(vol: &Volume<f32>, plane: &PlaneSpec, class: Class) -> usize {
        let labels = vol.labels.as_ref().unwrap();
        let half = [0.5 * vol.spacing[2], 0.5 * vol.spacing[0], 0.5 * vol.spacing[1]];
        let reach = dot(half, half).sqrt();
        let mut hits = std::collections::BTreeSet::new();
        for ((k, r, c), &l) in labels.indexed_iter() {
            if l != class as u8 {
                continue;
            }
            let centre = [vol.position(k), r as f64 * vol.spacing[0], c as f64 * vol.spacing[1]];
            let d = [centre[0] - plane.corner[0], centre[1] - plane.corner[1], centre[2] - plane.corner[2]];
            if dot(d, plane.normal).abs() > reach {
                continue;
            }
            let (i0, j0) = (dot(d, plane.u) / plane.spacing, dot(d, plane.v) / plane.spacing);
            let w = reach / plane.spacing;
            let lo = |x: f64| (x - w).floor().max(0.0) as usize;
            for i in lo(i0)..=((i0 + w).ceil() as usize).min(plane.rows - 1) {
                for j in lo(j0)..=((j0 + w).ceil() as usize).min(plane.cols - 1) {
                    let p = plane.point(i, j);
                    if (0..3).all(|a| (p[a] - centre[a]).abs() <= half[a]) {
                        hits.insert((i, j));
                    }
                }
            }
        }
        hits.len()
    }

    #[test]
    fn oblique_section_matches_voxel_projection() {
        use crate::phantom::{generate_phantom, PhantomParams};
        let vol: Volume<f32> = generate_phantom(&PhantomParams::random_case(11, 64, 33)).unwrap();
        for plane in lax_plane_set(&vol).unwrap() {
            let sampled = sample_plane(&vol, &plane).1.count(Class::Lvc) as f64;
            let oracle = projected_count(&vol, &plane, Class::Lvc) as f64;
            assert!(oracle > 50.0);
            assert!((sampled - oracle).abs() <= 0.01 * oracle, "{:?}: {sampled} vs {oracle}", plane.view);
        }
    }
}
