//! Interpolation of per-slice latent codes.

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::Real;

/// Angles below this use the linear fallback.
pub const SLERP_MIN_ANGLE: f64 = 1e-4;

/// Complete code of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple<T> {
    pub sem: Array1<T>,
    pub mor: Array1<T>,
    pub x_t: Array2<T>,
    /// Index in the output volume.
    pub slice_index: usize,
    /// Through-plane position in mm.
    pub position: f64,
}

fn check_order(i: usize, j: usize, k: usize) -> Result<Frac> {
    if i >= j {
        return Err(Error::Contract(format!("interpolation needs i < j, got {i} >= {j}")));
    }
    if k > j - i {
        return Err(Error::Contract(format!("k = {k} outside 0..={}", j - i)));
    }
    Ok(Frac(k as f64 / (j - i) as f64))
}

struct Frac(f64);

/// `(1 - u) a + u b` with `u = k / (j - i)`.
pub fn lerp_code<T: Real>(a: &Array1<T>, b: &Array1<T>, i: usize, j: usize, k: usize) -> Result<Array1<T>> {
    let Frac(u) = check_order(i, j, k)?;
    if a.len() != b.len() {
        return Err(Error::Contract(format!("code dims {} and {}", a.len(), b.len())));
    }
    Ok(lerp_raw(a, b, u))
}

fn lerp_raw<T: Real, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
    u: f64,
) -> ndarray::Array<T, D> {
    if u == 0.0 {
        return a.clone();
    }
    if u == 1.0 {
        return b.clone();
    }
    let (wa, wb) = (T::cast(1.0 - u), T::cast(u));
    Zip::from(a).and(b).map_collect(|&x, &y| wa * x + wb * y)
}

/// Angle between the flattened, normalized codes.
pub fn code_angle<T: Real>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0).acos()
}

/// Great-circle interpolation of stochastic latents. The angle comes from the
/// normalized codes, the combination uses the raw codes.
pub fn slerp_code<T: Real>(a: &Array2<T>, b: &Array2<T>, i: usize, j: usize, k: usize) -> Result<Array2<T>> {
    let Frac(u) = check_order(i, j, k)?;
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("latent shapes {:?} and {:?}", a.dim(), b.dim())));
    }
    let theta = code_angle(a, b);
    if theta > std::f64::consts::PI - SLERP_MIN_ANGLE {
        return Err(Error::DegeneratePair(format!("angle {theta} is antipodal")));
    }
    if theta < SLERP_MIN_ANGLE {
        return Ok(lerp_raw(a, b, u));
    }
    if u == 0.0 {
        return Ok(a.clone());
    }
    if u == 1.0 {
        return Ok(b.clone());
    }
    let s = theta.sin();
    let wa = T::cast(((1.0 - u) * theta).sin() / s);
    let wb = T::cast((u * theta).sin() / s);
    Ok(Zip::from(a).and(b).map_collect(|&x, &y| wa * x + wb * y))
}

/// `n_insert` triples evenly spaced strictly between `a` and `b`.
pub fn interpolate_triples<T: Real>(
    a: &LatentTriple<T>,
    b: &LatentTriple<T>,
    n_insert: usize,
) -> Result<Vec<LatentTriple<T>>> {
    if a.slice_index >= b.slice_index {
        return Err(Error::Contract(format!(
            "slice {} does not precede slice {}",
            a.slice_index, b.slice_index
        )));
    }
    if n_insert < 1 {
        return Err(Error::Parameter("n_insert must be at least 1".into()));
    }
    let j = n_insert + 1;
    (1..=n_insert)
        .map(|k| {
            let u = k as f64 / j as f64;
            Ok(LatentTriple {
                sem: lerp_code(&a.sem, &b.sem, 0, j, k)?,
                mor: lerp_code(&a.mor, &b.mor, 0, j, k)?,
                x_t: slerp_code(&a.x_t, &b.x_t, 0, j, k)?,
                slice_index: a.slice_index + k * (b.slice_index - a.slice_index) / j,
                position: a.position + u * (b.position - a.position),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn lerp_hand_case() {
        let out = lerp_code(&array![0.0, 2.0], &array![4.0, 0.0], 0, 4, 1).unwrap();
        assert_eq!(out, array![1.0, 1.5]);
        assert!(lerp_code(&array![0.0], &array![1.0], 3, 3, 0).is_err());
        assert!(lerp_code(&array![0.0], &array![1.0], 0, 3, 4).is_err());
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let a = array![[1.0f64, 0.0]];
        let b = array![[0.0f64, 1.0]];
        let m = slerp_code(&a, &b, 0, 2, 1).unwrap();
        assert_abs_diff_eq!(m[[0, 0]], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(m[[0, 1]], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn slerp_identical_and_antipodal() {
        let a = array![[0.3f64, -1.0], [2.0, 0.5]];
        for k in 0..=5 {
            assert_eq!(slerp_code(&a, &a, 0, 5, k).unwrap(), a);
        }
        let neg = a.mapv(|v| -v);
        assert!(matches!(slerp_code(&a, &neg, 0, 2, 1), Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn triples_positions_and_codes() {
        let mk = |v: f64, idx, pos| LatentTriple {
            sem: array![v],
            mor: array![v],
            x_t: array![[1.0, v]],
            slice_index: idx,
            position: pos,
        };
        let out = interpolate_triples(&mk(0.0, 0, 0.0), &mk(4.0, 4, 8.0), 3).unwrap();
        let sem: Vec<f64> = out.iter().map(|t| t.sem[0]).collect();
        assert_eq!(sem, vec![1.0, 2.0, 3.0]);
        let pos: Vec<f64> = out.iter().map(|t| t.position).collect();
        assert_eq!(pos, vec![2.0, 4.0, 6.0]);
        assert_eq!(out.iter().map(|t| t.slice_index).collect::<Vec<_>>(), vec![1, 2, 3]);
        let same = interpolate_triples(&mk(1.0, 0, 0.0), &mk(1.0, 2, 1.0), 1).unwrap();
        assert_eq!(same[0].sem, array![1.0]);
        assert_eq!(same[0].x_t, array![[1.0, 1.0]]);
    }
}
