//! Overlap, surface-distance and image-fidelity measures plus report
//! aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Dimension, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Class, FOREGROUND};
use crate::Real;

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("mask shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn overlap(a: &ArrayViewD<'_, bool>, b: &ArrayViewD<'_, bool>) -> (usize, usize, usize) {
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    });
    (inter, na, nb)
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: ArrayViewD<'_, bool>, b: ArrayViewD<'_, bool>) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let (i, na, nb) = overlap(&a, &b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (na + nb) as f64)
}

/// Volumetric overlap error in percent; two empty masks score 0.
pub fn voe(a: ArrayViewD<'_, bool>, b: ArrayViewD<'_, bool>) -> Result<f64> {
    check_shapes(a.shape(), b.shape())?;
    let (i, na, nb) = overlap(&a, &b);
    let union = na + nb - i;
    if union == 0 {
        return Ok(0.0);
    }
    Ok((1.0 - i as f64 / union as f64) * 100.0)
}

/// Foreground voxels with a background face-neighbour or on the array edge.
pub fn boundary(mask: ArrayViewD<'_, bool>) -> ArrayD<bool> {
    let shape = mask.shape().to_vec();
    let mut out = ArrayD::from_elem(IxDyn(&shape), false);
    for (idx, &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let mut edge = false;
        let mut probe = idx.slice().to_vec();
        'axes: for ax in 0..shape.len() {
            let p = probe[ax];
            if p == 0 || p + 1 == shape[ax] {
                edge = true;
                break;
            }
            for q in [p - 1, p + 1] {
                probe[ax] = q;
                if !mask[IxDyn(&probe)] {
                    edge = true;
                    probe[ax] = p;
                    break 'axes;
                }
            }
            probe[ax] = p;
        }
        out[idx] = edge;
    }
    out
}

/// Exact squared Euclidean distance to the nearest `true` site, with
/// per-axis spacing. Lines without sites stay at +inf.
pub fn squared_distance_transform(sites: ArrayViewD<'_, bool>, spacing: &[f64]) -> ArrayD<f64> {
    assert_eq!(sites.ndim(), spacing.len(), "one spacing per axis");
    let mut d = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let mut buf = Vec::new();
    for (ax, &sp) in spacing.iter().enumerate() {
        for mut lane in d.lanes_mut(Axis(ax)) {
            buf.clear();
            buf.extend(lane.iter().copied());
            let out = envelope_1d(&buf, sp);
            for (dst, v) in lane.iter_mut().zip(out) {
                *dst = v;
            }
        }
    }
    d
}

/// Lower envelope of parabolas `f(q) + (s (p - q))^2` over finite sites.
fn envelope_1d(f: &[f64], s: f64) -> Vec<f64> {
    let n = f.len();
    let s2 = s * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let (qf, rf) = (q as f64, r as f64);
                    let x = ((f[q] + s2 * qf * qf) - (f[r] + s2 * rf * rf)) / (2.0 * s2 * (qf - rf));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(x);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut out = vec![0.0; n];
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let dq = p as f64 - v[k] as f64;
        *o = f[v[k]] + s2 * dq * dq;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// Mean distance from the boundary of A to the boundary of B (directed).
    pub asd: f64,
    pub hd: f64,
    pub assd: f64,
}

fn directed(from: &ArrayD<bool>, to_dist: &ArrayD<f64>) -> (f64, f64, usize) {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0);
    Zip::from(from).and(to_dist).for_each(|&b, &d2| {
        if b {
            let d = d2.sqrt();
            sum += d;
            max = max.max(d);
            n += 1;
        }
    });
    (sum, max, n)
}

/// Boundary distances between two non-empty masks in spacing units.
pub fn surface_distances(a: ArrayViewD<'_, bool>, b: ArrayViewD<'_, bool>, spacing: &[f64]) -> Result<SurfaceDistances> {
    check_shapes(a.shape(), b.shape())?;
    if spacing.len() != a.ndim() {
        return Err(Error::Contract(format!("{} spacings for a {}-D mask", spacing.len(), a.ndim())));
    }
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Err(Error::UndefinedMetric("surface distance of an empty mask".into()));
    }
    let (ba, bb) = (boundary(a.view()), boundary(b.view()));
    let (da, db) = (
        squared_distance_transform(ba.view(), spacing),
        squared_distance_transform(bb.view(), spacing),
    );
    let (sab, mab, nab) = directed(&ba, &db);
    let (sba, mba, nba) = directed(&bb, &da);
    let (mean_ab, mean_ba) = (sab / nab as f64, sba / nba as f64);
    Ok(SurfaceDistances {
        asd: mean_ab,
        hd: mab.max(mba),
        assd: (mean_ab + mean_ba) / 2.0,
    })
}

fn check_images<T: Real>(x: &ArrayView2<'_, T>, y: &ArrayView2<'_, T>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Contract(format!("image shapes {:?} and {:?}", x.dim(), y.dim())));
    }
    Ok(())
}

/// `10 log10(range^2 / mse)`; identical images give `+inf`.
pub fn psnr<T: Real>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>, data_range: f64) -> Result<f64> {
    check_images(&x, &y)?;
    if x.is_empty() {
        return Err(Error::UndefinedMetric("psnr of empty images".into()));
    }
    let mse = Zip::from(&x)
        .and(&y)
        .fold(0.0f64, |acc, &a, &b| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            acc + d * d
        })
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| g[i] * g[j] / (total * total))
}

/// Mean SSIM over all fully contained 7x7 Gaussian windows.
pub fn ssim<T: Real>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>, data_range: f64) -> Result<f64> {
    check_images(&x, &y)?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::UndefinedMetric(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let xf = x.mapv(|v| v.to_f64_lossy());
    let yf = y.mapv(|v| v.to_f64_lossy());
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((a, b), g) in xf
                .slice(ndarray::s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW])
                .iter()
                .zip(yf.slice(ndarray::s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW]).iter())
                .zip(win.iter())
            {
                mx += g * a;
                my += g * b;
                xx += g * a * a;
                yy += g * b * b;
                xy += g * a * b;
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Cases where the metric was undefined and left out.
    pub excluded: usize,
}

impl Stat {
    /// Population mean and standard deviation.
    pub fn from_values(values: &[f64], excluded: usize) -> Self {
        let n = values.len();
        assert!(n > 0, "statistics of an empty sample");
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n, excluded }
    }
}

pub const ALL_LABELS: &str = "All labels";
pub const METRIC_NAMES: [&str; 5] = ["DICE", "VOE", "ASD", "HD", "ASSD"];

/// method -> class -> metric -> statistics, plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metadata: BTreeMap<String, String>,
    /// Distance unit used by ASD/HD/ASSD.
    pub distance_unit: String,
    pub rows: BTreeMap<String, BTreeMap<String, BTreeMap<String, Stat>>>,
    /// Method display order.
    pub methods: Vec<String>,
}

impl MetricReport {
    pub fn new(distance_unit: &str) -> Self {
        Self {
            distance_unit: distance_unit.to_string(),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, method: &str, class: &str, metric: &str, stat: Stat) {
        if !self.methods.iter().any(|m| m == method) {
            self.methods.push(method.to_string());
        }
        self.rows
            .entry(method.to_string())
            .or_default()
            .entry(class.to_string())
            .or_default()
            .insert(metric.to_string(), stat);
    }

    pub fn get(&self, method: &str, class: &str, metric: &str) -> Option<Stat> {
        self.rows.get(method)?.get(class)?.get(metric).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    fn class_order(&self, method: &str) -> Vec<String> {
        let Some(classes) = self.rows.get(method) else {
            return Vec::new();
        };
        let mut order: Vec<String> = std::iter::once(ALL_LABELS)
            .chain(FOREGROUND.iter().map(|c| c.name()))
            .filter(|c| classes.contains_key(*c))
            .map(String::from)
            .collect();
        let rest: Vec<String> = classes.keys().filter(|k| !order.contains(k)).cloned().collect();
        order.extend(rest);
        order
    }

    fn metric_order(&self) -> Vec<String> {
        let mut seen: Vec<String> = METRIC_NAMES.iter().map(|s| s.to_string()).collect();
        for classes in self.rows.values() {
            for metrics in classes.values() {
                for m in metrics.keys() {
                    if !seen.contains(m) {
                        seen.push(m.clone());
                    }
                }
            }
        }
        seen.retain(|m| {
            self.rows
                .values()
                .any(|c| c.values().any(|ms| ms.contains_key(m)))
        });
        seen
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,class,metric,mean,std,n,excluded\n");
        for method in &self.methods {
            for class in self.class_order(method) {
                for metric in self.metric_order() {
                    if let Some(s) = self.get(method, &class, &metric) {
                        let _ = writeln!(out, "{method},{class},{metric},{},{},{},{}", s.mean, s.std, s.n, s.excluded);
                    }
                }
            }
        }
        out
    }

    /// Class-major table: one block of method rows per class.
    pub fn to_markdown(&self) -> String {
        let metrics = self.metric_order();
        let mut out = String::new();
        let _ = write!(out, "| Class | Method |");
        for m in &metrics {
            let _ = write!(out, " {m} |");
        }
        out.push('\n');
        out.push_str("|---|---|");
        for _ in &metrics {
            out.push_str("---|");
        }
        out.push('\n');
        let mut classes: Vec<String> = Vec::new();
        for method in &self.methods {
            for c in self.class_order(method) {
                if !classes.contains(&c) {
                    classes.push(c);
                }
            }
        }
        for class in &classes {
            for method in &self.methods {
                if !self.rows.get(method).is_some_and(|c| c.contains_key(class)) {
                    continue;
                }
                let _ = write!(out, "| {class} | {method} |");
                for m in &metrics {
                    match self.get(method, class, m) {
                        Some(s) => {
                            let _ = write!(out, " {:.3} ± {:.3} |", s.mean, s.std);
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
        }
        if !self.distance_unit.is_empty() {
            let _ = writeln!(out, "\nDistances in {}.", self.distance_unit);
        }
        out
    }
}

/// Per-class overlap and distance metrics of one predicted label volume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseMetrics {
    /// class name -> metric -> value; `None` where undefined.
    pub values: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

/// Scores a predicted label field against ground truth for every foreground
/// class. The "All labels" entry averages the defined per-class values.
pub fn score_labels(pred: ArrayViewD<'_, u8>, truth: ArrayViewD<'_, u8>, spacing: &[f64]) -> Result<CaseMetrics> {
    check_shapes(pred.shape(), truth.shape())?;
    let mut values: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
    for class in FOREGROUND {
        let p = pred.mapv(|v| v == class as u8);
        let t = truth.mapv(|v| v == class as u8);
        let mut m = BTreeMap::new();
        m.insert("DICE".to_string(), Some(dice(p.view(), t.view())?));
        m.insert("VOE".to_string(), Some(voe(p.view(), t.view())?));
        match surface_distances(p.view(), t.view(), spacing) {
            Ok(sd) => {
                m.insert("ASD".into(), Some(sd.asd));
                m.insert("HD".into(), Some(sd.hd));
                m.insert("ASSD".into(), Some(sd.assd));
            }
            Err(Error::UndefinedMetric(_)) => {
                for k in ["ASD", "HD", "ASSD"] {
                    m.insert(k.into(), None);
                }
            }
            Err(e) => return Err(e),
        }
        values.insert(class.name().to_string(), m);
    }
    let mut all = BTreeMap::new();
    for metric in METRIC_NAMES {
        let defined: Vec<f64> = values.values().filter_map(|m| m[metric]).collect();
        all.insert(
            metric.to_string(),
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        );
    }
    values.insert(ALL_LABELS.to_string(), all);
    Ok(CaseMetrics { values })
}

/// Folds per-case metrics of one method into the report.
pub fn aggregate_cases(report: &mut MetricReport, method: &str, cases: &[CaseMetrics]) {
    let mut classes: Vec<String> = vec![ALL_LABELS.to_string()];
    classes.extend(FOREGROUND.iter().map(|c: &Class| c.name().to_string()));
    for class in &classes {
        for metric in METRIC_NAMES {
            let mut vals = Vec::new();
            let mut excluded = 0;
            for case in cases {
                match case.values.get(class).and_then(|m| m.get(metric)) {
                    Some(Some(v)) => vals.push(*v),
                    _ => excluded += 1,
                }
            }
            if !vals.is_empty() {
                report.insert(method, class, metric, Stat::from_values(&vals, excluded));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn m(a: Array2<u8>) -> ArrayD<bool> {
        a.mapv(|v| v != 0).into_dyn()
    }

    #[test]
    fn hand_counted_overlap() {
        let a = m(array![[1, 1, 0]]);
        let b = m(array![[1, 0, 0]]);
        assert!((dice(a.view(), b.view()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(voe(a.view(), b.view()).unwrap(), 50.0);
        let e = m(array![[0, 0, 0]]);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(voe(e.view(), e.view()).unwrap(), 0.0);
        let c = m(array![[0, 0, 1]]);
        assert_eq!(dice(a.view(), c.view()).unwrap(), 0.0);
        assert_eq!(voe(a.view(), c.view()).unwrap(), 100.0);
        assert!(dice(a.view(), m(array![[1, 1]]).view()).is_err());
    }

    #[test]
    fn single_pixels_three_apart() {
        let mut a = Array2::<u8>::zeros((5, 8));
        let mut b = a.clone();
        a[[2, 1]] = 1;
        b[[2, 4]] = 1;
        let d = surface_distances(m(a).view(), m(b).view(), &[1.0, 1.0]).unwrap();
        assert_eq!((d.asd, d.hd, d.assd), (3.0, 3.0, 3.0));
    }

    #[test]
    fn empty_mask_is_undefined() {
        let a = m(Array2::zeros((4, 4)));
        let mut b = Array2::<u8>::zeros((4, 4));
        b[[1, 1]] = 1;
        assert!(matches!(
            surface_distances(a.view(), m(b).view(), &[1.0, 1.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn boundary_excludes_interior() {
        let a = m(Array2::from_elem((5, 5), 1));
        let b = boundary(a.view());
        assert!(!b[[2, 2]]);
        assert!(b[[0, 2]]);
        assert_eq!(b.iter().filter(|&&v| v).count(), 16);
    }

    #[test]
    fn anisotropic_spacing_scales_distance() {
        let mut a = Array2::<u8>::zeros((6, 3));
        let mut b = a.clone();
        a[[0, 1]] = 1;
        b[[4, 1]] = 1;
        let d = surface_distances(m(a).view(), m(b).view(), &[2.5, 1.0]).unwrap();
        assert_eq!(d.hd, 10.0);
    }

    #[test]
    fn psnr_formula() {
        let x = Array2::<f64>::zeros((4, 4));
        let y = Array2::<f64>::from_elem((4, 4), 0.1);
        assert!((psnr(x.view(), y.view(), 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(x.view(), x.view(), 2.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_constant_images() {
        let x = Array2::<f64>::from_elem((10, 10), 0.2);
        let y = Array2::<f64>::from_elem((10, 10), 0.2 + 1.0);
        let c1 = (0.01f64 * 2.0).powi(2);
        let want = (2.0 * 0.2 * 1.2 + c1) / (0.04 + 1.44 + c1);
        assert!((ssim(x.view(), y.view(), 2.0).unwrap() - want).abs() < 1e-12);
        assert!((ssim(x.view(), x.view(), 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_json_round_trip_and_layout() {
        let mut r = MetricReport::new("mm");
        r.metadata.insert("dataset".into(), "phantom".into());
        let truth = array![[0u8, 1, 2], [3, 1, 2]].into_dyn();
        let pred = array![[0u8, 1, 1], [3, 2, 2]].into_dyn();
        let case = score_labels(pred.view(), truth.view(), &[1.0, 1.0]).unwrap();
        aggregate_cases(&mut r, "Original", &[case.clone()]);
        aggregate_cases(&mut r, "nn", &[case]);
        let back = MetricReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let md = r.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| LVC |")).count(), 2);
        assert!(MetricReport::new("mm").is_empty());
    }
}
