//! Segmentation-as-proxy evaluation of reconstructed volumes.

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::metrics::{aggregate_cases, dice, psnr, score_labels, ssim, MetricReport, Stat, ALL_LABELS};
use crate::planes::{lax_plane_set, sample_plane, View};
use crate::recon::stack_labels;
use crate::segmentation::SegModel;
use crate::volume::{LabelMask, Volume, FOREGROUND};
use crate::Real;

/// Distance unit of every report produced here.
pub const DISTANCE_UNIT: &str = "mm";

/// Label field from the evaluator applied to every slice of `vol`.
pub fn evaluator_labels<T: Real>(vol: &Volume<T>, evaluator: &SegModel<T>) -> Result<Array3<u8>> {
    let mut masks: Vec<LabelMask> = Vec::with_capacity(vol.n_slices());
    for (k, chunk) in vol.data.axis_chunks_iter(Axis(0), 16).enumerate() {
        masks.extend(evaluator.segment_batch(chunk).map_err(|e| e.at_slice(16 * k))?);
    }
    Ok(stack_labels(&masks))
}

/// `[slice, row, col]` spacing in the order the distance transform expects.
pub fn volume_spacing<T>(vol: &Volume<T>) -> [f64; 3] {
    [vol.spacing[2], vol.spacing[0], vol.spacing[1]]
}

/// One method's output volumes, paired case by case with the ground truth.
pub struct MethodVolumes<'a, T> {
    pub name: &'a str,
    pub volumes: &'a [Volume<T>],
}

fn check_pairing<T: Real>(truth: &[Volume<T>], m: &MethodVolumes<'_, T>) -> Result<()> {
    if m.volumes.len() != truth.len() {
        return Err(Error::Contract(format!(
            "method {} has {} volumes for {} cases",
            m.name,
            m.volumes.len(),
            truth.len()
        )));
    }
    for (v, t) in m.volumes.iter().zip(truth) {
        if v.data.dim() != t.data.dim() {
            return Err(Error::Contract(format!(
                "method {}: volume shape {:?} vs ground truth {:?}",
                m.name,
                v.data.dim(),
                t.data.dim()
            )));
        }
        if t.labels.is_none() {
            return Err(Error::Contract("ground truth volume without labels".into()));
        }
    }
    Ok(())
}

/// Per-class 3D overlap and surface metrics of the evaluator's segmentation
/// of each method's images against the ground-truth labels.
pub fn evaluate_generation<T: Real>(
    truth: &[Volume<T>],
    methods: &[MethodVolumes<'_, T>],
    evaluator: &SegModel<T>,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(DISTANCE_UNIT);
    for m in methods {
        check_pairing(truth, m)?;
        let mut cases = Vec::with_capacity(truth.len());
        for (v, t) in m.volumes.iter().zip(truth) {
            let pred = evaluator_labels(v, evaluator)?;
            let gt = t.labels.as_ref().expect("checked");
            cases.push(score_labels(pred.view().into_dyn(), gt.view().into_dyn(), &volume_spacing(t))?);
        }
        aggregate_cases(&mut report, m.name, &cases);
    }
    Ok(report)
}

/// Mean of the foreground classes' 2D DICE; classes absent from both masks
/// count as 1.
pub fn foreground_dice(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    let mut s = 0.0;
    for c in FOREGROUND {
        s += dice(
            pred.class_mask(c).view().into_dyn(),
            truth.class_mask(c).view().into_dyn(),
        )?;
    }
    Ok(s / FOREGROUND.len() as f64)
}

/// Mean 3D foreground DICE of a label field.
pub fn foreground_dice_3d(pred: &Array3<u8>, truth: &Array3<u8>) -> Result<f64> {
    let mut s = 0.0;
    for c in FOREGROUND {
        let c = c as u8;
        s += dice(pred.mapv(|v| v == c).view().into_dyn(), truth.mapv(|v| v == c).view().into_dyn())?;
    }
    Ok(s / FOREGROUND.len() as f64)
}

/// Per-slice 2D foreground DICE of the evaluator on each method's slices,
/// pooled over all cases: `method -> (mean, std, n)` in a report with one
/// `ALL_LABELS` row per method.
pub fn slice_dice_report<T: Real>(
    truth: &[Volume<T>],
    methods: &[MethodVolumes<'_, T>],
    evaluator: &SegModel<T>,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(DISTANCE_UNIT);
    for m in methods {
        check_pairing(truth, m)?;
        let mut values = Vec::new();
        for (v, t) in m.volumes.iter().zip(truth) {
            let pred = evaluator_labels(v, evaluator)?;
            let gt = t.labels.as_ref().expect("checked");
            for (p, g) in pred.axis_iter(Axis(0)).zip(gt.axis_iter(Axis(0))) {
                let p = LabelMask::new(p.to_owned())?;
                let g = LabelMask::new(g.to_owned())?;
                values.push(foreground_dice(&p, &g)?);
            }
        }
        if !values.is_empty() {
            report.insert(m.name, ALL_LABELS, "DICE", Stat::from_values(&values, 0));
        }
    }
    Ok(report)
}

/// Reconstruction accuracy: per-case 3D foreground DICE of each method's own
/// label field, plus 2D foreground DICE on the three long-axis analogue
/// planes fitted to the ground truth.
pub fn reconstruction_report<T: Real>(truth: &[Volume<T>], methods: &[MethodVolumes<'_, T>]) -> Result<MetricReport> {
    let mut report = MetricReport::new(DISTANCE_UNIT);
    let planes = truth.iter().map(lax_plane_set).collect::<Result<Vec<_>>>()?;
    for m in methods {
        check_pairing(truth, m)?;
        let mut vol_dice = Vec::new();
        let mut view_dice: Vec<Vec<f64>> = vec![Vec::new(); View::ALL.len()];
        for ((v, t), ps) in m.volumes.iter().zip(truth).zip(&planes) {
            let pred = v
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("method {} volume without labels", m.name)))?;
            vol_dice.push(foreground_dice_3d(pred, t.labels.as_ref().expect("checked"))?);
            for (k, p) in ps.iter().enumerate() {
                let (_, a) = sample_plane(v, p);
                let (_, b) = sample_plane(t, p);
                view_dice[k].push(foreground_dice(&a, &b)?);
            }
        }
        report.insert(m.name, "3D", "DICE", Stat::from_values(&vol_dice, 0));
        for (k, view) in View::ALL.iter().enumerate() {
            report.insert(m.name, view.name(), "DICE", Stat::from_values(&view_dice[k], 0));
        }
    }
    Ok(report)
}

/// PSNR and SSIM of reconstructed images against originals over `[-1, 1]`
/// intensities.
pub fn image_fidelity<T: Real>(originals: &[ndarray::Array2<T>], rebuilt: &[ndarray::Array2<T>]) -> Result<(Stat, Stat)> {
    if originals.len() != rebuilt.len() || originals.is_empty() {
        return Err(Error::Contract("image fidelity needs matched, non-empty lists".into()));
    }
    let mut p = Vec::with_capacity(originals.len());
    let mut s = Vec::with_capacity(originals.len());
    for (a, b) in originals.iter().zip(rebuilt) {
        p.push(psnr(a.view(), b.view(), 2.0)?);
        s.push(ssim(a.view(), b.view(), 2.0)?);
    }
    Ok((Stat::from_values(&p, 0), Stat::from_values(&s, 0)))
}
