//! Dense volume reconstruction from a sparse slice stack, and the
//! nearest-neighbour and intensity-linear baselines.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{invert_batch, sample_batch, Conditioning, StepSequence};
use crate::encoders::DiffusionModel;
use crate::error::{Error, Result};
use crate::latent::{interpolate_triples, LatentTriple};
use crate::segmentation::SegModel;
use crate::volume::{stack_slices, LabelMask, SliceStack, Volume};
use crate::Real;

/// Images per network batch during encoding and decoding.
pub const DEFAULT_BATCH: usize = 16;

#[derive(Clone, Copy)]
pub struct ReconModels<'a, T> {
    pub diffusion: &'a DiffusionModel<T>,
    /// Source of morphology codes; `None` when the diffusion model is
    /// conditioned on the semantic code alone.
    pub morphology: Option<&'a SegModel<T>>,
    /// Labels every output slice.
    pub evaluator: &'a SegModel<T>,
}

pub struct ReconstructionJob<'a, T> {
    pub stack: &'a SliceStack<T>,
    pub n_insert: usize,
    pub steps: StepSequence,
    pub models: ReconModels<'a, T>,
    /// Place the raw input slices at their positions instead of their
    /// decoded round trips.
    pub keep_originals: bool,
    pub batch_size: usize,
}

impl<'a, T: Real> ReconstructionJob<'a, T> {
    pub fn new(stack: &'a SliceStack<T>, n_insert: usize, steps: StepSequence, models: ReconModels<'a, T>) -> Self {
        Self {
            stack,
            n_insert,
            steps,
            models,
            keep_originals: false,
            batch_size: DEFAULT_BATCH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_insert < 1 {
            return Err(Error::Parameter("n_insert must be at least 1".into()));
        }
        if self.stack.len() < 2 {
            return Err(Error::Parameter(format!(
                "reconstruction needs at least 2 slices, got {}",
                self.stack.len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Output slice spacing: mean input gap divided by `n_insert + 1`.
    pub fn output_spacing(&self) -> f64 {
        output_spacing(&self.stack.positions, self.n_insert + 1)
    }
}

fn output_spacing(positions: &[f64], factor: usize) -> f64 {
    let n = positions.len();
    (positions[n - 1] - positions[0]) / ((n - 1) * factor) as f64
}

/// Positions of the output slices: each gap split into `factor` equal parts.
pub fn output_positions(positions: &[f64], factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(output_len(positions.len(), factor));
    for w in positions.windows(2) {
        for k in 0..factor {
            out.push(w[0] + k as f64 / factor as f64 * (w[1] - w[0]));
        }
    }
    if let Some(&last) = positions.last() {
        out.push(last);
    }
    out
}

/// `n + (n - 1)(factor - 1)` for a non-empty stack.
pub fn output_len(n: usize, factor: usize) -> usize {
    if n == 0 {
        0
    } else {
        n + (n - 1) * (factor - 1)
    }
}

/// Provenance of one reconstructed volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconManifest {
    pub method: String,
    pub input_sha256: String,
    pub n_insert: usize,
    pub steps: Vec<usize>,
    pub keep_originals: bool,
    pub diffusion_checksum: Option<u64>,
    pub morphology_checksum: Option<u64>,
    pub evaluator_checksum: Option<u64>,
    pub positions: Vec<f64>,
}

/// SHA-256 over the little-endian `f32` pixels, positions and spacing.
pub fn stack_hash<T: Real>(stack: &SliceStack<T>) -> String {
    let mut h = Sha256::new();
    for s in &stack.slices {
        for &v in s.iter() {
            h.update((v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    for p in stack.positions.iter().chain(&stack.pixel_spacing) {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_slices<T: Real>(stack: &SliceStack<T>, size: usize) -> Result<()> {
    for (i, s) in stack.slices.iter().enumerate() {
        if s.dim() != (size, size) {
            return Err(Error::Contract(format!("slice shape {:?}, model expects {size}x{size}", s.dim())).at_slice(i));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite pixel".into()).at_slice(i));
        }
    }
    Ok(())
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size).map(move |s| s..(s + size).min(n))
}

/// Encodes every slice to its latent triple. `x_T` comes from inverting the
/// slice under its own codes. Output index of slice `i` is `i * stride`.
pub fn encode_stack<T: Real>(
    stack: &SliceStack<T>,
    models: &ReconModels<'_, T>,
    steps: &StepSequence,
    stride: usize,
    batch_size: usize,
) -> Result<Vec<LatentTriple<T>>> {
    let diff = models.diffusion;
    check_slices(stack, diff.spec.image_size)?;
    let mut out = Vec::with_capacity(stack.len());
    for range in chunks(stack.len(), batch_size.max(1)) {
        let start = range.start;
        let x0 = stack_slices(&stack.slices[range.clone()]);
        let sem = diff.encode_semantic_batch(x0.view()).map_err(|e| e.at_slice(start))?;
        let mor = match models.morphology {
            Some(m) => Some(m.encode_morphology_batch(x0.view()).map_err(|e| e.at_slice(start))?),
            None => None,
        };
        let conds = (0..range.len())
            .map(|r| {
                let m = mor.as_ref().map(|m| m.row(r).to_owned()).unwrap_or_default();
                Conditioning::new(sem.row(r).to_owned(), m).map_err(|e| e.at_slice(start + r))
            })
            .collect::<Result<Vec<_>>>()?;
        let xt = invert_batch(&x0, &conds, diff, &diff.schedule, steps).map_err(|e| e.at_slice(start))?;
        for (r, (c, x)) in conds.into_iter().zip(xt.axis_iter(Axis(0))).enumerate() {
            let i = start + r;
            out.push(LatentTriple {
                sem: c.sem,
                mor: c.mor,
                x_t: x.to_owned(),
                slice_index: i * stride,
                position: stack.positions[i],
            });
        }
    }
    Ok(out)
}

/// Decodes triples to images in batches.
pub fn decode_triples<T: Real>(
    triples: &[LatentTriple<T>],
    diffusion: &DiffusionModel<T>,
    steps: &StepSequence,
    batch_size: usize,
) -> Result<Vec<Array2<T>>> {
    let mut out = Vec::with_capacity(triples.len());
    for range in chunks(triples.len(), batch_size.max(1)) {
        let part = &triples[range];
        let idx = part[0].slice_index;
        let xt = stack_slices(&part.iter().map(|t| t.x_t.clone()).collect::<Vec<_>>());
        let conds = part
            .iter()
            .map(|t| Conditioning::new(t.sem.clone(), t.mor.clone()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_slice(idx))?;
        let x0 = sample_batch(&xt, &conds, diffusion, &diffusion.schedule, steps).map_err(|e| e.at_slice(idx))?;
        out.extend(x0.axis_iter(Axis(0)).map(|v| v.to_owned()));
    }
    Ok(out)
}

fn segment_all<T: Real>(images: &[Array2<T>], model: &SegModel<T>, batch_size: usize) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for range in chunks(images.len(), batch_size.max(1)) {
        let start = range.start;
        let x = stack_slices(&images[range]);
        out.extend(model.segment_batch(x.view()).map_err(|e| e.at_slice(start))?);
    }
    Ok(out)
}

/// Replaces the stack's labels with the evaluator's segmentation of its
/// slices.
pub fn label_stack<T: Real>(stack: &SliceStack<T>, evaluator: &SegModel<T>) -> Result<SliceStack<T>> {
    let labels = segment_all(&stack.slices, evaluator, DEFAULT_BATCH)?;
    SliceStack::new(stack.slices.clone(), Some(labels), stack.positions.clone(), stack.pixel_spacing)
}

fn assemble<T: Real>(
    images: Vec<Array2<T>>,
    labels: Option<Vec<LabelMask>>,
    stack: &SliceStack<T>,
    factor: usize,
) -> Result<Volume<T>> {
    let data = stack_slices(&images);
    let labels = labels.map(|l| {
        let arrays: Vec<Array2<u8>> = l.into_iter().map(LabelMask::into_array).collect();
        stack_slices(&arrays)
    });
    let spacing = [
        stack.pixel_spacing[0],
        stack.pixel_spacing[1],
        output_spacing(&stack.positions, factor),
    ];
    let mut vol = Volume::new(data, labels, spacing)?;
    vol.origin = stack.positions[0];
    Ok(vol)
}

/// Encode, interpolate, decode and segment: `n + (n - 1) n_insert` slices.
pub fn reconstruct_volume<T: Real>(job: &ReconstructionJob<'_, T>) -> Result<(Volume<T>, ReconManifest)> {
    job.validate()?;
    let stack = job.stack;
    let factor = job.n_insert + 1;
    let models = &job.models;
    let encoded = encode_stack(stack, models, &job.steps, factor, job.batch_size)?;
    let mut triples = Vec::with_capacity(output_len(stack.len(), factor));
    for (g, w) in encoded.windows(2).enumerate() {
        triples.push(w[0].clone());
        triples.extend(interpolate_triples(&w[0], &w[1], job.n_insert).map_err(|e| e.at_slice(g * factor))?);
    }
    triples.push(encoded[encoded.len() - 1].clone());
    log::debug!("decoding {} slices", triples.len());

    let mut images = if job.keep_originals {
        let inserted: Vec<_> = triples.iter().filter(|t| t.slice_index % factor != 0).cloned().collect();
        let mut decoded = decode_triples(&inserted, models.diffusion, &job.steps, job.batch_size)?.into_iter();
        triples
            .iter()
            .map(|t| {
                if t.slice_index % factor == 0 {
                    stack.slices[t.slice_index / factor].clone()
                } else {
                    decoded.next().expect("one decoded image per inserted slice")
                }
            })
            .collect()
    } else {
        decode_triples(&triples, models.diffusion, &job.steps, job.batch_size)?
    };
    for (i, img) in images.iter_mut().enumerate() {
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoded image is not finite".into()).at_slice(i));
        }
    }
    let labels = segment_all(&images, models.evaluator, job.batch_size)?;
    let vol = assemble(images, Some(labels), stack, factor)?;
    let manifest = ReconManifest {
        method: if models.diffusion.spec.use_morphology { "dmcvr" } else { "dmcvr-noMor" }.into(),
        input_sha256: stack_hash(stack),
        n_insert: job.n_insert,
        steps: job.steps.as_slice().to_vec(),
        keep_originals: job.keep_originals,
        diffusion_checksum: Some(models.diffusion.store.checksum()),
        morphology_checksum: models.morphology.map(|m| m.store.checksum()),
        evaluator_checksum: Some(models.evaluator.store.checksum()),
        positions: triples.iter().map(|t| t.position).collect(),
    };
    Ok((vol, manifest))
}

fn check_baseline<T: Real>(stack: &SliceStack<T>, factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::Parameter("upsampling factor must be at least 1".into()));
    }
    if stack.is_empty() {
        return Err(Error::Parameter("empty slice stack".into()));
    }
    Ok(())
}

/// Source slice of output slice `k` within a gap: the nearer end, ties to
/// the lower one.
fn nearest_end(k: usize, factor: usize) -> usize {
    usize::from(2 * k > factor)
}

fn nn_labels<T: Real>(stack: &SliceStack<T>, factor: usize) -> Option<Vec<LabelMask>> {
    let labels = stack.labels.as_ref()?;
    let mut out = Vec::with_capacity(output_len(stack.len(), factor));
    for g in 0..stack.len() - 1 {
        out.extend((0..factor).map(|k| labels[g + nearest_end(k, factor)].clone()));
    }
    out.push(labels[stack.len() - 1].clone());
    Some(out)
}

/// Repeats the nearer input slice (intensities and labels).
pub fn reconstruct_nn<T: Real>(stack: &SliceStack<T>, factor: usize) -> Result<Volume<T>> {
    check_baseline(stack, factor)?;
    let n = stack.len();
    let mut images = Vec::with_capacity(output_len(n, factor));
    for g in 0..n - 1 {
        images.extend((0..factor).map(|k| stack.slices[g + nearest_end(k, factor)].clone()));
    }
    images.push(stack.slices[n - 1].clone());
    assemble(images, nn_labels(stack, factor), stack, factor)
}

/// Per-pixel linear intensity interpolation; labels follow the nearest slice.
pub fn reconstruct_linear<T: Real>(stack: &SliceStack<T>, factor: usize) -> Result<Volume<T>> {
    check_baseline(stack, factor)?;
    let n = stack.len();
    let mut images = Vec::with_capacity(output_len(n, factor));
    for g in 0..n - 1 {
        let (a, b) = (&stack.slices[g], &stack.slices[g + 1]);
        for k in 0..factor {
            if k == 0 {
                images.push(a.clone());
                continue;
            }
            let u = k as f64 / factor as f64;
            let (wa, wb) = (T::cast(1.0 - u), T::cast(u));
            images.push(ndarray::Zip::from(a).and(b).map_collect(|&x, &y| wa * x + wb * y));
        }
    }
    images.push(stack.slices[n - 1].clone());
    assemble(images, nn_labels(stack, factor), stack, factor)
}

/// Dense volume restricted to the slices a reconstruction of the kept
/// indices covers, for comparison with an output of [`output_len`] slices.
pub fn covered_slab<T: Real>(dense: &Volume<T>, kept: &[usize]) -> Volume<T> {
    dense.slab(kept[0], kept[kept.len() - 1] + 1)
}

/// Stacks a list of label masks into a 3D label field.
pub fn stack_labels(masks: &[LabelMask]) -> Array3<u8> {
    let arrays: Vec<Array2<u8>> = masks.iter().map(|m| m.as_array().clone()).collect();
    stack_slices(&arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn stack_of(values: &[f32], dim: usize) -> SliceStack<f32> {
        let slices = values.iter().map(|&v| Array2::from_elem((dim, dim), v)).collect();
        let labels = values
            .iter()
            .enumerate()
            .map(|(i, _)| LabelMask::new(Array2::from_elem((dim, dim), (i % 4) as u8)).unwrap())
            .collect();
        let pos = (0..values.len()).map(|i| 4.0 * i as f64).collect();
        SliceStack::new(slices, Some(labels), pos, [1.0, 1.0]).unwrap()
    }

    #[test]
    fn slice_count_and_positions() {
        let s = stack_of(&[0.0, 1.0, 0.5], 4);
        for f in 1..5 {
            let v = reconstruct_nn(&s, f).unwrap();
            assert_eq!(v.n_slices(), 3 + 2 * (f - 1));
            assert_eq!(v.spacing[2], 4.0 / f as f64);
            let p = output_positions(&s.positions, f);
            assert_eq!(p.len(), v.n_slices());
            assert!(p.windows(2).all(|w| w[1] > w[0]));
        }
        assert!(matches!(reconstruct_nn(&s, 0), Err(Error::Parameter(_))));
        assert!(matches!(reconstruct_linear(&s, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn nn_tie_takes_lower_slice() {
        let s = stack_of(&[0.0, 1.0], 2);
        let v = reconstruct_nn(&s, 2).unwrap();
        assert_eq!(v.slice(1)[[0, 0]], 0.0);
        assert_eq!(v.label_slice(1).unwrap(), s.labels.as_ref().unwrap()[0]);
        let v = reconstruct_nn(&s, 4).unwrap();
        let got: Vec<f32> = (0..5).map(|i| v.slice(i)[[0, 0]]).collect();
        assert_eq!(got, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_midpoint_of_constants() {
        let s = stack_of(&[0.2, 0.6], 3);
        let v = reconstruct_linear(&s, 2).unwrap();
        assert!(v.slice(1).iter().all(|&x| (x - 0.4).abs() < 1e-7));
        assert_eq!(v.label_slice(1).unwrap(), s.labels.as_ref().unwrap()[0]);
    }

    #[test]
    fn baselines_keep_inputs_exactly() {
        let s = stack_of(&[0.3, -0.7, 0.11, 0.9], 5);
        for f in [1, 2, 3, 4] {
            for v in [reconstruct_nn(&s, f).unwrap(), reconstruct_linear(&s, f).unwrap()] {
                for (i, sl) in s.slices.iter().enumerate() {
                    assert_eq!(v.slice(i * f), sl.view());
                }
            }
        }
    }

    fn disk(centre: (f64, f64), r: f64, n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, n), |(i, j)| {
            let d = ((i as f64 - centre.0).powi(2) + (j as f64 - centre.1).powi(2)).sqrt();
            if d <= r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn linear_translating_disk_ghosts() {
        let (a, b) = (disk((10.0, 6.0), 3.0, 20), disk((10.0, 14.0), 3.0, 20));
        let s = SliceStack::new(vec![a.clone(), b.clone()], None, vec![0.0, 1.0], [1.0, 1.0]).unwrap();
        let mid = reconstruct_linear(&s, 2).unwrap().slice(1).to_owned();
        for ((i, j), &v) in mid.indexed_iter() {
            let want = 0.5 * a[[i, j]] + 0.5 * b[[i, j]];
            assert_eq!(v, want);
        }
        // two disjoint half-intensity disks, no full-intensity pixel
        assert_eq!(mid[[10, 6]], 0.5);
        assert_eq!(mid[[10, 14]], 0.5);
        assert_eq!(mid[[10, 10]], 0.0);
        assert!(mid.iter().all(|&v| v <= 0.5));
        let halves = mid.iter().filter(|&&v| v == 0.5).count();
        assert_eq!(halves, a.iter().filter(|&&v| v == 1.0).count() * 2);
    }

    #[test]
    fn stack_hash_tracks_content() {
        let s = stack_of(&[0.0, 1.0], 3);
        let mut t = s.clone();
        assert_eq!(stack_hash(&s), stack_hash(&t));
        t.slices[1][[0, 0]] = 0.5;
        assert_ne!(stack_hash(&s), stack_hash(&t));
        assert_eq!(stack_hash(&s).len(), 64);
    }

    mod with_models {
        use super::*;
        use crate::diffusion::make_schedule;
        use crate::encoders::{ConditionalUnetSpec, SCALE_SHIFT};
        use crate::segmentation::SegSpec;

        fn models(use_morphology: bool) -> (DiffusionModel<f32>, SegModel<f32>) {
            let spec = ConditionalUnetSpec {
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
                use_morphology,
                injection: SCALE_SHIFT.into(),
            };
            let diff = DiffusionModel::new(spec, make_schedule(100, 1e-4, 0.02).unwrap(), 3).unwrap();
            let seg_spec = SegSpec {
                image_size: 16,
                base_width: 8,
                channel_mults: vec![1, 2],
                num_res_blocks: 1,
                groups: 4,
                space_to_depth: 2,
                d_mor: 3,
            };
            let mut seg = SegModel::new(seg_spec, 5).unwrap();
            seg.trained = true;
            (diff, seg)
        }

        fn ramp_stack(n: usize) -> SliceStack<f32> {
            let slices = (0..n)
                .map(|k| Array2::from_shape_fn((16, 16), |(i, j)| ((i + 2 * j + 3 * k) as f32 / 40.0).sin()))
                .collect();
            SliceStack::new(slices, None, (0..n).map(|i| 8.0 * i as f64).collect(), [1.5, 1.5]).unwrap()
        }

        #[test]
        fn output_count_and_spacing() {
            let (diff, seg) = models(true);
            let stack = ramp_stack(2);
            let m = ReconModels { diffusion: &diff, morphology: Some(&seg), evaluator: &seg };
            let job = ReconstructionJob::new(&stack, 3, StepSequence::uniform(100, 5).unwrap(), m);
            let (vol, manifest) = reconstruct_volume(&job).unwrap();
            assert_eq!(vol.n_slices(), 5);
            assert_eq!(vol.spacing, [1.5, 1.5, 2.0]);
            assert_eq!(manifest.positions, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
            assert_eq!(manifest.method, "dmcvr");
            let (again, _) = reconstruct_volume(&job).unwrap();
            assert_eq!(vol, again);
        }

        #[test]
        fn identical_neighbours_segment_identically() {
            let (diff, seg) = models(true);
            let base = ramp_stack(1).slices[0].clone();
            let stack = SliceStack::new(vec![base.clone(), base], None, vec![0.0, 5.0], [1.0, 1.0]).unwrap();
            let m = ReconModels { diffusion: &diff, morphology: Some(&seg), evaluator: &seg };
            let (vol, _) = reconstruct_volume(&ReconstructionJob::new(&stack, 2, StepSequence::uniform(100, 4).unwrap(), m)).unwrap();
            let first = vol.label_slice(0).unwrap();
            for i in 1..vol.n_slices() {
                assert_eq!(vol.label_slice(i).unwrap(), first);
            }
        }

        #[test]
        fn kept_originals_are_bit_equal() {
            let (diff, seg) = models(false);
            let stack = ramp_stack(3);
            let m = ReconModels { diffusion: &diff, morphology: None, evaluator: &seg };
            let mut job = ReconstructionJob::new(&stack, 1, StepSequence::uniform(100, 4).unwrap(), m);
            job.keep_originals = true;
            job.batch_size = 2;
            let (vol, manifest) = reconstruct_volume(&job).unwrap();
            assert_eq!(manifest.method, "dmcvr-noMor");
            assert_eq!(manifest.morphology_checksum, None);
            for (i, s) in stack.slices.iter().enumerate() {
                assert_eq!(vol.slice(2 * i), s.view());
            }
        }

        #[test]
        fn bad_slice_reports_its_index() {
            let (diff, seg) = models(true);
            let mut stack = ramp_stack(3);
            stack.slices[2][[0, 0]] = f32::NAN;
            let m = ReconModels { diffusion: &diff, morphology: Some(&seg), evaluator: &seg };
            let err = reconstruct_volume(&ReconstructionJob::new(&stack, 1, StepSequence::uniform(100, 4).unwrap(), m)).unwrap_err();
            assert!(matches!(err, Error::AtSlice { index: 2, .. }), "{err}");
            let one = ramp_stack(1);
            let job = ReconstructionJob::new(&one, 1, StepSequence::uniform(100, 4).unwrap(), m);
            assert!(matches!(reconstruct_volume(&job), Err(Error::Parameter(_))));
        }
    }
}
