//! Training datasets for the three network roles. Subjects are preprocessed
//! once and kept in memory; every draw then crops, resamples and augments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::trainer::{Dataset, Sample};
use crate::augment::{augment_pair, slice_merge, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pipeline::{expand_bbox, minimal_bbox, slice_stack, slice_targets, View};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::volume::{crop, resample, BoundingBox, Interpolation, Reorientation, Volume};

/// A canonical, preprocessed image with its probabilistic mask.
#[derive(Clone, Debug)]
pub struct Subject {
    pub image: Volume,
    pub mask: Volume,
}

/// Canonicalizes and preprocesses (image, mask) pairs, in parallel.
pub fn prepare_subjects(pairs: &[(Volume, Volume)], cfg: &PreprocessConfig) -> Result<Vec<Subject>> {
    pairs
        .par_iter()
        .map(|(img, mask)| {
            if img.dims() != mask.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs mask {:?}",
                    img.dims(),
                    mask.dims()
                )));
            }
            let r = Reorientation::for_volume(img)?;
            Ok(Subject {
                image: preprocess(&r.apply(img)?, cfg)?,
                mask: r.apply(mask)?,
            })
        })
        .collect()
}

fn tensor(v: &Volume) -> Tensor<f32> {
    Tensor::from_vec(1, v.dims(), v.data().to_vec())
}

fn check(subjects: &[Subject]) -> Result<()> {
    if subjects.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Whole heads at the stage-1 resolution.
pub struct Stage1Data<'a> {
    pub subjects: &'a [Subject],
    pub size: usize,
    pub augment: AugmentConfig,
}

impl<'a> Stage1Data<'a> {
    pub fn new(subjects: &'a [Subject], size: usize, augment: AugmentConfig) -> Result<Self> {
        check(subjects)?;
        Ok(Stage1Data { subjects, size, augment })
    }
}

impl Dataset for Stage1Data<'_> {
    fn len(&self) -> usize {
        self.subjects.len()
    }

    fn items_per_step(&self, batch_size: usize) -> usize {
        batch_size
    }

    fn batch(&self, items: &[usize], _: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        items
            .iter()
            .map(|&i| {
                let s = &self.subjects[i];
                let img = resample(&s.image, [self.size; 3], Interpolation::Trilinear)?;
                let mask = resample(&s.mask, [self.size; 3], Interpolation::Trilinear)?;
                let (img, mask) = augment_pair(&img, &mask, rng, &self.augment);
                Ok(Sample {
                    x: tensor(&img),
                    target: tensor(&mask),
                })
            })
            .collect()
    }
}

/// Ground-truth box with the pipeline margin, each side moved by up to
/// `jitter` of the box edge so training sees imperfect stage-1 crops.
pub fn jittered_box(mask: &Volume, margin: f64, jitter: f64, rng: &mut impl Rng) -> Result<BoundingBox> {
    let d = mask.dims();
    let b = expand_bbox(&minimal_bbox(mask, 0.5)?, margin, d);
    let mut lo = b.lo;
    let mut hi = b.hi;
    for a in 0..3 {
        let span = ((b.hi[a] - b.lo[a]) as f64 * jitter).round() as i64;
        if span > 0 {
            let l = b.lo[a] as i64 + rng.random_range(-span..=span);
            let h = b.hi[a] as i64 + rng.random_range(-span..=span);
            lo[a] = l.clamp(0, d[a] as i64 - 1) as usize;
            hi[a] = h.clamp(lo[a] as i64 + 1, d[a] as i64) as usize;
        }
    }
    Ok(BoundingBox::new(lo, hi))
}

fn cropped_pair(s: &Subject, size: usize, margin: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Result<(Volume, Volume)> {
    let b = jittered_box(&s.mask, margin, jitter, rng)?;
    Ok((
        resample(&crop(&s.image, &b)?, [size; 3], Interpolation::Trilinear)?,
        resample(&crop(&s.mask, &b)?, [size; 3], Interpolation::Trilinear)?,
    ))
}

/// Brain crops at the stage-2 resolution.
pub struct Stage2Data<'a> {
    pub subjects: &'a [Subject],
    pub size: usize,
    pub margin: f64,
    pub jitter: f64,
    pub augment: AugmentConfig,
}

impl<'a> Stage2Data<'a> {
    pub fn new(subjects: &'a [Subject], size: usize, margin: f64, augment: AugmentConfig) -> Result<Self> {
        check(subjects)?;
        Ok(Stage2Data {
            subjects,
            size,
            margin,
            jitter: 0.05,
            augment,
        })
    }
}

impl Dataset for Stage2Data<'_> {
    fn len(&self) -> usize {
        self.subjects.len()
    }

    fn items_per_step(&self, batch_size: usize) -> usize {
        batch_size
    }

    fn batch(&self, items: &[usize], _: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        items
            .iter()
            .map(|&i| {
                let (img, mask) = cropped_pair(&self.subjects[i], self.size, self.margin, self.jitter, rng)?;
                let (img, mask) = augment_pair(&img, &mask, rng, &self.augment);
                Ok(Sample {
                    x: tensor(&img),
                    target: tensor(&mask),
                })
            })
            .collect()
    }
}

/// Five-slice inputs for one view: each step takes one subject's stage-2
/// crop, augments it in 3D, slice-merges along the view axis and draws
/// `batch_size` slices uniformly (background-only slices included).
pub struct SliceData<'a> {
    pub subjects: &'a [Subject],
    pub size: usize,
    pub margin: f64,
    pub jitter: f64,
    pub view: View,
    pub channels: usize,
    pub augment: AugmentConfig,
}

impl<'a> SliceData<'a> {
    pub fn new(subjects: &'a [Subject], size: usize, margin: f64, view: View, augment: AugmentConfig) -> Result<Self> {
        check(subjects)?;
        Ok(SliceData {
            subjects,
            size,
            margin,
            jitter: 0.05,
            view,
            channels: 5,
            augment,
        })
    }
}

impl Dataset for SliceData<'_> {
    fn len(&self) -> usize {
        self.subjects.len()
    }

    fn items_per_step(&self, _: usize) -> usize {
        1
    }

    fn batch(&self, items: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let axis = self.view.axis();
        items
            .iter()
            .map(|&i| {
                let (img, mask) = cropped_pair(&self.subjects[i], self.size, self.margin, self.jitter, rng)?;
                let (img, mask) = augment_pair(&img, &mask, rng, &self.augment);
                let (img, mask) = if rng.random_bool(self.augment.p_apply) {
                    slice_merge(
                        &img,
                        &mask,
                        axis,
                        rng,
                        self.augment.slice_merge_alpha_max,
                        self.augment.slice_merge_normalize,
                    )?
                } else {
                    (img, mask)
                };
                // the verbatim merge weights sum to 1 + alpha; a target above 1
                // would make the focal term unbounded below
                let mask = mask.with_data(mask.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
                let n = img.dims()[axis];
                let slices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
                Ok(Sample {
                    x: slice_stack(&img, axis, self.channels, &slices),
                    target: slice_targets(&mask, axis, &slices),
                })
            })
            .collect()
    }
}
