//! Two-stage prediction: a low-resolution pass finds the brain, a
//! high-resolution pass on the cropped box refines it, either with one 3D net
//! or with three 2D view nets whose slice-wise outputs are median-aggregated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Rank, Tensor, WeightSet};
use crate::postprocess::{clean, BinaryMask};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::volume::{crop, embed, resample, BoundingBox, Interpolation, Reorientation, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3d" => Ok(Mode::ThreeD),
            "2d" => Ok(Mode::TwoD),
            _ => Err(Error::InvalidConfig(format!("mode must be 3d or 2d, not '{s}'"))),
        }
    }
}

/// Slicing direction of a 2D model, named after the plane it sees. On a RAS
/// grid sagittal slices are perpendicular to x, coronal to y, axial to z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sagittal,
    Coronal,
    Axial,
}

impl View {
    pub const ALL: [View; 3] = [View::Sagittal, View::Coronal, View::Axial];

    pub fn axis(self) -> usize {
        match self {
            View::Sagittal => 0,
            View::Coronal => 1,
            View::Axial => 2,
        }
    }

    pub fn role(self) -> &'static str {
        match self {
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
            View::Axial => "axial",
        }
    }
}

pub const ROLE_STAGE1: &str = "stage1";
pub const ROLE_STAGE2: &str = "stage2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stage1_size: usize,
    pub stage2_size: usize,
    pub margin_fraction: f64,
    pub binarize_threshold: f64,
    pub multi_slice_n: usize,
    pub views: Vec<View>,
    pub mode: Mode,
    /// Slices per 2D forward pass; bounds memory, not results.
    pub slice_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stage1_size: 128,
            stage2_size: 256,
            margin_fraction: 0.1,
            binarize_threshold: 0.5,
            multi_slice_n: 5,
            views: View::ALL.to_vec(),
            mode: Mode::ThreeD,
            slice_batch: 32,
        }
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        PipelineConfig {
            stage1_size: 64,
            stage2_size: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage1_size == 0 || self.stage1_size % 32 != 0 || self.stage2_size == 0 || self.stage2_size % 32 != 0 {
            return bad(format!(
                "stage sizes must be positive multiples of 32, got {} and {}",
                self.stage1_size, self.stage2_size
            ));
        }
        if !(self.margin_fraction >= 0.0) {
            return bad("margin_fraction must be non-negative".into());
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad("binarize_threshold must lie in (0, 1)".into());
        }
        if self.multi_slice_n % 2 == 0 {
            return bad("multi_slice_n must be odd".into());
        }
        if self.mode == Mode::TwoD && self.views.is_empty() {
            return bad("2d mode needs at least one view".into());
        }
        if self.slice_batch == 0 {
            return bad("slice_batch must be at least 1".into());
        }
        Ok(())
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn probabilities(net: &Network<f32>, x: Tensor<f32>) -> Result<Vec<f32>> {
    Ok(net.forward(x)?.into_vec().into_iter().map(sigmoid).collect())
}

/// Resamples a preprocessed volume to `size³` and returns sigmoid outputs on
/// that grid.
pub fn predict_stage1(v: &Volume, net: &Network<f32>, size: usize) -> Result<Volume> {
    let low = resample(v, [size; 3], Interpolation::Trilinear)?;
    let p = probabilities(net, Tensor::from_vec(1, [size; 3], low.data().to_vec()))?;
    low.with_data(p)
}

/// Tightest box around all voxels `>= threshold`.
pub fn minimal_bbox(m: &Volume, threshold: f32) -> Result<BoundingBox> {
    let d = m.dims();
    let mut lo = d;
    let mut hi = [0usize; 3];
    for (i, &x) in m.data().iter().enumerate() {
        if x >= threshold {
            let c = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    if hi[0] == 0 {
        return Err(Error::NoForeground);
    }
    Ok(BoundingBox::new(lo, hi))
}

/// Grows each side by `round(margin·edge)` (halves round up), clamped.
pub fn expand_bbox(b: &BoundingBox, margin_fraction: f64, dims: [usize; 3]) -> BoundingBox {
    let mut lo = b.lo;
    let mut hi = b.hi;
    for a in 0..3 {
        let m = (margin_fraction * (b.hi[a] - b.lo[a]) as f64 + 0.5).floor() as usize;
        lo[a] = b.lo[a].saturating_sub(m);
        hi[a] = (b.hi[a] + m).min(dims[a]);
    }
    BoundingBox::new(lo, hi)
}

/// Box on a `low`-sized grid mapped to the native grid covering the same
/// extent (voxel edges scale by `native / low`).
pub fn scale_bbox(b: &BoundingBox, low: [usize; 3], native: [usize; 3]) -> BoundingBox {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        let f = native[a] as f64 / low[a] as f64;
        lo[a] = ((b.lo[a] as f64 * f).floor() as usize).min(native[a] - 1);
        hi[a] = ((b.hi[a] as f64 * f).ceil() as usize).clamp(lo[a] + 1, native[a]);
    }
    BoundingBox::new(lo, hi)
}

/// Crop → `size³` → 3D net → back to the box → embedded in the full grid.
pub fn predict_stage2_3d(v: &Volume, bbox: &BoundingBox, net: &Network<f32>, size: usize) -> Result<Volume> {
    let hi_res = resample(&crop(v, bbox)?, [size; 3], Interpolation::Trilinear)?;
    let p = probabilities(net, Tensor::from_vec(1, [size; 3], hi_res.data().to_vec()))?;
    back_to_native(&hi_res.with_data(p)?, bbox, v.dims())
}

fn back_to_native(p: &Volume, bbox: &BoundingBox, full: [usize; 3]) -> Result<Volume> {
    let boxed = resample(p, bbox.size(), Interpolation::Trilinear)?;
    embed(&boxed, bbox, full)
}

/// Indices of the `n` slices centred on `i`, replicated at the edges.
pub fn slice_window(i: usize, n: usize, count: usize) -> Vec<usize> {
    let h = (n / 2) as i64;
    (-h..=h).map(|o| (i as i64 + o).clamp(0, count as i64 - 1) as usize).collect()
}

/// Axis order that puts `axis` last (the slice axis of a 2D tensor).
fn view_order(axis: usize) -> [usize; 3] {
    match axis {
        0 => [1, 2, 0],
        1 => [0, 2, 1],
        _ => [0, 1, 2],
    }
}

fn flat(c: [usize; 3], d: [usize; 3]) -> usize {
    c[0] + d[0] * (c[1] + d[1] * c[2])
}

/// 2D-net input for the given slices along `axis`, stacked along z: channel
/// `c` holds the `c`-th of the `channels` neighbouring slices (edge slices
/// replicated).
pub fn slice_stack(v: &Volume, axis: usize, channels: usize, slices: &[usize]) -> Tensor<f32> {
    let d = v.dims();
    let order = view_order(axis);
    let (nu, nw) = (d[order[0]], d[order[1]]);
    let count = slices.len();
    let mut t = Tensor::zeros(channels, [nu, nw, count]);
    let plane = nu * nw;
    let data = t.data_mut();
    for (s, &i) in slices.iter().enumerate() {
        for (ch, src) in slice_window(i, channels, d[axis]).into_iter().enumerate() {
            let base = ch * plane * count + s * plane;
            for w in 0..nw {
                for u in 0..nu {
                    let mut c = [0; 3];
                    c[order[0]] = u;
                    c[order[1]] = w;
                    c[axis] = src;
                    data[base + u + nu * w] = v.data()[flat(c, d)];
                }
            }
        }
    }
    t
}

/// Per-slice probabilities from a 2D net that sees the five slices around
/// each position, reassembled into a volume on `v`'s grid.
pub fn predict_slices_2d(v: &Volume, net: &Network<f32>, view: View, slice_batch: usize) -> Result<Volume> {
    let cfg = net.program().config();
    if cfg.rank != Rank::Two {
        return Err(Error::InvalidWeights(format!("{} network is not 2d", view.role())));
    }
    let d = v.dims();
    let axis = view.axis();
    let order = view_order(axis);
    let (nu, nw) = (d[order[0]], d[order[1]]);
    let mut out = vec![0.0f32; v.len()];
    let mut first = 0;
    while first < d[axis] {
        let last = (first + slice_batch.max(1)).min(d[axis]);
        let slices: Vec<usize> = (first..last).collect();
        let p = probabilities(net, slice_stack(v, axis, cfg.in_channels, &slices))?;
        for s in 0..last - first {
            for w in 0..nw {
                for u in 0..nu {
                    let mut c = [0; 3];
                    c[order[0]] = u;
                    c[order[1]] = w;
                    c[axis] = first + s;
                    out[flat(c, d)] = p[s * nu * nw + u + nu * w];
                }
            }
        }
        first = last;
    }
    v.with_data(out)
}

fn lower_median(buf: &mut [f32]) -> f32 {
    let k = (buf.len() - 1) / 2;
    *buf.select_nth_unstable_by(k, f32::total_cmp).1
}

/// The slices of `v` (one channel) at `slices` along `axis`, laid out like
/// [`slice_stack`].
pub fn slice_targets(v: &Volume, axis: usize, slices: &[usize]) -> Tensor<f32> {
    let d = v.dims();
    let order = view_order(axis);
    let (nu, nw) = (d[order[0]], d[order[1]]);
    let mut t = Tensor::zeros(1, [nu, nw, slices.len()]);
    let data = t.data_mut();
    for (s, &i) in slices.iter().enumerate() {
        for w in 0..nw {
            for u in 0..nu {
                let mut c = [0; 3];
                c[order[0]] = u;
                c[order[1]] = w;
                c[axis] = i;
                data[s * nu * nw + u + nu * w] = v.data()[flat(c, d)];
            }
        }
    }
    t
}

/// Voxelwise median over the `n` slices around each slice along `axis`; the
/// window is truncated at the ends and even counts take the lower median.
pub fn multi_slice_aggregate(stack: &Volume, n: usize, axis: usize) -> Volume {
    if n <= 1 {
        return stack.clone();
    }
    let d = stack.dims();
    let strides = [1, d[0], d[0] * d[1]];
    let h = n / 2;
    let mut out = vec![0.0f32; stack.len()];
    let mut buf = Vec::with_capacity(n);
    for (i, o) in out.iter_mut().enumerate() {
        let c = (i / strides[axis]) % d[axis];
        let lo = c.saturating_sub(h);
        let hi = (c + h).min(d[axis] - 1);
        buf.clear();
        buf.extend((lo..=hi).map(|k| stack.data()[i - c * strides[axis] + k * strides[axis]]));
        *o = lower_median(&mut buf);
    }
    stack.with_data(out).expect("same length")
}

/// Voxelwise median of three volumes on the same grid.
pub fn multi_view_aggregate(a: &Volume, b: &Volume, c: &Volume) -> Result<Volume> {
    if a.dims() != b.dims() || a.dims() != c.dims() {
        return Err(Error::ShapeMismatch(format!(
            "view predictions {:?}, {:?}, {:?}",
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| x.max(y).min(x.min(y).max(z)))
        .collect();
    a.with_data(data)
}

/// Median over any number of same-grid volumes (lower median when even).
fn median_of(views: &[Volume]) -> Result<Volume> {
    match views {
        [] => Err(Error::InvalidConfig("no view predictions".into())),
        [one] => Ok(one.clone()),
        [a, b, c] => multi_view_aggregate(a, b, c),
        _ => {
            let mut buf = Vec::with_capacity(views.len());
            let data = (0..views[0].len())
                .map(|i| {
                    buf.clear();
                    buf.extend(views.iter().map(|v| v.data()[i]));
                    lower_median(&mut buf)
                })
                .collect();
            views[0].with_data(data)
        }
    }
}

/// The networks an extraction needs, converted once.
pub struct Extractor {
    pub cfg: PipelineConfig,
    pub preprocess: PreprocessConfig,
    stage1: Network<f32>,
    stage2: Option<Network<f32>>,
    views: Vec<(View, Network<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    /// Binary mask on the input grid.
    pub mask: BinaryMask,
    /// Input image multiplied by the mask.
    pub masked: Volume,
    /// Refined probabilities on the input grid, before binarization.
    pub probability: Volume,
    /// Expanded stage-1 box on the canonical (RAS) native grid.
    pub bbox: BoundingBox,
}

impl Extractor {
    /// Picks the networks `cfg.mode` needs from `weights`.
    pub fn new(weights: &WeightSet, cfg: PipelineConfig, preprocess: PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        preprocess.validate()?;
        let stage1 = Network::from_weights(weights.require(ROLE_STAGE1)?)?;
        let (stage2, views) = match cfg.mode {
            Mode::ThreeD => (Some(Network::from_weights(weights.require(ROLE_STAGE2)?)?), Vec::new()),
            Mode::TwoD => {
                let mut v = Vec::new();
                for &view in &cfg.views {
                    v.push((view, Network::from_weights(weights.require(view.role())?)?));
                }
                (None, v)
            }
        };
        Ok(Extractor {
            cfg,
            preprocess,
            stage1,
            stage2,
            views,
        })
    }

    /// Same networks, different pipeline settings (mode must not change).
    pub fn reconfigured(&self, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != self.cfg.mode {
            return Err(Error::InvalidConfig("reconfiguration cannot switch mode".into()));
        }
        let views = match cfg.mode {
            Mode::ThreeD => Vec::new(),
            Mode::TwoD => cfg
                .views
                .iter()
                .map(|&v| {
                    self.views
                        .iter()
                        .find(|(w, _)| *w == v)
                        .map(|(w, n)| (*w, n.clone()))
                        .ok_or_else(|| Error::InvalidWeights(format!("no '{}' network loaded", v.role())))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Extractor {
            cfg,
            preprocess: self.preprocess.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            views,
        })
    }

    fn prepare(&self, v: &Volume) -> Result<(Reorientation, Volume)> {
        let r = Reorientation::for_volume(v)?;
        let canonical = r.apply(v)?;
        let pre = preprocess(&canonical, &self.preprocess)?;
        Ok((r, pre))
    }

    /// Stage-1 probabilities and the expanded native box they imply.
    fn locate(&self, pre: &Volume) -> Result<(Volume, BoundingBox)> {
        let s1 = self.cfg.stage1_size;
        let low = predict_stage1(pre, &self.stage1, s1)?;
        let b = minimal_bbox(&low, 0.5)?;
        let native = scale_bbox(&b, [s1; 3], pre.dims());
        Ok((low, expand_bbox(&native, self.cfg.margin_fraction, pre.dims())))
    }

    /// High-resolution probabilities on the canonical native grid.
    pub fn refine(&self, pre: &Volume, bbox: &BoundingBox) -> Result<Volume> {
        let s2 = self.cfg.stage2_size;
        match self.cfg.mode {
            Mode::ThreeD => predict_stage2_3d(pre, bbox, self.stage2.as_ref().expect("3d extractor"), s2),
            Mode::TwoD => {
                let hi_res = resample(&crop(pre, bbox)?, [s2; 3], Interpolation::Trilinear)?;
                let per_view = self
                    .views
                    .iter()
                    .map(|(view, net)| {
                        let stack = predict_slices_2d(&hi_res, net, *view, self.cfg.slice_batch)?;
                        Ok(multi_slice_aggregate(&stack, self.cfg.multi_slice_n, view.axis()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                back_to_native(&median_of(&per_view)?, bbox, pre.dims())
            }
        }
    }

    fn finish(&self, v: &Volume, r: &Reorientation, probability: Volume, bbox: BoundingBox) -> Result<Extraction> {
        let binary = clean(&BinaryMask::from_volume(&probability, self.cfg.binarize_threshold as f32));
        let mask_canonical = binary.to_volume(&probability)?;
        let mask_native = r.invert(&mask_canonical)?;
        let probability = r.invert(&probability)?;
        let mask = BinaryMask::from_volume(&mask_native, 0.5);
        let masked = v.with_data(v.data().iter().zip(mask.bits()).map(|(&x, &m)| if m { x } else { 0.0 }).collect())?;
        Ok(Extraction {
            mask,
            masked,
            probability,
            bbox,
        })
    }

    /// The full two-stage extraction.
    pub fn extract(&self, v: &Volume) -> Result<Extraction> {
        let (r, pre) = self.prepare(v)?;
        let (_, bbox) = self.locate(&pre)?;
        let p = self.refine(&pre, &bbox)?;
        self.finish(v, &r, p, bbox)
    }

    /// Stage 1 alone, upsampled to the input grid; the baseline the second
    /// stage has to beat.
    pub fn extract_stage1_only(&self, v: &Volume) -> Result<Extraction> {
        let (r, pre) = self.prepare(v)?;
        let (low, bbox) = self.locate(&pre)?;
        let p = resample(&low, pre.dims(), Interpolation::Trilinear)?;
        self.finish(v, &r, p, bbox)
    }
}
