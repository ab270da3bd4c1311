//! The volume carrier type and index-grid geometry: cropping, embedding,
//! resampling and orientation canonicalization.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`.
//! Resampling uses the voxel-center (half-voxel) convention: output voxel `j`
//! along an axis of `n_in` input voxels resampled to `n_out` samples input
//! coordinate `(j + 0.5) * n_in / n_out - 0.5`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// On-disk scalar type a volume came from or should be written as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    I16,
    F32,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "uint8",
            DType::I16 => "int16",
            DType::F32 => "float32",
        }
    }
}

/// 3D scalar grid with voxel spacing and a voxel-index to world-mm affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    dtype: DType,
}

impl Volume {
    /// Builds a volume, checking the length, spacing and affine invariants.
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims {dims:?} must be positive")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} != product of dims {dims:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        let lin: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into_owned();
        let det = lin.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::DegenerateAffine(format!("determinant {det}")));
        }
        Ok(Volume {
            dims,
            data,
            spacing,
            affine,
            dtype: DType::F32,
        })
    }

    /// Volume with a diagonal affine built from `spacing` and the origin at voxel 0.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        let affine = diagonal_affine(spacing);
        Self::new(dims, data, spacing, affine)
    }

    /// Same geometry as `self`, new data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.dims, data, self.spacing, self.affine).map(|v| v.with_dtype(self.dtype))
    }

    /// Zero-filled volume sharing `self`'s geometry.
    pub fn zeros_like(&self) -> Self {
        Volume {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn filled(dims: [usize; 3], value: f32, spacing: [f64; 3]) -> Result<Self> {
        Self::from_data(dims, vec![value; dims.iter().product()], spacing)
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// World coordinate (mm) of a continuous voxel index.
    pub fn world(&self, index: [f64; 3]) -> [f64; 3] {
        let p = self.affine * Vector4::new(index[0], index[1], index[2], 1.0);
        [p.x, p.y, p.z]
    }

    /// Trilinear sample at a continuous voxel index, clamping to the border.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f32 {
        let [nx, ny, nz] = self.dims;
        let (x0, x1, fx) = lerp_cell(p[0], nx);
        let (y0, y1, fy) = lerp_cell(p[1], ny);
        let (z0, z1, fz) = lerp_cell(p[2], nz);
        let d = &self.data;
        let at = |x: usize, y: usize, z: usize| d[x + nx * (y + ny * z)] as f64;
        let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
        let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
        let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
        let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    }

    /// Nearest-neighbour sample at a continuous voxel index, clamping to the border.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f32 {
        let ix = p[0].round().clamp(0.0, (self.dims[0] - 1) as f64) as usize;
        let iy = p[1].round().clamp(0.0, (self.dims[1] - 1) as f64) as usize;
        let iz = p[2].round().clamp(0.0, (self.dims[2] - 1) as f64) as usize;
        self.get(ix, iy, iz)
    }

    /// Resamples onto the same grid through an arbitrary output→input index map.
    pub fn warp<F>(&self, mode: Interpolation, map: F) -> Volume
    where
        F: Fn([f64; 3]) -> [f64; 3] + Sync,
    {
        use rayon::prelude::*;
        let [nx, ny, _] = self.dims;
        let mut out = vec![0.0f32; self.data.len()];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    let src = map([x as f64, y as f64, z as f64]);
                    plane[x + nx * y] = match mode {
                        Interpolation::Trilinear => self.sample_trilinear(src),
                        Interpolation::Nearest => self.sample_nearest(src),
                    };
                }
            }
        });
        Volume {
            data: out,
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }
}

#[inline]
fn lerp_cell(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let max = (n - 1) as f64;
    let p = p.clamp(0.0, max);
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

pub fn diagonal_affine(spacing: [f64; 3]) -> Matrix4<f64> {
    let mut a = Matrix4::identity();
    a[(0, 0)] = spacing[0];
    a[(1, 1)] = spacing[1];
    a[(2, 2)] = spacing[2];
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Half-open voxel index box: `lo` inclusive, `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        BoundingBox { lo, hi }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox { lo: [0; 3], hi: dims }
    }

    pub fn size(&self) -> [usize; 3] {
        [
            self.hi[0].saturating_sub(self.lo[0]),
            self.hi[1].saturating_sub(self.lo[1]),
            self.hi[2].saturating_sub(self.lo[2]),
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    /// Checks `0 <= lo < hi <= dims` on every axis.
    pub fn check(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= dims[a]) {
            Ok(())
        } else {
            Err(Error::BoxOutOfRange {
                lo: self.lo,
                hi: self.hi,
                dims,
            })
        }
    }
}

fn translate(affine: &Matrix4<f64>, offset: [f64; 3]) -> Matrix4<f64> {
    let mut t = Matrix4::identity();
    t[(0, 3)] = offset[0];
    t[(1, 3)] = offset[1];
    t[(2, 3)] = offset[2];
    affine * t
}

/// Extracts the voxels inside `bbox`; the affine is shifted so every voxel keeps its world position.
pub fn crop(v: &Volume, bbox: &BoundingBox) -> Result<Volume> {
    bbox.check(v.dims)?;
    let size = bbox.size();
    let mut data = Vec::with_capacity(size.iter().product());
    for z in bbox.lo[2]..bbox.hi[2] {
        for y in bbox.lo[1]..bbox.hi[1] {
            let start = v.index(bbox.lo[0], y, z);
            data.extend_from_slice(&v.data[start..start + size[0]]);
        }
    }
    let affine = translate(&v.affine, [bbox.lo[0] as f64, bbox.lo[1] as f64, bbox.lo[2] as f64]);
    Ok(Volume {
        dims: size,
        data,
        spacing: v.spacing,
        affine,
        dtype: v.dtype,
    })
}

/// Places `mask` at `bbox` inside a zero volume of `full_dims` (inverse of [`crop`]).
pub fn embed(mask: &Volume, bbox: &BoundingBox, full_dims: [usize; 3]) -> Result<Volume> {
    bbox.check(full_dims)?;
    if bbox.size() != mask.dims {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} do not match box size {:?}",
            mask.dims,
            bbox.size()
        )));
    }
    let n: usize = full_dims.iter().product();
    let mut data = vec![0.0f32; n];
    let size = bbox.size();
    for z in 0..size[2] {
        for y in 0..size[1] {
            let dst = bbox.lo[0] + full_dims[0] * ((bbox.lo[1] + y) + full_dims[1] * (bbox.lo[2] + z));
            let src = mask.index(0, y, z);
            data[dst..dst + size[0]].copy_from_slice(&mask.data[src..src + size[0]]);
        }
    }
    let affine = translate(&mask.affine, [-(bbox.lo[0] as f64), -(bbox.lo[1] as f64), -(bbox.lo[2] as f64)]);
    Ok(Volume {
        dims: full_dims,
        data,
        spacing: mask.spacing,
        affine,
        dtype: mask.dtype,
    })
}

/// Resamples onto `target_dims` voxels covering the same world extent.
///
/// Trilinear resampling is evaluated separably along each axis, which is
/// identical to tensor-product trilinear interpolation but linear in cost.
pub fn resample(v: &Volume, target_dims: [usize; 3], mode: Interpolation) -> Result<Volume> {
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("target dims {target_dims:?} must be positive")));
    }
    let mut dims = v.dims;
    let mut data = v.data.clone();
    for axis in 0..3 {
        if dims[axis] != target_dims[axis] {
            data = resample_axis(&data, dims, axis, target_dims[axis], mode);
            dims[axis] = target_dims[axis];
        }
    }
    let ratio = [
        v.dims[0] as f64 / target_dims[0] as f64,
        v.dims[1] as f64 / target_dims[1] as f64,
        v.dims[2] as f64 / target_dims[2] as f64,
    ];
    // new index j maps to old index r*j + (r-1)/2
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = ratio[a];
        m[(a, 3)] = (ratio[a] - 1.0) / 2.0;
    }
    Ok(Volume {
        dims: target_dims,
        data,
        spacing: [v.spacing[0] * ratio[0], v.spacing[1] * ratio[1], v.spacing[2] * ratio[2]],
        affine: v.affine * m,
        dtype: v.dtype,
    })
}

fn resample_axis(data: &[f32], dims: [usize; 3], axis: usize, n_out: usize, mode: Interpolation) -> Vec<f32> {
    let n_in = dims[axis];
    let ratio = n_in as f64 / n_out as f64;
    // per output sample: (i0, i1, w1)
    let taps: Vec<(usize, usize, f32)> = (0..n_out)
        .map(|j| {
            let p = (j as f64 + 0.5) * ratio - 0.5;
            match mode {
                Interpolation::Trilinear => {
                    let (i0, i1, f) = lerp_cell(p, n_in);
                    (i0, i1, f as f32)
                }
                Interpolation::Nearest => {
                    let i = p.round().clamp(0.0, (n_in - 1) as f64) as usize;
                    (i, i, 0.0)
                }
            }
        })
        .collect();
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    let mut out = vec![0.0f32; out_dims.iter().product()];
    let stride_in = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let stride_out = match axis {
        0 => 1,
        1 => out_dims[0],
        _ => out_dims[0] * out_dims[1],
    };
    // iterate over all lines along `axis`
    let (outer, inner) = match axis {
        0 => (dims[1] * dims[2], 1),
        1 => (dims[2], dims[0]),
        _ => (1, dims[0] * dims[1]),
    };
    for o in 0..outer {
        let base_in = o * n_in * inner;
        let base_out = o * n_out * inner;
        for (j, &(i0, i1, w)) in taps.iter().enumerate() {
            let dst = &mut out[base_out + j * stride_out..];
            let a = base_in + i0 * stride_in;
            let b = base_in + i1 * stride_in;
            if inner == 1 {
                dst[0] = data[a] + (data[b] - data[a]) * w;
            } else {
                for k in 0..inner {
                    let va = data[a + k];
                    dst[k] = va + (data[b + k] - va) * w;
                }
            }
        }
    }
    out
}

/// Axis permutation and flips mapping a volume onto RAS-ordered voxel axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reorientation {
    /// For each output axis, the source voxel axis it is read from.
    pub source_axis: [usize; 3],
    /// Whether the source axis is traversed backwards.
    pub flip: [bool; 3],
    /// Source volume dims.
    pub source_dims: [usize; 3],
}

impl Reorientation {
    /// Finds the permutation/flip that best aligns voxel axes with world R, A, S.
    pub fn for_volume(v: &Volume) -> Result<Self> {
        let lin: Matrix3<f64> = v.affine.fixed_view::<3, 3>(0, 0).into_owned();
        if lin.determinant().abs() < 1e-12 {
            return Err(Error::DegenerateAffine("singular 3x3 block".into()));
        }
        // normalise columns so spacing does not bias the assignment
        let cols: Vec<Vector3<f64>> = (0..3).map(|i| lin.column(i).normalize()).collect();
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for perm in PERMS {
            // perm[world_axis] = voxel axis
            let score: f64 = (0..3).map(|w| cols[perm[w]][w].abs()).sum();
            if score > best_score + 1e-12 {
                best_score = score;
                best = Some(perm);
            }
        }
        let perm = best.expect("at least one permutation");
        if (0..3).any(|w| cols[perm[w]][w].abs() < 1e-9) {
            return Err(Error::DegenerateAffine("no dominant direction for some axis".into()));
        }
        let flip = [cols[perm[0]][0] < 0.0, cols[perm[1]][1] < 0.0, cols[perm[2]][2] < 0.0];
        Ok(Reorientation {
            source_axis: perm,
            flip,
            source_dims: v.dims,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.source_axis == [0, 1, 2] && self.flip == [false; 3]
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [
            self.source_dims[self.source_axis[0]],
            self.source_dims[self.source_axis[1]],
            self.source_dims[self.source_axis[2]],
        ]
    }

    /// Source index for an output index.
    #[inline]
    fn source_index(&self, out: [usize; 3]) -> [usize; 3] {
        let mut src = [0usize; 3];
        for j in 0..3 {
            let a = self.source_axis[j];
            src[a] = if self.flip[j] { self.source_dims[a] - 1 - out[j] } else { out[j] };
        }
        src
    }

    /// Homogeneous map from output index to source index.
    fn index_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m[(3, 3)] = 1.0;
        for j in 0..3 {
            let a = self.source_axis[j];
            if self.flip[j] {
                m[(a, j)] = -1.0;
                m[(a, 3)] = (self.source_dims[a] - 1) as f64;
            } else {
                m[(a, j)] = 1.0;
            }
        }
        m
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        if v.dims != self.source_dims {
            return Err(Error::ShapeMismatch(format!(
                "reorientation built for {:?}, got {:?}",
                self.source_dims, v.dims
            )));
        }
        let od = self.output_dims();
        let mut data = vec![0.0f32; v.data.len()];
        let mut i = 0;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let s = self.source_index([x, y, z]);
                    data[i] = v.get(s[0], s[1], s[2]);
                    i += 1;
                }
            }
        }
        let spacing = [
            v.spacing[self.source_axis[0]],
            v.spacing[self.source_axis[1]],
            v.spacing[self.source_axis[2]],
        ];
        Ok(Volume {
            dims: od,
            data,
            spacing,
            affine: v.affine * self.index_matrix(),
            dtype: v.dtype,
        })
    }

    /// Maps a volume on the reoriented grid back onto the source grid.
    pub fn invert(&self, v: &Volume) -> Result<Volume> {
        let od = self.output_dims();
        if v.dims != od {
            return Err(Error::ShapeMismatch(format!("expected dims {od:?}, got {:?}", v.dims)));
        }
        let mut data = vec![0.0f32; v.data.len()];
        let sd = self.source_dims;
        let mut i = 0;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let s = self.source_index([x, y, z]);
                    data[s[0] + sd[0] * (s[1] + sd[1] * s[2])] = v.data[i];
                    i += 1;
                }
            }
        }
        let inv = self
            .index_matrix()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateAffine("reorientation not invertible".into()))?;
        let mut spacing = [0.0; 3];
        for j in 0..3 {
            spacing[self.source_axis[j]] = v.spacing[j];
        }
        Ok(Volume {
            dims: sd,
            data,
            spacing,
            affine: v.affine * inv,
            dtype: v.dtype,
        })
    }
}

/// Permutes/flips voxel axes so they run Right, Anterior, Superior.
pub fn canonicalize_orientation(v: &Volume) -> Result<Volume> {
    let r = Reorientation::for_volume(v)?;
    if r.is_identity() {
        return Ok(v.clone());
    }
    r.apply(v)
}
