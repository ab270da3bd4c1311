//! Training-time augmentation: spatial, intensity, MRI artifacts and slice merge.
//!
//! Every random transform draws its parameters from an explicit rng and then
//! calls a deterministic counterpart, so the same parameters can be replayed
//! on the image and on the mask.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Interpolation, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Application probability of each transform except the flip.
    pub p_apply: f64,
    /// Probability of a left-right flip.
    pub p_flip: f64,
    pub max_rotate_deg: f64,
    pub max_lighting: f64,
    pub max_warp: f64,
    pub zoom_range: [f64; 2],
    pub bias_order: usize,
    pub bias_magnitude: f64,
    pub ghost_count_range: [usize; 2],
    pub ghost_intensity_range: [f64; 2],
    /// Noise std relative to the image std.
    pub noise_std_range: [f64; 2],
    /// Gaussian blur sigma in voxels.
    pub blur_sigma_range: [f64; 2],
    /// Largest rigid displacement, in voxels, of the two simulated movements.
    pub motion_severity_range: [f64; 2],
    pub slice_merge_alpha_max: f64,
    /// Use `alpha / 2` per neighbour so the merge weights sum to one.
    pub slice_merge_normalize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_apply: 0.5,
            p_flip: 0.5,
            max_rotate_deg: 15.0,
            max_lighting: 0.5,
            max_warp: 0.1,
            zoom_range: [1.0, 1.1],
            bias_order: 4,
            bias_magnitude: 0.5,
            ghost_count_range: [4, 10],
            ghost_intensity_range: [0.5, 1.0],
            noise_std_range: [0.0, 0.25],
            blur_sigma_range: [0.0, 1.5],
            motion_severity_range: [0.0, 3.0],
            slice_merge_alpha_max: 0.5,
            slice_merge_normalize: false,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn off() -> Self {
        AugmentConfig {
            p_apply: 0.0,
            p_flip: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("augment: {m}")));
        for (name, p) in [("p_apply", self.p_apply), ("p_flip", self.p_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("max_rotate_deg", self.max_rotate_deg),
            ("max_lighting", self.max_lighting),
            ("max_warp", self.max_warp),
            ("bias_magnitude", self.bias_magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.max_lighting >= 1.0 {
            return bad(format!("max_lighting must be below 1, got {}", self.max_lighting));
        }
        if self.max_warp >= 0.5 {
            return bad(format!("max_warp must be below 0.5, got {}", self.max_warp));
        }
        for (name, r) in [
            ("zoom_range", self.zoom_range),
            ("ghost_intensity_range", self.ghost_intensity_range),
            ("noise_std_range", self.noise_std_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("motion_severity_range", self.motion_severity_range),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} must satisfy 0 <= lo <= hi, got {r:?}"));
            }
        }
        if self.zoom_range[0] <= 0.0 {
            return bad("zoom_range must be positive".into());
        }
        if self.ghost_intensity_range[1] > 1.0 {
            return bad("ghost intensity cannot exceed 1".into());
        }
        let [g0, g1] = self.ghost_count_range;
        if g0 < 1 || g0 > g1 {
            return bad(format!("ghost_count_range must satisfy 1 <= lo <= hi, got {:?}", self.ghost_count_range));
        }
        if !(0.0..=0.5).contains(&self.slice_merge_alpha_max) {
            return bad(format!(
                "slice_merge_alpha_max must lie in [0, 0.5], got {}",
                self.slice_merge_alpha_max
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

// ---------------------------------------------------------------- spatial

/// One draw of the geometric transform, in coordinates normalized to [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialParams {
    /// Mirror along x (left-right in RAS).
    pub flip: bool,
    /// Unit rotation axis and angle in degrees.
    pub axis: [f64; 3],
    pub angle_deg: f64,
    pub zoom: f64,
    /// Projective tilt: a normalized point `p` samples `p / (1 + warp·p)`.
    pub warp: [f64; 3],
}

impl SpatialParams {
    pub fn identity() -> Self {
        SpatialParams {
            flip: false,
            axis: [1.0, 0.0, 0.0],
            angle_deg: 0.0,
            zoom: 1.0,
            warp: [0.0; 3],
        }
    }

    pub fn rotation(axis: [f64; 3], angle_deg: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        SpatialParams {
            axis: axis.map(|a| a / n),
            angle_deg,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0 && self.zoom == 1.0 && self.warp == [0.0; 3]
    }

    /// Flip, rotation, zoom and warp each fire independently.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let mut p = Self::identity();
        p.flip = rng.random_bool(cfg.p_flip);
        if rng.random_bool(cfg.p_apply) && cfg.max_rotate_deg > 0.0 {
            // uniform direction from a normalized Gaussian triple
            let g: [f64; 3] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
            p.axis = g.map(|v| v / n);
            p.angle_deg = rng.random_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg);
        }
        if rng.random_bool(cfg.p_apply) {
            p.zoom = uniform(rng, cfg.zoom_range);
        }
        if rng.random_bool(cfg.p_apply) && cfg.max_warp > 0.0 {
            p.warp = std::array::from_fn(|_| rng.random_range(-cfg.max_warp..=cfg.max_warp));
        }
        p
    }

    /// Output normalized point -> input normalized point.
    fn source(&self, p: [f64; 3]) -> [f64; 3] {
        let d = 1.0 + self.warp[0] * p[0] + self.warp[1] * p[1] + self.warp[2] * p[2];
        let mut q = p.map(|v| v / d / self.zoom);
        if self.angle_deg != 0.0 {
            // inverse rotation (Rodrigues with -angle)
            let (s, c) = (-self.angle_deg.to_radians()).sin_cos();
            let k = self.axis;
            let kxq = [k[1] * q[2] - k[2] * q[1], k[2] * q[0] - k[0] * q[2], k[0] * q[1] - k[1] * q[0]];
            let kq = k[0] * q[0] + k[1] * q[1] + k[2] * q[2];
            q = std::array::from_fn(|a| q[a] * c + kxq[a] * s + k[a] * kq * (1.0 - c));
        }
        if self.flip {
            q[0] = -q[0];
        }
        q
    }

    /// Resamples `v` (trilinear) through this transform; dims are unchanged.
    pub fn apply(&self, v: &Volume) -> Volume {
        if self.is_identity() {
            return v.clone();
        }
        let dims = v.dims();
        // normalize by the largest half-extent so rotations stay isotropic
        let half = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let scale = half.iter().copied().fold(0.0, f64::max).max(0.5);
        v.warp(Interpolation::Trilinear, |idx| {
            let p = std::array::from_fn(|a| (idx[a] - half[a]) / scale);
            let q = self.source(p);
            std::array::from_fn(|a| q[a] * scale + half[a])
        })
    }
}

/// Applies one random flip/rotation/zoom/warp identically to image and mask.
pub fn spatial_transform<R: Rng + ?Sized>(
    img: &Volume,
    mask: &Volume,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Volume, Volume) {
    let p = SpatialParams::sample(rng, cfg);
    (p.apply(img), p.apply(mask))
}

// -------------------------------------------------------------- intensity

/// `mean + contrast·(x - mean) + brightness`: shifts the mean by exactly
/// `brightness` and scales the std by exactly `contrast`.
pub fn adjust_lighting(img: &Volume, brightness: f64, contrast: f64) -> Volume {
    if brightness == 0.0 && contrast == 1.0 {
        return img.clone();
    }
    let m = img.mean();
    let data = img
        .data()
        .iter()
        .map(|&x| (m + contrast * (x as f64 - m) + brightness) as f32)
        .collect();
    img.with_data(data).expect("same length")
}

/// Random brightness shift in `±max_lighting/2` and contrast factor in
/// `[1 - max_lighting, 1 / (1 - max_lighting)]`, log-uniform.
pub fn intensity_transform<R: Rng + ?Sized>(img: &Volume, rng: &mut R, cfg: &AugmentConfig) -> Volume {
    let l = cfg.max_lighting;
    let brightness = if rng.random_bool(cfg.p_apply) && l > 0.0 {
        rng.random_range(-l / 2.0..=l / 2.0)
    } else {
        0.0
    };
    let contrast = if rng.random_bool(cfg.p_apply) && l > 0.0 {
        let r = -(1.0 - l).ln();
        rng.random_range(-r..=r).exp()
    } else {
        1.0
    };
    adjust_lighting(img, brightness, contrast)
}

// ------------------------------------------------------------- bias field

/// Multiplies every voxel by `exp` of the matching log-field value.
pub fn apply_log_field(img: &Volume, field: &[f64]) -> Volume {
    assert_eq!(field.len(), img.len());
    let data = img
        .data()
        .iter()
        .zip(field)
        .map(|(&x, p)| (x as f64 * p.exp()) as f32)
        .collect();
    img.with_data(data).expect("same length")
}

fn legendre(n: usize, u: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, u);
    match n {
        0 => p0,
        _ => {
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * u * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Random smooth log-field of total degree `order`, rescaled so that
/// `max |P|` over the grid equals `magnitude`.
///
/// The basis is products of Legendre polynomials in coordinates scaled to
/// [-1, 1]; unlike raw monomials they oscillate through the interior
/// instead of piling all their amplitude into the grid corners.
pub fn random_bias_field<R: Rng + ?Sized>(dims: [usize; 3], order: usize, magnitude: f64, rng: &mut R) -> Vec<f64> {
    let mut terms = Vec::new();
    for a in 0..=order {
        for b in 0..=order - a {
            for c in 0..=order - a - b {
                terms.push(([a, b, c], rng.random_range(-1.0..=1.0)));
            }
        }
    }
    let table: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|axis| {
            let n = dims[axis];
            (0..n)
                .map(|i| {
                    let u = if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
                    (0..=order).map(|k| legendre(k, u)).collect()
                })
                .collect()
        })
        .collect();
    let mut field = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                field.push(
                    terms
                        .iter()
                        .map(|(e, c)| c * table[0][x][e[0]] * table[1][y][e[1]] * table[2][z][e[2]])
                        .sum::<f64>(),
                );
            }
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { magnitude / peak } else { 0.0 };
    field.iter_mut().for_each(|v| *v *= k);
    field
}

pub fn simulate_bias_field<R: Rng + ?Sized>(img: &Volume, rng: &mut R, order: usize, magnitude: f64) -> Volume {
    if magnitude == 0.0 {
        return img.clone();
    }
    let field = random_bias_field(img.dims(), order, magnitude, rng);
    apply_log_field(img, &field)
}

// ------------------------------------------------------------------ k-space

/// Runs `f(line, position)` on the spectrum of every line along `axis`
/// (`position` enumerates the other two coordinates), then inverse
/// transforms and keeps the real part.
fn filter_lines(img: &Volume, axis: usize, mut f: impl FnMut(&mut [Complex<f64>], usize)) -> Volume {
    let dims = img.dims();
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = img.data().to_vec();
    let mut line = vec![Complex::new(0.0, 0.0); n];
    let mut position = 0;
    for start in 0..img.len() {
        // line starts are the voxels whose coordinate along `axis` is zero
        if (start / stride) % n != 0 {
            continue;
        }
        for (k, c) in line.iter_mut().enumerate() {
            *c = Complex::new(out[start + k * stride] as f64, 0.0);
        }
        fwd.process(&mut line);
        f(&mut line, position);
        inv.process(&mut line);
        for (k, c) in line.iter().enumerate() {
            out[start + k * stride] = (c.re / n as f64) as f32;
        }
        position += 1;
    }
    img.with_data(out).expect("same length")
}

/// Signed frequency of DFT bin `k` out of `n`.
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Scales the phase-encode lines along `axis` whose signed frequency is a
/// nonzero multiple of `n_ghosts` by `1 - intensity`.
pub fn add_ghosting(img: &Volume, n_ghosts: usize, axis: usize, intensity: f64) -> Volume {
    if intensity == 0.0 || n_ghosts == 0 {
        return img.clone();
    }
    let n = img.dims()[axis];
    let keep = 1.0 - intensity;
    filter_lines(img, axis, |line, _| {
        for (k, c) in line.iter_mut().enumerate() {
            let f = signed_frequency(k, n);
            if f != 0 && f.unsigned_abs() as usize % n_ghosts == 0 {
                *c *= keep;
            }
        }
    })
}

pub fn random_ghosting<R: Rng + ?Sized>(img: &Volume, rng: &mut R, cfg: &AugmentConfig) -> Volume {
    let [lo, hi] = cfg.ghost_count_range;
    let n = rng.random_range(lo..=hi);
    let axis = rng.random_range(0..3);
    let intensity = uniform(rng, cfg.ghost_intensity_range);
    add_ghosting(img, n, axis, intensity)
}

/// Circular shift by whole voxels.
fn roll(img: &Volume, shift: [i64; 3]) -> Vec<f32> {
    let [nx, ny, nz] = img.dims();
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    let wrap = |i: usize, s: i64, n: usize| (i as i64 - s).rem_euclid(n as i64) as usize;
    for z in 0..nz {
        let sz = wrap(z, shift[2], nz);
        for y in 0..ny {
            let sy = wrap(y, shift[1], ny);
            for x in 0..nx {
                out[x + nx * (y + ny * z)] = src[wrap(x, shift[0], nx) + nx * (sy + ny * sz)];
            }
        }
    }
    out
}

/// Two rigid movements during a centre-out acquisition along `axis`: lines
/// with `|f| < bands[0]` come from the unmoved image, `bands[0] <= |f| <
/// bands[1]` from the first displaced copy and the rest from the second.
pub fn motion_artifact(img: &Volume, axis: usize, shifts: [[i64; 3]; 2], bands: [usize; 2]) -> Volume {
    if shifts == [[0; 3]; 2] {
        return img.clone();
    }
    let copies: Vec<Volume> = shifts
        .iter()
        .map(|&s| img.with_data(roll(img, s)).expect("same length"))
        .collect();
    let dims = img.dims();
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let mut spectra: Vec<Vec<Complex<f64>>> = Vec::new();
    for c in &copies {
        let mut all = Vec::with_capacity(c.len());
        for start in (0..c.len()).filter(|s| (s / stride) % n == 0) {
            let mut line: Vec<Complex<f64>> = (0..n)
                .map(|k| Complex::new(c.data()[start + k * stride] as f64, 0.0))
                .collect();
            fwd.process(&mut line);
            all.extend(line);
        }
        spectra.push(all);
    }
    filter_lines(img, axis, |line, pos| {
        for (k, c) in line.iter_mut().enumerate() {
            let f = signed_frequency(k, n).unsigned_abs() as usize;
            if f >= bands[1] {
                *c = spectra[1][pos * n + k];
            } else if f >= bands[0] {
                *c = spectra[0][pos * n + k];
            }
        }
    })
}

/// Severity is the largest displacement (voxels) of either movement.
pub fn motion<R: Rng + ?Sized>(img: &Volume, rng: &mut R, severity: f64) -> Volume {
    let s = severity.floor() as i64;
    if s <= 0 {
        return img.clone();
    }
    let axis = rng.random_range(0..3);
    let shifts = [0, 1].map(|_| std::array::from_fn(|_| rng.random_range(-s..=s)));
    let half = img.dims()[axis] / 2 + 1;
    let mut a = rng.random_range(1..half.max(2));
    let mut b = rng.random_range(1..half.max(2));
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    motion_artifact(img, axis, shifts, [a, b])
}

// ------------------------------------------------------------ noise / blur

/// Adds i.i.d. Gaussian noise of std `std_rel · std(img)`.
pub fn add_noise<R: Rng + ?Sized>(img: &Volume, rng: &mut R, std_rel: f64) -> Volume {
    if std_rel == 0.0 {
        return img.clone();
    }
    let sd = std_rel * img.std();
    let normal = rand_distr::Normal::new(0.0, sd).expect("finite std");
    let data = img
        .data()
        .iter()
        .map(|&x| (x as f64 + rng.sample(normal)) as f32)
        .collect();
    img.with_data(data).expect("same length")
}

/// Separable Gaussian blur, kernel truncated at 3 sigma and normalized,
/// with half-sample symmetric borders (so the image sum is preserved).
pub fn blur(img: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let dims = img.dims();
    let mut cur: Vec<f64> = img.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = ((i / stride) % n as usize) as i64;
            let base = i - c as usize * stride;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let mut j = c + t as i64 - r;
                // reflect until inside; long kernels on short axes may bounce twice
                while j < 0 || j >= n {
                    j = if j < 0 { -j - 1 } else { 2 * n - j - 1 };
                }
                acc += w * cur[base + j as usize * stride];
            }
            *out = acc;
        }
        cur = next;
    }
    img.with_data(cur.into_iter().map(|x| x as f32).collect()).expect("same length")
}

// ------------------------------------------------------------ slice merge

/// `x_i <- (1 - alpha) x_i + alpha (x_{i+1} + x_{i-1})` on interior slices
/// along `axis`, identically for image and mask; boundary slices are kept.
/// With `normalize` each neighbour gets `alpha / 2` instead.
pub fn slice_merge_with(
    img: &Volume,
    mask: &Volume,
    axis: usize,
    alpha: f64,
    normalize: bool,
) -> Result<(Volume, Volume)> {
    let n = img.dims()[axis];
    if n < 3 {
        return Err(Error::TooFewSlices(n));
    }
    if img.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    let side = if normalize { alpha / 2.0 } else { alpha };
    let merge = |v: &Volume| {
        let dims = v.dims();
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let src = v.data();
        let data = (0..src.len())
            .map(|i| {
                let c = (i / stride) % n;
                if c == 0 || c == n - 1 {
                    src[i]
                } else {
                    ((1.0 - alpha) * src[i] as f64 + side * (src[i + stride] as f64 + src[i - stride] as f64)) as f32
                }
            })
            .collect();
        v.with_data(data).expect("same length")
    };
    Ok((merge(img), merge(mask)))
}

/// Slice merge with `alpha ~ U[0, alpha_max]`.
pub fn slice_merge<R: Rng + ?Sized>(
    img: &Volume,
    mask: &Volume,
    axis: usize,
    rng: &mut R,
    alpha_max: f64,
    normalize: bool,
) -> Result<(Volume, Volume)> {
    let alpha = if alpha_max > 0.0 {
        rng.random_range(0.0..=alpha_max)
    } else {
        0.0
    };
    slice_merge_with(img, mask, axis, alpha, normalize)
}

// --------------------------------------------------------------- pipeline

/// The full chain used for training samples: spatial, bias field, motion,
/// ghosting, blur, noise, then brightness/contrast. Each artifact fires with
/// probability `p_apply`.
pub fn augment_pair<R: Rng + ?Sized>(
    img: &Volume,
    mask: &Volume,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> (Volume, Volume) {
    let (mut img, mask) = spatial_transform(img, mask, rng, cfg);
    if rng.random_bool(cfg.p_apply) {
        // the log-field multiplies positive intensities; shift so the
        // image is positive, apply, and shift back
        let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let offset = 1.0 - lo.min(0.0);
        let shifted = img.with_data(img.data().iter().map(|&x| (x as f64 + offset) as f32).collect()).unwrap();
        let magnitude = cfg.bias_magnitude * rng.random_range(0.0..=1.0);
        let biased = simulate_bias_field(&shifted, rng, cfg.bias_order, magnitude);
        img = biased
            .with_data(biased.data().iter().map(|&x| (x as f64 - offset) as f32).collect())
            .unwrap();
    }
    if rng.random_bool(cfg.p_apply) {
        let severity = uniform(rng, cfg.motion_severity_range);
        img = motion(&img, rng, severity);
    }
    if rng.random_bool(cfg.p_apply) {
        img = random_ghosting(&img, rng, cfg);
    }
    if rng.random_bool(cfg.p_apply) {
        let s = uniform(rng, cfg.blur_sigma_range);
        img = blur(&img, s);
    }
    if rng.random_bool(cfg.p_apply) {
        let s = uniform(rng, cfg.noise_std_range);
        img = add_noise(&img, rng, s);
    }
    let img = intensity_transform(&img, rng, cfg);
    (img, mask)
}
