//! Intensity preparation: bias correction, quantile clipping and moment normalization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub q_lo: f64,
    pub q_hi: f64,
    pub target_mean: f64,
    pub target_std: f64,
    pub bias_order: usize,
    pub bias_enabled: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            q_lo: 0.005,
            q_hi: 0.995,
            target_mean: 0.449,
            target_std: 0.229,
            bias_order: 4,
            bias_enabled: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.q_lo && self.q_lo < self.q_hi && self.q_hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "quantiles must satisfy 0 <= q_lo < q_hi <= 1, got {} and {}",
                self.q_lo, self.q_hi
            )));
        }
        if !(self.target_std > 0.0) || !self.target_mean.is_finite() {
            return Err(Error::InvalidConfig("target_std must be positive".into()));
        }
        if self.bias_order > MAX_BIAS_ORDER {
            return Err(Error::InvalidConfig(format!(
                "bias_order must be at most {MAX_BIAS_ORDER}, got {}",
                self.bias_order
            )));
        }
        Ok(())
    }
}

/// Bias correction, then clipping, then normalization.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let corrected;
    let v = if cfg.bias_enabled {
        corrected = correct_bias(v, cfg.bias_order)?;
        &corrected
    } else {
        v
    };
    let clipped = clip_intensities(v, cfg.q_lo, cfg.q_hi);
    normalize(&clipped, cfg.target_mean, cfg.target_std)
}

/// Empirical quantile as the order statistic at rank `round(q * (n - 1))`, by
/// exact selection. Using an actual sample (no interpolation) makes clipping
/// idempotent.
pub fn quantile(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let mut buf = values.to_vec();
    let k = (q.clamp(0.0, 1.0) * (buf.len() - 1) as f64).round() as usize;
    *buf.select_nth_unstable_by(k, f32::total_cmp).1
}

pub fn clip_intensities(v: &Volume, q_lo: f64, q_hi: f64) -> Volume {
    let lo = quantile(v.data(), q_lo);
    let hi = quantile(v.data(), q_hi);
    let data = v.data().iter().map(|&x| x.clamp(lo, hi)).collect();
    v.with_data(data).expect("same length")
}

pub const MIN_STD: f64 = 1e-8;
pub const MAX_BIAS_ORDER: usize = 8;

pub fn normalize(v: &Volume, target_mean: f64, target_std: f64) -> Result<Volume> {
    let mean = v.mean();
    let std = v.std();
    if !(std > MIN_STD) {
        return Err(Error::ZeroVariance);
    }
    let k = target_std / std;
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - mean) * k + target_mean) as f32)
        .collect();
    v.with_data(data)
}

/// Otsu threshold over a 256-bin histogram of `values`.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) as f64 / BINS as f64;
    let mut hist = [0u64; BINS];
    for &x in values {
        let b = (((x - lo) as f64 / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    (lo as f64 + (best_bin + 1) as f64 * width) as f32
}

/// Monomial exponents `(a, b, c)` with `a + b + c <= order`.
fn exponents(order: usize) -> Vec<[usize; 3]> {
    let mut e = Vec::new();
    for total in 0..=order {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                e.push([a, b, total - a - b]);
            }
        }
    }
    e
}

/// Smooth log-domain field: a polynomial in coordinates scaled to [-1, 1].
#[derive(Clone, Debug)]
pub struct PolyField {
    dims: [usize; 3],
    exps: Vec<[usize; 3]>,
    coef: Vec<f64>,
}

impl PolyField {
    pub fn new(dims: [usize; 3], order: usize, coef: Vec<f64>) -> Self {
        let exps = exponents(order);
        assert_eq!(exps.len(), coef.len());
        PolyField { dims, exps, coef }
    }

    pub fn terms(order: usize) -> usize {
        exponents(order).len()
    }

    fn powers(&self, idx: [usize; 3], order: usize) -> [[f64; 9]; 3] {
        let mut p = [[0.0; 9]; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = if n > 1 { 2.0 * idx[a] as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            p[a][0] = 1.0;
            for k in 1..=order.min(8) {
                p[a][k] = p[a][k - 1] * u;
            }
        }
        p
    }

    fn basis(&self, idx: [usize; 3], out: &mut [f64]) {
        let order = self.exps.last().map_or(0, |e| e.iter().sum());
        let p = self.powers(idx, order);
        for (o, e) in out.iter_mut().zip(&self.exps) {
            *o = p[0][e[0]] * p[1][e[1]] * p[2][e[2]];
        }
    }

    pub fn eval(&self, idx: [usize; 3]) -> f64 {
        let mut b = vec![0.0; self.exps.len()];
        self.basis(idx, &mut b);
        b.iter().zip(&self.coef).map(|(x, c)| x * c).sum()
    }

    /// Field values for every voxel, x-fastest.
    pub fn render(&self) -> Vec<f64> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.eval([x, y, z]));
                }
            }
        }
        out
    }
}

/// Log-domain polynomial bias removal.
///
/// Voxels above the Otsu threshold form the foreground. The polynomial (total
/// degree `order`) is fitted by least squares to box-smoothed log-intensities
/// of the dominant tissue, i.e. foreground voxels near the main histogram
/// mode of the currently corrected image; degree and window are tightened
/// over a few rounds. The image is divided by `exp` of the field, shifted so
/// the mean foreground log-intensity is unchanged.
pub fn correct_bias(v: &Volume, order: usize) -> Result<Volume> {
    let field = estimate_bias(v, order)?;
    let data = v
        .data()
        .iter()
        .zip(&field)
        .map(|(&x, &f)| (x as f64 / f.exp()) as f32)
        .collect();
    v.with_data(data)
}

/// Dominant-tissue windows as (below, above) the mode, in robust standard
/// deviations, for the first-degree rounds and for every later degree. Wide
/// windows first let badly biased regions be pulled in; the final ones are
/// lopsided because partial-volume mixtures only sit below the brightest
/// tissue, and a uniform truncation offset vanishes in the zero-mean field.
const FIRST_WINDOWS: &[(f64, f64)] = &[(6.0, 6.0), (4.0, 4.0), (3.0, 3.0), (1.0, 3.0), (0.5, 3.0)];
const LEVEL_WINDOWS: &[(f64, f64)] = &[(3.0, 3.0), (1.0, 3.0), (0.5, 3.0), (0.5, 3.0)];

/// Estimated log bias field (zero-mean over the foreground) for every voxel.
pub fn estimate_bias(v: &Volume, order: usize) -> Result<Vec<f64>> {
    if order > MAX_BIAS_ORDER {
        return Err(Error::InvalidConfig(format!("bias order {order} exceeds {MAX_BIAS_ORDER}")));
    }
    let threshold = otsu_threshold(v.data());
    let dims = v.dims();
    let fg: Vec<usize> = (0..v.len()).filter(|&i| v.data()[i] > threshold).collect();
    if fg.is_empty() {
        return Err(Error::NonPositiveIntensities);
    }
    if fg.iter().any(|&i| v.data()[i] <= 0.0) {
        return Err(Error::NonPositiveIntensities);
    }
    // a 3-voxel box mean cuts noise well below the tissue contrasts; the
    // field is smooth enough not to notice
    let smooth = box3(v);
    let logs: Vec<f64> = fg
        .iter()
        .map(|&i| {
            let x = if smooth[i] > 0.0 { smooth[i] } else { v.data()[i] as f64 };
            x.ln()
        })
        .collect();
    let terms = PolyField::terms(order);
    // the constant monomial is folded into the class offsets
    let poly_terms = terms - 1;
    if fg.len() < 4 * terms {
        return Err(Error::SingularFit);
    }
    let proto = PolyField::new(dims, order, vec![0.0; terms]);
    // tissue boundaries change the log intensity by tenths per voxel, a
    // smooth field by hundredths; keeping flat voxels only stops partial
    // volume rims from being read as field
    let flat: Vec<usize> = (0..fg.len())
        .filter(|&k| log_gradient(&smooth, dims, fg[k]) < FLAT_GRADIENT)
        .collect();
    let pool: Vec<usize> = if flat.len() >= fg.len() / 10 && flat.len() >= 4 * terms {
        flat
    } else {
        (0..fg.len()).collect()
    };
    // subsample on a sublattice for the fit; the normal equations only need
    // a representative spread of voxels
    let step = ((pool.len() as f64 / 200_000.0).cbrt().ceil() as usize).max(1);
    let on_lattice = |i: usize| i % dims[0] % step == 0 && (i / dims[0]) % dims[1] % step == 0 && i / (dims[0] * dims[1]) % step == 0;
    let sample: Vec<usize> = pool.into_iter().filter(|&k| on_lattice(fg[k])).collect();
    let coords = |i: usize| {
        let i = fg[i];
        [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
    };
    let mut basis = vec![0.0; terms];
    let mut rows: Vec<f64> = Vec::with_capacity(sample.len() * poly_terms);
    for &s in &sample {
        proto.basis(coords(s), &mut basis);
        rows.extend_from_slice(&basis[1..]);
    }

    let corrected = |poly: &[f64]| -> Vec<f64> {
        sample
            .iter()
            .enumerate()
            .map(|(k, &s)| logs[s] - dot(&rows[k * poly_terms..k * poly_terms + poly.len()], poly))
            .collect()
    };
    // degree is raised one step at a time, each level starting from the
    // previous solution; a full-order fit from scratch chases tissue edges
    let mut poly: Vec<f64> = Vec::new();
    for level in 1..=order {
        let cols = PolyField::terms(level) - 1;
        poly.resize(cols, 0.0);
        let windows = if level == 1 { FIRST_WINDOWS } else { LEVEL_WINDOWS };
        for &(below, above) in windows {
            let c = corrected(&poly);
            let (mode, sigma) = dominant_mode(&c);
            let keep = |k: usize| c[k] >= mode - below * sigma && c[k] <= mode + above * sigma;
            if (0..sample.len()).filter(|&k| keep(k)).count() < 4 * (cols + 1) {
                break;
            }
            poly = solve(&rows, poly_terms, cols, &sample, &logs, keep)?;
        }
    }
    poly.resize(poly_terms, 0.0);

    let mut coef = vec![0.0; terms];
    coef[1..].copy_from_slice(&poly);
    let field = PolyField::new(dims, order, coef).render();
    let fg_mean = fg.iter().map(|&i| field[i]).sum::<f64>() / fg.len() as f64;
    Ok(field.into_iter().map(|f| f - fg_mean).collect())
}

const FLAT_GRADIENT: f64 = 0.015;

/// Central-difference gradient magnitude of `ln(img)` at voxel `i`.
fn log_gradient(img: &[f64], dims: [usize; 3], i: usize) -> f64 {
    let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut g2 = 0.0;
    for a in 0..3 {
        let lo = if c[a] > 0 { i - strides[a] } else { i };
        let hi = if c[a] + 1 < dims[a] { i + strides[a] } else { i };
        if img[lo] <= 0.0 || img[hi] <= 0.0 {
            return f64::INFINITY;
        }
        let span = (hi - lo) / strides[a];
        if span > 0 {
            g2 += ((img[hi].ln() - img[lo].ln()) / span as f64).powi(2);
        }
    }
    g2.sqrt()
}

/// Separable 3-tap box filter with replicated edges.
fn box3(v: &Volume) -> Vec<f64> {
    let dims = v.dims();
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let n = dims[a];
        let st = strides[a];
        let mut next = cur.clone();
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / st) % n;
            let lo = if c > 0 { i - st } else { i };
            let hi = if c + 1 < n { i + st } else { i };
            *out = (cur[lo] + cur[i] + cur[hi]) / 3.0;
        }
        cur = next;
    }
    cur
}

/// Least-squares coefficients of the first `cols` non-constant monomials plus
/// a free constant, over the sampled voxels accepted by `keep`.
fn solve(
    rows: &[f64],
    stride: usize,
    cols: usize,
    sample: &[usize],
    logs: &[f64],
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<f64>> {
    let n = cols + 1;
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut atb = DVector::<f64>::zeros(n);
    let mut row = vec![1.0; n];
    for (k, &s) in sample.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        row[..cols].copy_from_slice(&rows[k * stride..k * stride + cols]);
        for i in 0..n {
            atb[i] += row[i] * logs[s];
            for j in i..n {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let sol = ata.cholesky().ok_or(Error::SingularFit)?.solve(&atb);
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularFit);
    }
    Ok(sol.as_slice()[..cols].to_vec())
}

/// Peak of a 128-bin histogram and a robust spread taken from the values
/// above it (the side without partial-volume mixtures on T1 contrast).
fn dominant_mode(values: &[f64]) -> (f64, f64) {
    const BINS: usize = 128;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let width = ((hi - lo) / BINS as f64).max(f64::MIN_POSITIVE);
    let mut hist = [0usize; BINS];
    for &x in values {
        hist[(((x - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    // 3-bin smoothing keeps a noisy single bin from winning
    let peak = (0..BINS)
        .max_by_key(|&i| hist[i.saturating_sub(1)] + hist[i] + hist[(i + 1).min(BINS - 1)])
        .unwrap();
    let mode = lo + (peak as f64 + 0.5) * width;
    let mut above: Vec<f64> = values.iter().filter(|&&x| x > mode).map(|x| x - mode).collect();
    let sigma = if above.is_empty() {
        width
    } else {
        let mid = above.len() / 2;
        1.4826 * *above.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    (mode, sigma.max(width))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_data([10, 10, 10], (0..1000).map(|i| i as f32).collect(), [1.0; 3]).unwrap()
    }

    #[test]
    fn quantile_matches_sorted_oracle() {
        let v: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000) as f32).collect();
        let mut s = v.clone();
        s.sort_by(f32::total_cmp);
        for q in [0.0f64, 0.005, 0.25, 0.5, 0.995, 1.0] {
            assert_eq!(quantile(&v, q), s[(q * 999.0).round() as usize]);
        }
    }

    #[test]
    fn clipping_bounds_and_identity() {
        let v = ramp();
        let c = clip_intensities(&v, 0.005, 0.995);
        let lo = quantile(v.data(), 0.005);
        let hi = quantile(v.data(), 0.995);
        for (&a, &b) in v.data().iter().zip(c.data()) {
            assert!(b >= lo && b <= hi);
            if a >= lo && a <= hi {
                assert_eq!(a, b);
            }
        }
        assert_eq!(clip_intensities(&v, 0.0, 1.0), v);
        let c2 = clip_intensities(&c, 0.005, 0.995);
        assert_eq!(c2, c);
    }

    #[test]
    fn normalize_hits_target_moments() {
        let v = ramp();
        let n = normalize(&v, 0.449, 0.229).unwrap();
        assert!((n.mean() - 0.449).abs() < 1e-5);
        assert!((n.std() - 0.229).abs() < 1e-5);
        let twice = normalize(&n, 0.449, 0.229).unwrap();
        assert!(twice.data().iter().zip(n.data()).all(|(a, b)| (a - b).abs() < 1e-5));
        let c = Volume::filled([3, 3, 3], 2.0, [1.0; 3]).unwrap();
        assert!(matches!(normalize(&c, 0.449, 0.229), Err(Error::ZeroVariance)));
    }

    #[test]
    fn order_zero_is_a_global_factor() {
        let data: Vec<f32> = (0..1000).map(|i| 1.0 + ((i * 31) % 17) as f32).collect();
        let v = Volume::from_data([10, 10, 10], data, [1.0; 3]).unwrap();
        let c = correct_bias(&v, 0).unwrap();
        let r0 = c.data()[0] / v.data()[0];
        for (a, b) in v.data().iter().zip(c.data()) {
            assert!((b / a - r0).abs() < 1e-6);
        }
    }

    #[test]
    fn exponent_count_is_binomial() {
        for order in 0..6 {
            assert_eq!(exponents(order).len(), (order + 1) * (order + 2) * (order + 3) / 6);
        }
    }
}
