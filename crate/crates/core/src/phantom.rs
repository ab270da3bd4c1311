//! Synthetic head phantoms with probabilistic brain masks.
//!
//! The brain is an ellipsoid whose radius is modulated by low-order angular
//! harmonics. Every tissue boundary is a level set of one pseudo signed
//! distance `d(p) = |p - c| (1 - s(u) / ρ)`, where `ρ` is the radius in
//! ellipsoid-normalized coordinates and `s(u)` the modulated surface along
//! direction `u`; `d` is exact for spheres and grows linearly along every ray
//! from the center, so the mask `sigmoid(-d / w)` decreases monotonically
//! outward. Layers from the inside: white matter, gray matter (with a gyral
//! ripple on its inner boundary), CSF (still inside the mask), skull, scalp.
//!
//! Randomness comes from ChaCha8 seeded with the phantom seed, so output is
//! identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Gaussian noise std relative to white-matter intensity; `None` draws it.
    pub noise_std: Option<f64>,
    /// Maximum |log| amplitude of a smooth multiplicative field; 0 disables it.
    pub bias_magnitude: f64,
    /// Rigid rotation about the x (left-right) axis, degrees.
    pub rotation_deg: f64,
    /// Mask transition width (sigmoid scale) in voxels; `None` draws it.
    pub edge_width: Option<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [80, 96, 80],
            noise_std: None,
            bias_magnitude: 0.0,
            rotation_deg: 0.0,
            edge_width: None,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64, dims: [usize; 3]) -> Self {
        PhantomSpec {
            seed,
            dims,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub seed: u64,
    pub image: Volume,
    pub mask: Volume,
}

/// Fixed angular harmonics of a unit direction (degree ≤ 3).
fn harmonics(u: [f64; 3]) -> [f64; 10] {
    let [x, y, z] = u;
    [
        x,
        y,
        z,
        x * y,
        y * z,
        x * z,
        x * x - y * y,
        3.0 * z * z - 1.0,
        x * (x * x - 3.0 * y * y),
        y * (3.0 * x * x - y * y),
    ]
}

/// Sampled geometry and contrast of one phantom.
#[derive(Clone, Debug)]
pub struct Anatomy {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    lobes: [f64; 10],
    gm: f64,
    csf: f64,
    skull: f64,
    scalp: f64,
    ripple_freq: f64,
    ripple_phase: [f64; 3],
    width: f64,
    intensity: Intensity,
    noise: f64,
    gain: f64,
    blobs: Vec<([f64; 3], [f64; 3], f64)>,
    bias: [f64; 9],
}

#[derive(Clone, Copy, Debug)]
struct Intensity {
    wm: f64,
    gm: f64,
    csf: f64,
    skull: f64,
    scalp: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Anatomy {
    pub fn sample(spec: &PhantomSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.dims.map(|d| d as f64);
        if spec.dims.iter().any(|&d| d < 24) {
            return Err(Error::SpecInfeasible(format!(
                "dims {:?} too small for a head phantom (minimum 24 per axis)",
                spec.dims
            )));
        }
        let scale = n.iter().copied().fold(f64::INFINITY, f64::min);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let radii = [n[0] * u(0.29, 0.34), n[1] * u(0.29, 0.34), n[2] * u(0.28, 0.33)];
        let center = [
            (n[0] - 1.0) / 2.0 + scale * u(-0.01, 0.01),
            (n[1] - 1.0) / 2.0 + scale * u(-0.01, 0.01),
            (n[2] - 1.0) / 2.0 + scale * u(-0.01, 0.01),
        ];
        let mut lobes = [0.0; 10];
        for (k, l) in lobes.iter_mut().enumerate() {
            let amp = if k < 3 { 0.01 } else { 0.03 };
            *l = u(-amp, amp);
        }
        let t = (scale / 96.0).max(0.5);
        let gm = u(2.5, 4.0) * t;
        let csf = u(1.0, 2.0) * t;
        let skull = u(2.5, 4.0) * t;
        let scalp = u(2.0, 3.5) * t;
        let wm = u(0.9, 1.1);
        let intensity = Intensity {
            wm,
            gm: wm * u(0.6, 0.72),
            csf: wm * u(0.12, 0.22),
            skull: wm * u(0.38, 0.48),
            scalp: wm * u(0.26, 0.34),
        };
        let width = spec.edge_width.unwrap_or_else(|| u(0.4, 0.6));
        let noise = spec.noise_std.unwrap_or_else(|| u(0.01, 0.04));
        let gain = u(80.0, 1200.0);
        let ripple_freq = u(0.25, 0.4) / t.max(0.5);
        let ripple_phase = [u(0.0, 6.3), u(0.0, 6.3), u(0.0, 6.3)];
        // two bright blobs below the front of the brain, outside the skull
        let mut blobs = Vec::new();
        for side in [-1.0, 1.0] {
            let r = scale * u(0.05, 0.07);
            let c = [
                center[0] + side * radii[0] * u(0.35, 0.5),
                center[1] + radii[1] * u(0.75, 0.85),
                center[2] - radii[2] * u(0.7, 0.8),
            ];
            blobs.push((c, [r, r * u(0.9, 1.2), r * u(0.8, 1.0)], wm * u(0.7, 0.9)));
        }
        let mut bias = [0.0; 9];
        if spec.bias_magnitude > 0.0 {
            for b in bias.iter_mut() {
                *b = u(-1.0, 1.0);
            }
            let norm: f64 = bias.iter().map(|b| b.abs()).sum();
            for b in bias.iter_mut() {
                *b *= spec.bias_magnitude / norm;
            }
        }
        let a = Anatomy {
            center,
            radii,
            lobes,
            gm,
            csf,
            skull,
            scalp,
            ripple_freq,
            ripple_phase,
            width,
            intensity,
            noise,
            gain,
            blobs,
            bias,
        };
        a.check_fits(spec)?;
        Ok(a)
    }

    fn outer_thickness(&self) -> f64 {
        self.skull + self.scalp + 4.0 * self.width
    }

    /// Largest surface scale `s(u)` over a dense set of directions.
    fn max_surface(&self) -> f64 {
        let mut best: f64 = 1.0;
        for i in 0..40 {
            let th = std::f64::consts::PI * (i as f64 + 0.5) / 40.0;
            for j in 0..80 {
                let ph = std::f64::consts::PI * j as f64 / 40.0;
                let dir = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                let s = 1.0 + harmonics(dir).iter().zip(&self.lobes).map(|(h, l)| h * l).sum::<f64>();
                best = best.max(s);
            }
        }
        best * 1.01
    }

    fn check_fits(&self, spec: &PhantomSpec) -> Result<()> {
        let smax = self.max_surface();
        let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
        let [rx, ry, rz] = self.radii;
        // half-extents of the rotated ellipsoid's bounding box
        let ext = [
            rx,
            ((ry * cos).powi(2) + (rz * sin).powi(2)).sqrt(),
            ((ry * sin).powi(2) + (rz * cos).powi(2)).sqrt(),
        ];
        let mid = spec.dims.map(|d| (d as f64 - 1.0) / 2.0);
        for a in 0..3 {
            let reach = ext[a] * smax + self.outer_thickness() + (self.center[a] - mid[a]).abs();
            let room = mid[a];
            if reach + 1.0 > room {
                return Err(Error::SpecInfeasible(format!(
                    "head reaches {reach:.1} voxels from the grid center on axis {a}, only {room:.1} available"
                )));
            }
        }
        Ok(())
    }

    /// Pseudo signed distance to the brain (mask) surface, in voxels.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let rel = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let q = [rel[0] / self.radii[0], rel[1] / self.radii[1], rel[2] / self.radii[2]];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let len = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        if rho < 1e-12 {
            return -self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        }
        let dir = [q[0] / rho, q[1] / rho, q[2] / rho];
        let s = 1.0 + harmonics(dir).iter().zip(&self.lobes).map(|(h, l)| h * l).sum::<f64>();
        len * (1.0 - s / rho)
    }

    pub fn mask_value(&self, p: [f64; 3]) -> f64 {
        sigmoid(-self.distance(p) / self.width)
    }

    fn intensity_at(&self, p: [f64; 3]) -> f64 {
        let d = self.distance(p);
        let w = self.width;
        let i = &self.intensity;
        let ripple = (self.ripple_freq * p[0] + self.ripple_phase[0]).sin()
            * (self.ripple_freq * p[1] + self.ripple_phase[1]).sin()
            * (self.ripple_freq * p[2] + self.ripple_phase[2]).sin();
        let wm_edge = -self.csf - self.gm * (1.0 + 0.45 * ripple);
        let gm_edge = -self.csf;
        let skull_in = 0.0;
        let skull_out = self.skull;
        let scalp_out = self.skull + self.scalp;
        let step = |edge: f64| sigmoid((edge - d) / w);
        let mut v = i.scalp * step(scalp_out)
            + (i.skull - i.scalp) * step(skull_out)
            + (i.csf - i.skull) * step(skull_in)
            + (i.gm - i.csf) * step(gm_edge)
            + (i.wm - i.gm) * step(wm_edge);
        for (c, r, val) in &self.blobs {
            let e = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt();
            let inside = sigmoid((1.0 - e) * r[0] / w);
            v += (val - v) * inside * (1.0 - self.mask_value(p));
        }
        v
    }

    fn bias_at(&self, p: [f64; 3], dims: [usize; 3]) -> f64 {
        let u: Vec<f64> = (0..3).map(|a| 2.0 * p[a] / (dims[a].max(2) - 1) as f64 - 1.0).collect();
        let b = &self.bias;
        (b[0] * u[0]
            + b[1] * u[1]
            + b[2] * u[2]
            + b[3] * u[0] * u[1]
            + b[4] * u[1] * u[2]
            + b[5] * u[0] * u[2]
            + b[6] * (u[0] * u[0] - 1.0 / 3.0)
            + b[7] * (u[1] * u[1] - 1.0 / 3.0)
            + b[8] * (u[2] * u[2] - 1.0 / 3.0))
            .exp()
    }
}

/// Phantom image and probability mask for `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let anatomy = Anatomy::sample(spec)?;
    let dims = spec.dims;
    let [nx, ny, nz] = dims;
    let mid = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    // output voxel -> anatomy frame (inverse rotation about x through the grid center)
    let to_anatomy = |p: [f64; 3]| {
        let y = p[1] - mid[1];
        let z = p[2] - mid[2];
        [p[0], mid[1] + cos * y + sin * z, mid[2] - sin * y + cos * z]
    };
    let mut image = vec![0f32; nx * ny * nz];
    let mut mask = vec![0f32; nx * ny * nz];
    image
        .par_chunks_mut(nx * ny)
        .zip(mask.par_chunks_mut(nx * ny))
        .enumerate()
        .for_each(|(z, (img, msk))| {
            // per-plane stream keeps noise independent of thread scheduling
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + z as u64);
            let normal = rand_distr::Normal::new(0.0, anatomy.noise * anatomy.intensity.wm).unwrap();
            for y in 0..ny {
                for x in 0..nx {
                    let p = to_anatomy([x as f64, y as f64, z as f64]);
                    let clean = anatomy.intensity_at(p) * anatomy.bias_at(p, dims);
                    let re = clean + rng.sample(normal);
                    let im: f64 = rng.sample(normal);
                    // magnitude of complex Gaussian noise, as in MR reconstruction
                    img[x + nx * y] = ((re * re + im * im).sqrt() * anatomy.gain) as f32;
                    msk[x + nx * y] = anatomy.mask_value(p) as f32;
                }
            }
        });
    let spacing = [1.0; 3];
    let mut affine = crate::volume::diagonal_affine(spacing);
    for a in 0..3 {
        affine[(a, 3)] = -mid[a];
    }
    Ok(Phantom {
        seed: spec.seed,
        image: Volume::new(dims, image, spacing, affine)?,
        mask: Volume::new(dims, mask, spacing, affine)?,
    })
}

/// `n` phantoms with seeds `base_seed..base_seed + n`.
pub fn generate_set(n: usize, base_seed: u64, dims: [usize; 3]) -> Result<Vec<Phantom>> {
    (0..n as u64)
        .map(|i| generate(&PhantomSpec::with_seed(base_seed + i, dims)))
        .collect()
}

/// Splits by seed parity: even seeds train, odd seeds are held out.
pub fn split_by_parity(set: Vec<Phantom>) -> (Vec<Phantom>, Vec<Phantom>) {
    set.into_iter().partition(|p| p.seed % 2 == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec::with_seed(7, [48, 48, 48]);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn tiny_grid_is_infeasible() {
        assert!(matches!(
            generate(&PhantomSpec::with_seed(1, [16, 40, 40])),
            Err(Error::SpecInfeasible(_))
        ));
    }

    #[test]
    fn mask_is_monotone_along_rays() {
        let spec = PhantomSpec::with_seed(3, [64, 64, 64]);
        let a = Anatomy::sample(&spec).unwrap();
        for k in 0..50 {
            let th = k as f64 * 0.7;
            let ph = k as f64 * 1.3;
            let dir = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            let mut prev = 1.0;
            for s in 0..200 {
                let t = s as f64 * 0.2;
                let p = [
                    a.center[0] + t * dir[0],
                    a.center[1] + t * dir[1],
                    a.center[2] + t * dir[2],
                ];
                let m = a.mask_value(p);
                assert!(m <= prev + 1e-12);
                prev = m;
            }
        }
    }

    #[test]
    fn tissue_ordering() {
        let spec = PhantomSpec {
            noise_std: Some(0.0),
            ..PhantomSpec::with_seed(5, [80, 80, 80])
        };
        let a = Anatomy::sample(&spec).unwrap();
        let i = a.intensity;
        assert!(i.scalp < i.skull && i.skull < i.gm && i.gm < i.wm);
    }
}
