use deepbet_core::phantom::{generate, PhantomSpec};
use deepbet_core::preprocess::*;
use deepbet_core::volume::Volume;
use deepbet_core::Error;

const DIMS: [usize; 3] = [80, 96, 80];

fn brain_voxels(mask: &Volume) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask.data()[i] > 0.5).collect()
}

#[test]
fn bias_free_phantom_is_left_alone() {
    for seed in 0..4 {
        let p = generate(&PhantomSpec::with_seed(seed, DIMS)).unwrap();
        let c = correct_bias(&p.image, 4).unwrap();
        let fg = brain_voxels(&p.mask);
        let ms: f64 = fg
            .iter()
            .map(|&i| {
                let a = p.image.data()[i] as f64;
                ((c.data()[i] as f64 - a) / a).powi(2)
            })
            .sum::<f64>()
            / fg.len() as f64;
        assert!(ms.sqrt() < 0.02, "seed {seed}: relative rms change {}", ms.sqrt());
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma).powi(2);
        bb += (y - mb).powi(2);
    }
    ab / (aa * bb).sqrt()
}

#[test]
fn linear_field_is_recovered() {
    let p = generate(&PhantomSpec::with_seed(11, DIMS)).unwrap();
    let mut img = p.image.clone();
    let mut truth = vec![0.0; img.len()];
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let i = img.index(x, y, z);
                truth[i] = 0.3 * x as f64 / DIMS[0] as f64 - 0.2 * y as f64 / DIMS[1] as f64
                    + 0.25 * z as f64 / DIMS[2] as f64;
                img.data_mut()[i] *= truth[i].exp() as f32;
            }
        }
    }
    let fg = brain_voxels(&p.mask);
    let t: Vec<f64> = fg.iter().map(|&i| truth[i]).collect();
    for order in [1, 2, 3] {
        let est = estimate_bias(&img, order).unwrap();
        let e: Vec<f64> = fg.iter().map(|&i| est[i]).collect();
        let r = correlation(&t, &e);
        assert!(r > 0.99, "order {order}: correlation {r}");
    }
}

#[test]
fn non_positive_foreground_is_rejected() {
    let mut data = vec![-5.0f32; 1000];
    for v in data.iter_mut().skip(500) {
        *v = -1.0;
    }
    let v = Volume::from_data([10, 10, 10], data, [1.0; 3]).unwrap();
    assert!(matches!(correct_bias(&v, 2), Err(Error::NonPositiveIntensities)));
}

#[test]
fn normalize_ignores_positive_affine_pretransform() {
    let p = generate(&PhantomSpec::with_seed(3, [48, 56, 48])).unwrap();
    let a = normalize(&p.image, 0.449, 0.229).unwrap();
    let shifted = p.image.with_data(p.image.data().iter().map(|&x| 3.5 * x + 12.0).collect()).unwrap();
    let b = normalize(&shifted, 0.449, 0.229).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn full_preprocess_hits_target_moments() {
    let p = generate(&PhantomSpec::with_seed(5, [48, 56, 48])).unwrap();
    let out = preprocess(&p.image, &PreprocessConfig::default()).unwrap();
    assert!((out.mean() - 0.449).abs() < 1e-4);
    assert!((out.std() - 0.229).abs() < 1e-4);
}
