use deepbet_core::phantom::*;

// bounds measured over seeds 0..100 at the default size: fractions
// 0.105..0.153, coefficient of variation 0.076
#[test]
fn default_phantoms_have_plausible_and_varied_brains() {
    let dims = PhantomSpec::default().dims;
    let set = generate_set(100, 0, dims).unwrap();
    let seeds: std::collections::BTreeSet<u64> = set.iter().map(|p| p.seed).collect();
    assert_eq!(seeds.len(), 100);
    let fractions: Vec<f64> = set
        .iter()
        .map(|p| {
            assert!(p.mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
            assert!(p.image.data().iter().all(|v| v.is_finite()));
            p.mask.data().iter().map(|&m| m as f64).sum::<f64>() / p.mask.len() as f64
        })
        .collect();
    for f in &fractions {
        assert!((0.10..=0.45).contains(f), "fraction {f}");
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let sd = (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(sd / mean > 0.05, "cv {}", sd / mean);
}

#[test]
fn empty_set_and_parity_split() {
    assert!(generate_set(0, 7, [32, 32, 32]).unwrap().is_empty());
    let (train, held) = split_by_parity(generate_set(5, 10, [48, 56, 48]).unwrap());
    assert_eq!(train.iter().map(|p| p.seed).collect::<Vec<_>>(), vec![10, 12, 14]);
    assert_eq!(held.iter().map(|p| p.seed).collect::<Vec<_>>(), vec![11, 13]);
}
