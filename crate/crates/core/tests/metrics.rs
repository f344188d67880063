mod common;

use common::{pearson, rank_oracle, spearman};
use proptest::prelude::*;
use radn::metrics::{plcc, rank, srocc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random series; with `ties`, values are drawn from a handful of levels.
fn series(rng: &mut impl Rng, n: usize, ties: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if ties {
                rng.gen_range(0..6) as f64
            } else {
                rng.gen_range(-100.0..100.0)
            }
        })
        .collect()
}

#[test]
fn ranks_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    assert_eq!(rank(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
    assert_eq!(rank(&[5.0, 5.0, 7.0]), vec![1.5, 1.5, 3.0]);
    for ties in [false, true] {
        let v = series(&mut rng, 50, ties);
        assert_eq!(rank(&v), rank_oracle(&v));
    }
}

#[test]
fn correlations_match_definitions_on_random_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..1000 {
        let n = rng.gen_range(3..=200);
        let ties = i % 2 == 1;
        let a = series(&mut rng, n, ties);
        let noise = series(&mut rng, n, ties);
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + 0.7 * e).collect();
        let (Ok(p), Ok(s)) = (plcc(&a, &b), srocc(&a, &b)) else {
            continue;
        };
        assert!((p - pearson(&a, &b)).abs() < 1e-9, "plcc series {i}");
        assert!((s - spearman(&a, &b)).abs() < 1e-9, "srocc series {i}");
    }
}

#[test]
fn reference_values() {
    let want = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
    assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - want).abs() < 1e-12);
    assert!((srocc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    let s = [3.0, -1.0, 4.0, 1.5];
    let neg: Vec<f64> = s.iter().map(|v| -2.0 * v + 7.0).collect();
    assert!((plcc(&s, &s).unwrap() - 1.0).abs() < 1e-12);
    assert!((plcc(&s, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(srocc(&s, &neg).unwrap(), -1.0);
}

#[test]
fn undefined_inputs_are_errors() {
    assert!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(srocc(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
    assert!(srocc(&[1.0], &[1.0]).is_err());
    assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    assert!(plcc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

fn shuffled(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn srocc_is_invariant_under_increasing_maps(
        a in prop::collection::vec(-10.0f64..10.0, 3..60),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-5.0..5.0)).collect();
        if let Ok(s) = srocc(&a, &b) {
            let warped: Vec<f64> = b.iter().map(|x| x.powi(3) + x.exp()).collect();
            prop_assert_eq!(srocc(&a, &warped).unwrap(), s);
        }
    }

    #[test]
    fn plcc_is_invariant_under_positive_affine_maps(
        a in prop::collection::vec(-10.0f64..10.0, 3..60),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
        if let Ok(p) = plcc(&a, &b) {
            let moved: Vec<f64> = b.iter().map(|x| scale * x + shift).collect();
            prop_assert!((plcc(&a, &moved).unwrap() - p).abs() < 1e-9);
            let flipped: Vec<f64> = b.iter().map(|x| -scale * x + shift).collect();
            prop_assert!((plcc(&a, &flipped).unwrap() + p).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_and_permutation_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 3..60),
        seed in any::<u64>(),
    ) {
        let b: Vec<f64> = a.iter().rev().map(|x| x.sin()).collect();
        let perm = shuffled(seed, a.len());
        let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        if let (Ok(p), Ok(s)) = (plcc(&a, &b), srocc(&a, &b)) {
            prop_assert!((plcc(&b, &a).unwrap() - p).abs() < 1e-12);
            prop_assert!((srocc(&b, &a).unwrap() - s).abs() < 1e-12);
            prop_assert!((plcc(&pa, &pb).unwrap() - p).abs() < 1e-9);
            prop_assert!((srocc(&pa, &pb).unwrap() - s).abs() < 1e-9);
        }
    }

    #[test]
    fn tie_free_shortcut_equals_plcc_of_ranks(seed in any::<u64>(), n in 3usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = series(&mut rng, n, false);
        let b = series(&mut rng, n, false);
        let via_ranks = plcc(&rank(&a), &rank(&b)).unwrap();
        prop_assert!((srocc(&a, &b).unwrap() - via_ranks).abs() < 1e-9);
        prop_assert!(srocc(&a, &b).unwrap().abs() <= 1.0);
    }
}
