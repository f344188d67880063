mod common;

use std::collections::HashSet;

use common::synthetic_dataset;
use proptest::prelude::*;
use radn::data::{load_image, random_coords, save_image, synth_distort, synth_reference, DistortionKind, MAX_SEVERITY};
use radn::{DatasetManifest, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ppm_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for i in 0..5 {
        let (w, h) = if i == 0 {
            (64, 64)
        } else {
            (rng.gen_range(1..80), rng.gen_range(1..80))
        };
        let px: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = ImageBuffer::new(w, h, px).unwrap();
        let p = dir.path().join(format!("img{i}.ppm"));
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }
}

#[test]
fn png_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let img = synth_reference(40, 24, 3);
    let p = dir.path().join("x.png");
    save_image(&img, &p).unwrap();
    assert_eq!(load_image(&p).unwrap(), img);
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic_dataset(dir.path(), 2, 7, 40, 1);
    let path = dir.path().join("copy.tsv");
    m.save(&path).unwrap();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.to_text(), m.to_text());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), m.to_text());
}

#[test]
fn generator_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synthetic_dataset(a.path(), 2, 25, 40, 11);
    let mb = synthetic_dataset(b.path(), 2, 25, 40, 11);
    assert_eq!(ma.to_text(), mb.to_text());
    for (ra, rb) in ma.records.iter().zip(&mb.records) {
        let fa = std::fs::read(ma.resolve(&ra.dist_path)).unwrap();
        let fb = std::fs::read(mb.resolve(&rb.dist_path)).unwrap();
        assert_eq!(fa, fb);
    }
    let kinds: HashSet<&str> = ma.records.iter().map(|r| r.tag.as_str()).collect();
    assert_eq!(kinds.len(), DistortionKind::ALL.len());
    assert_eq!(ma.groups().len(), 2 * DistortionKind::ALL.len());
}

#[test]
fn error_grows_with_severity() {
    for seed in 0..3 {
        let r = synth_reference(48, 48, seed);
        for kind in DistortionKind::ALL {
            let errs: Vec<f64> = (1..=MAX_SEVERITY)
                .map(|s| synth_distort(&r, kind, s, seed + 7).unwrap().0.mse(&r).unwrap())
                .collect();
            assert!(errs.windows(2).all(|w| w[1] >= w[0]), "{kind}: {errs:?}");
        }
    }
}

#[test]
fn pseudo_mos_tracks_severity() {
    let r = synth_reference(32, 32, 0);
    for kind in DistortionKind::ALL {
        for s in 1..=MAX_SEVERITY {
            let (_, mos) = synth_distort(&r, kind, s, 99).unwrap();
            let centre = 100.0 - 15.0 * s as f32;
            assert!((mos - centre).abs() <= 2.0);
        }
    }
}

#[test]
fn random_corners_are_uniform() {
    // Quadrants of the corner range; 33 valid positions per axis keeps the
    // four bins equal up to the shared middle row and column.
    let (w, h, p) = (64, 64, 32);
    let coords = random_coords(w, h, p, 10_000, 17);
    let mut bins = [0f64; 4];
    let mut expect = [0f64; 4];
    let span = (w - p + 1) as f64;
    let cut = 16;
    let frac_lo = (cut + 1) as f64 / span;
    for c in &coords {
        assert!(c.y + p <= h && c.x + p <= w);
        bins[usize::from(c.y > cut) * 2 + usize::from(c.x > cut)] += 1.0;
    }
    for (i, e) in expect.iter_mut().enumerate() {
        let fy = if i / 2 == 0 { frac_lo } else { 1.0 - frac_lo };
        let fx = if i % 2 == 0 { frac_lo } else { 1.0 - frac_lo };
        *e = fy * fx * coords.len() as f64;
    }
    let chi2: f64 = bins.iter().zip(&expect).map(|(o, e)| (o - e).powi(2) / e).sum();
    // Upper 0.001 point of chi-square with 3 degrees of freedom.
    assert!(chi2 < 16.266, "chi2 = {chi2}, bins {bins:?}");
}

#[test]
fn reference_split_never_leaks() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic_dataset(dir.path(), 10, 3, 32, 2);
    for seed in 0..5 {
        let (train, val) = m.split_by_reference(0.2, seed);
        assert_eq!(train.len() + val.len(), m.len());
        assert_eq!(val.len(), 2 * 3);
        let tr: HashSet<_> = train.records.iter().map(|r| &r.ref_path).collect();
        assert!(val.records.iter().all(|r| !tr.contains(&r.ref_path)));
    }
    let (a, _) = m.split_by_reference(0.2, 4);
    let (b, _) = m.split_by_reference(0.2, 4);
    assert_eq!(a.records, b.records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distortions_are_pure_functions(seed in any::<u64>(), k in 0usize..5, s in 1u8..=5) {
        let r = synth_reference(24, 24, seed);
        let kind = DistortionKind::ALL[k];
        let a = synth_distort(&r, kind, s, seed ^ 1).unwrap();
        let b = synth_distort(&r, kind, s, seed ^ 1).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn planar_conversion_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageBuffer::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        prop_assert_eq!(ImageBuffer::from_planar(w, h, &img.to_planar()).unwrap(), img);
    }
}
