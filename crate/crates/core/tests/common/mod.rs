//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use radn::data::{build_synthetic_manifest, write_synthetic_references};
use radn::{DatasetManifest, Tensor};
use rand::Rng;

pub fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Bilinear read with zero outside the map, written out corner by corner.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    px(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + px(y0, x0 + 1.0) * (1.0 - fy) * fx
        + px(y0 + 1.0, x0) * fy * (1.0 - fx)
        + px(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Deformable convolution, one output value at a time.
/// `x`: [N, C, H, W], `off`: [N, 2k², H, W], `w`: [O, C, k, k].
pub fn deform_oracle(x: &Tensor<f64>, off: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, k, _] = w.shape().try_into().unwrap();
    let r = (k / 2) as f64;
    let p = h * wd;
    let mut out = vec![0.0; n * o * p];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        let plane = &x.data()[(b * c + ic) * p..][..p];
                        for t in 0..k * k {
                            let oi = |ch: usize| off.data()[((b * 2 * k * k) + ch) * p + oy * wd + ox];
                            let y = oy as f64 + (t / k) as f64 - r + oi(2 * t);
                            let xx = ox as f64 + (t % k) as f64 - r + oi(2 * t + 1);
                            acc += w.data()[(oc * c + ic) * k * k + t] * bilinear(plane, h, wd, y, xx);
                        }
                    }
                    out[(b * o + oc) * p + oy * wd + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation straight from its definition.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

/// Sort (value, index) pairs and hand out positions, averaging over runs
/// of equal values.
pub fn rank_oracle(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
    idx.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for e in &idx[i..=j] {
            ranks[e.1] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman as Pearson of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&rank_oracle(a), &rank_oracle(b))
}

/// `refs` procedural references of `size` pixels, `per_ref` distortions each.
pub fn synthetic_dataset(dir: &Path, refs: usize, per_ref: usize, size: usize, seed: u64) -> DatasetManifest {
    let ref_dir = dir.join("refs");
    write_synthetic_references(&ref_dir, refs, size, seed).unwrap();
    build_synthetic_manifest(&ref_dir, dir.join("data"), per_ref, seed).unwrap()
}
