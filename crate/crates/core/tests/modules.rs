mod common;

use common::{deform_oracle, rand_vec, tensor};
use proptest::prelude::*;
use radn::model::weighted_average;
use radn::nn::{attention_matrix, patch_attention, AttentionVars};
use radn::{build_model, Model, ModelConfig, Tape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn deform_case(rng: &mut impl Rng, offset_scale: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let k = [1, 3][rng.gen_range(0..2)];
    let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
    let x = tensor(&[n, c, h, w], rand_vec(rng, n * c * h * w, 1.0));
    let off = tensor(
        &[n, 2 * k * k, h, w],
        rand_vec(rng, n * 2 * k * k * h * w, offset_scale),
    );
    let wt = tensor(&[o, c, k, k], rand_vec(rng, o * c * k * k, 1.0));
    (x, off, wt)
}

fn deform(x: &Tensor<f64>, off: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::<f64>::new();
    let (xv, ov, wv) = (t.constant(x.clone()), t.constant(off.clone()), t.constant(w.clone()));
    let y = t.deform_conv(xv, ov, wv).unwrap();
    t.value(y).clone()
}

#[test]
fn deform_matches_per_tap_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..60 {
        let (x, off, w) = deform_case(&mut rng, 2.5);
        let got = deform(&x, &off, &w);
        let want = deform_oracle(&x, &off, &w);
        for (g, e) in got.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_offsets_equal_same_padded_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (x, off, w) = deform_case(&mut rng, 1.0);
        let zero = off.map(|_| 0.0);
        let k = w.shape()[2];
        let want = radn::tensor::conv2d_naive(&x, &w, None, 1, k / 2).unwrap();
        assert!(deform(&x, &zero, &w).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn constant_integer_shift_equals_conv_of_shifted_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let (x, off, w) = deform_case(&mut rng, 1.0);
        let (dy, dx) = (rng.gen_range(-2i64..3), rng.gen_range(-2i64..3));
        let shift = tensor(
            off.shape(),
            (0..off.numel())
                .map(|i| {
                    let ch = (i / (off.shape()[2] * off.shape()[3])) % off.shape()[1];
                    if ch % 2 == 0 {
                        dy as f64
                    } else {
                        dx as f64
                    }
                })
                .collect(),
        );
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let moved: Vec<f64> = (0..x.numel())
            .map(|i| {
                let (yy, xx) = (((i / wd) % h) as i64 + dy, (i % wd) as i64 + dx);
                let base = i / (h * wd);
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= wd as i64 {
                    0.0
                } else {
                    x.data()[base * h * wd + yy as usize * wd + xx as usize]
                }
            })
            .collect();
        let moved = tensor(&[n, c, h, wd], moved);
        let k = w.shape()[2];
        let want = radn::tensor::conv2d_naive(&moved, &w, None, 1, k / 2).unwrap();
        // The two forms differ only where a tap leaves the unshifted map,
        // so compare the interior.
        let got = deform(&x, &shift, &w);
        let r = (k / 2) as i64;
        for b in 0..n {
            for o in 0..w.shape()[0] {
                for yy in 0..h as i64 {
                    for xx in 0..wd as i64 {
                        let inside = |v: i64, lim: usize| v - r >= 0 && v + r < lim as i64;
                        if !(inside(yy, h) && inside(xx, wd)) {
                            continue;
                        }
                        let i = ((b * w.shape()[0] + o) * h + yy as usize) * wd + xx as usize;
                        assert!((got.data()[i] - want.data()[i]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn attn_weights(rng: &mut impl Rng, d: usize) -> Vec<Tensor<f64>> {
    (0..4).map(|_| tensor(&[d, d], rand_vec(rng, d * d, 0.8))).collect()
}

fn run_attention(x: &Tensor<f64>, ws: &[Tensor<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let v: Vec<_> = ws.iter().map(|w| t.constant(w.clone())).collect();
    let w = AttentionVars {
        query: v[0],
        key: v[1],
        value: v[2],
        output: v[3],
    };
    let a = attention_matrix(&mut t, xv, &w).unwrap();
    let z = patch_attention(&mut t, xv, &w).unwrap();
    (t.value(a).clone(), t.value(z).clone())
}

#[test]
fn single_patch_attention_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let d = rng.gen_range(1..9);
        let x = rand_vec(&mut rng, d, 2.0);
        let ws = attn_weights(&mut rng, d);
        let (_, z) = run_attention(&tensor(&[1, d], x.clone()), &ws);
        let (wv, wz) = (ws[2].data(), ws[3].data());
        let v: Vec<f64> = (0..d).map(|i| (0..d).map(|j| wv[i * d + j] * x[j]).sum()).collect();
        for i in 0..d {
            let want = (0..d).map(|j| wz[i * d + j] * v[j]).sum::<f64>() + x[i];
            assert!((z.data()[i] - want).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.gen_range(1..12), rng.gen_range(1..9));
        let x = tensor(&[n, d], rand_vec(&mut rng, n * d, 3.0));
        let (a, _) = run_attention(&x, &attn_weights(&mut rng, d));
        for row in a.data().chunks(n) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_commutes_with_patch_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.gen_range(2..10), rng.gen_range(1..8));
        let x = rand_vec(&mut rng, n * d, 2.0);
        let ws = attn_weights(&mut rng, d);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
        let (_, z) = run_attention(&tensor(&[n, d], x), &ws);
        let (_, pz) = run_attention(&tensor(&[n, d], px), &ws);
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..d {
                prop_assert!((pz.data()[r * d + j] - z.data()[i * d + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pooled_score_lies_between_extremes(
        pairs in prop::collection::vec((1e-6f64..10.0, -50.0f64..50.0), 1..40)
    ) {
        let (w, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut t = Tape::<f64>::new();
        let wv = t.constant(tensor(&[w.len()], w.clone()));
        let sv = t.constant(tensor(&[s.len()], s.clone()));
        let q = weighted_average(&mut t, wv, sv, &[w.len()]).unwrap();
        let q = t.value(q).data()[0];
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q >= lo - 1e-9 && q <= hi + 1e-9);
    }
}

#[test]
fn patch_weights_are_bounded_below_by_epsilon() {
    let cfg = ModelConfig::toy(Variant::Radn);
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for seed in 0..5 {
        let mut params = build_model(&cfg, seed).unwrap();
        // Push the weight branch firmly negative so every relu is off.
        params.get_mut("head.weight.fc2.bias").unwrap().data_mut()[0] = -100.0;
        let n = 3;
        let side = cfg.patch_size;
        let r: Tensor<f32> = tensor(&[n, 3, side, side], rand_vec(&mut rng, n * 3 * side * side, 1.0)).cast();
        let (tape, out) = model.score(&params, &r, &r.map(|v| v * 0.5), &[n]).unwrap();
        let w = tape.value(out.weights).data();
        let den: f32 = w.iter().sum();
        assert!(w.iter().all(|&v| v >= cfg.weight_epsilon));
        assert!(den >= n as f32 * cfg.weight_epsilon);
        assert!(tape.value(out.quality).data()[0].is_finite());
    }
}

#[test]
fn variants_agree_at_initialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let side = 32;
    let r: Tensor<f32> = tensor(&[4, 3, side, side], rand_vec(&mut rng, 4 * 3 * side * side, 1.0)).cast();
    let d = r.map(|v| v * 0.9 + 0.02);
    let mut q = Vec::new();
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let (tape, out) = Model::new(cfg.clone())
            .unwrap()
            .score(&build_model(&cfg, 7).unwrap(), &r, &d, &[3, 1])
            .unwrap();
        q.push(tape.value(out.quality).clone());
    }
    assert!(q[0].max_abs_diff(&q[1]) < 1e-5 && q[0].max_abs_diff(&q[2]) < 1e-5);
}
