//! Central-difference gradient checks on the `f64` path.
//!
//! A check rebuilds the graph at `x + h` and `x - h` for each probed entry
//! and compares `(f(x+h) - f(x-h)) / 2h` with the tape's analytic gradient.
//! Probes whose perturbed passes land on a different side of a relu hinge,
//! clamp edge or bilinear cell boundary than the base pass are not
//! differentiable there; they are counted as skipped rather than compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, Features, Model, ModelConfig, Variant};
use crate::nn::{patch_attention, AttentionVars};
use crate::params::{Bound, Params};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::Comparator;

/// Step used by every check in this crate.
pub const STEP: f64 = 1e-3;
/// Per-op threshold on the relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Threshold for a whole composed model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many entries per input (evenly spaced); `None` probes all.
    pub max_probes: Option<usize>,
}

impl CheckOptions {
    pub fn op() -> Self {
        Self {
            step: STEP,
            tolerance: OP_TOLERANCE,
            max_probes: None,
        }
    }

    pub fn model() -> Self {
        Self {
            step: STEP,
            tolerance: MODEL_TOLERANCE,
            max_probes: None,
        }
    }

    pub fn max_probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Input index and flat offset of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 0 => {
            if m == 1 {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..m).map(|i| i * (n - 1) / (m - 1)).collect();
            v.dedup();
            v
        }
        _ => (0..n).collect(),
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new().with_kink_tracking(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))?;
    Ok((v, tape.kink_signature()))
}

/// Compare analytic and central-difference gradients of the scalar built by
/// `f` with respect to every tensor in `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new().with_kink_tracking(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_sig = tape.kink_signature();
    tape.backward(loss)?;

    let mut report = CheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        for j in probe_indices(inputs[i].numel(), opts.max_probes) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let (plus, sig_p) = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let (minus, sig_m) = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// `sum(out * r)` for a fixed pseudo-random `r`, turning any tensor into a
/// scalar whose gradient exercises every output entry differently.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// The full finite-difference suite at toy width: one report per row,
/// covering elementwise arithmetic, matmul, the nonlinearities, conv2d,
/// bilinear sampling, the two attached modules when `variant` has them,
/// the scoring head, both losses, the comparator and the whole model.
pub fn suite(variant: Variant, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = CheckOptions::op();
    let mut rows = Vec::new();

    let a = random_tensor(&[3, 4], 1.0, &mut rng);
    let b = random_tensor(&[4], 1.0, &mut rng).map(|v| v + 2.5);
    rows.push(check(
        "elementwise",
        &[a.clone(), b],
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[0])?;
            let m = t.mul(d, v[0])?;
            let q = t.div(m, v[1])?;
            let c = t.scalar_mul(q, 0.7)?;
            let o = t.add_scalar(c, -0.2)?;
            random_projection(t, o, seed)
        },
        &op,
    )?);

    let m = random_tensor(&[4, 5], 1.0, &mut rng);
    rows.push(check(
        "matmul",
        &[a.clone(), m],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let yt = t.transpose(y)?;
            random_projection(t, yt, seed + 1)
        },
        &op,
    )?);

    let x = random_tensor(&[3, 5], 2.0, &mut rng);
    rows.push(check(
        "softmax+sigmoid+relu",
        &[x],
        |t, v| {
            let s = t.softmax(v[0])?;
            let g = t.sigmoid(v[0])?;
            let r = t.relu(v[0])?;
            let sg = t.add(s, g)?;
            let o = t.add(sg, r)?;
            random_projection(t, o, seed + 2)
        },
        &op,
    )?);

    let img = random_tensor(&[2, 3, 7, 7], 1.0, &mut rng);
    let w = random_tensor(&[4, 3, 3, 3], 0.5, &mut rng);
    let bias = random_tensor(&[4], 0.5, &mut rng);
    rows.push(check(
        "conv2d",
        &[img.clone(), w, bias],
        |t, v| {
            let s1 = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let s2 = t.conv2d(v[0], v[1], None, 2, 1)?;
            let p1 = random_projection(t, s1, seed + 3)?;
            let p2 = random_projection(t, s2, seed + 4)?;
            t.add(p1, p2)
        },
        &op,
    )?);

    let fmap = random_tensor(&[2, 5, 6], 1.0, &mut rng);
    let y = Tensor::scalar(rng.gen_range(0.2..3.8));
    let xc = Tensor::scalar(rng.gen_range(0.2..4.8));
    rows.push(check(
        "bilinear_sample",
        &[fmap, y, xc],
        |t, v| {
            let s = t.bilinear_sample(v[0], v[1], v[2])?;
            random_projection(t, s, seed + 5)
        },
        &op,
    )?);

    if variant.has_deform() {
        let k = ModelConfig::DEFORM_KERNEL;
        let fr = random_tensor(&[1, 3, 6, 6], 1.0, &mut rng);
        let fd = random_tensor(&[1, 3, 6, 6], 1.0, &mut rng);
        let ow = random_tensor(&[2 * k * k, 3, 3, 3], 0.3, &mut rng);
        let ob = random_tensor(&[2 * k * k], 0.5, &mut rng);
        let wr = random_tensor(&[2, 3, k, k], 0.5, &mut rng);
        let wd = random_tensor(&[2, 3, k, k], 0.5, &mut rng);
        rows.push(check(
            "ref_deform_conv",
            &[fr, fd, ow, ob, wr, wd],
            |t, v| {
                let off = t.predict_offsets(v[0], v[2], Some(v[3]), k)?;
                let (r, d) = t.ref_deform_conv(v[0], v[1], off, v[4], v[5])?;
                let pr = random_projection(t, r, seed + 6)?;
                let pd = random_projection(t, d, seed + 7)?;
                t.add(pr, pd)
            },
            &op,
        )?);
    }

    if variant.has_attention() {
        let d = 4;
        let mut ins = vec![random_tensor(&[5, d], 1.0, &mut rng)];
        ins.extend((0..4).map(|_| random_tensor(&[d, d], 0.6, &mut rng)));
        rows.push(check(
            "patch_attention",
            &ins,
            |t, v| {
                let w = AttentionVars {
                    query: v[1],
                    key: v[2],
                    value: v[3],
                    output: v[4],
                };
                let z = patch_attention(t, v[0], &w)?;
                random_projection(t, z, seed + 8)
            },
            &op,
        )?);
    }

    let cfg = ModelConfig::toy(variant);
    let model = Model::new(cfg.clone())?;
    let head: Params<f64> = jitter(&build_model(&cfg, seed)?.cast(), &mut rng)
        .iter()
        .filter(|(n, _)| n.starts_with("head."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let dim = cfg.feature_width;
    let mut ins = vec![
        random_tensor(&[5, dim], 1.0, &mut rng),
        random_tensor(&[5, dim], 1.0, &mut rng),
    ];
    let names: Vec<String> = head.names().map(str::to_string).collect();
    ins.extend(head.iter().map(|(_, t)| t.clone()));
    rows.push(check(
        "score_head",
        &ins,
        |t, v| {
            let p: Bound = names.iter().cloned().zip(v[2..].iter().copied()).collect();
            let f = Features {
                reference: v[0],
                distorted: v[1],
                offsets: None,
            };
            let out = model.score_head(t, &p, &f, &[2, 3])?;
            let sw = random_projection(t, out.weights, seed + 9)?;
            let ss = random_projection(t, out.scores, seed + 10)?;
            let q = random_projection(t, out.quality, seed + 11)?;
            let a = t.add(sw, ss)?;
            t.add(a, q)
        },
        &op,
    )?);

    let pred = random_tensor(&[6], 1.0, &mut rng);
    let target = random_tensor(&[6], 1.0, &mut rng);
    let probs = Tensor::new([4], (0..4).map(|_| rng.gen_range(0.1..0.9)).collect())?;
    rows.push(check(
        "l2+bce losses",
        &[pred, target, probs],
        |t, v| {
            let l2 = t.l2_loss(v[0], v[1])?;
            let bce = t.binary_cross_entropy(v[2], &[1.0, 0.0, 0.25, 1.0])?;
            t.add(l2, bce)
        },
        &op,
    )?);

    let cmp = Comparator::default();
    let cp: Params<f64> = cmp.init_params(seed).cast();
    let cnames: Vec<String> = cp.names().map(str::to_string).collect();
    let mut ins = vec![random_tensor(&[4], 1.0, &mut rng)];
    ins.extend(cp.iter().map(|(_, t)| t.clone()));
    rows.push(check(
        "comparator",
        &ins,
        |t, v| {
            let p: Bound = cnames.iter().cloned().zip(v[1..].iter().copied()).collect();
            let prob = cmp.forward(t, &p, v[0], &[(0, 1), (0, 3), (1, 2), (2, 3)])?;
            t.binary_cross_entropy(prob, &[1.0, 0.0, 1.0, 0.0])
        },
        &op,
    )?);

    // Whole model, every parameter tensor probed at a few entries.
    let params = jitter(&build_model(&cfg, seed)?.cast(), &mut rng);
    let pnames: Vec<String> = params.names().map(str::to_string).collect();
    let side = cfg.patch_size;
    let r = random_tensor(&[3, 3, side, side], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
    let d = r.map(|v| v * 0.8 + 0.05);
    let ins: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    rows.push(check(
        &format!("model[{variant}]"),
        &ins,
        |t, v| {
            let p: Bound = pnames.iter().cloned().zip(v.iter().copied()).collect();
            let rv = t.constant(r.clone());
            let dv = t.constant(d.clone());
            let out = model.forward(t, &p, rv, dv, &[2, 1])?;
            random_projection(t, out.quality, seed + 12)
        },
        &CheckOptions::model().max_probes(3),
    )?);
    Ok(rows)
}

/// Shift every parameter off its initial value so zero-initialised
/// modules take part in the check.
fn jitter(p: &Params<f64>, rng: &mut impl Rng) -> Params<f64> {
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut r = rng(1);
        let x = random_tensor(&[4, 3], 1.0, &mut r);
        let y = random_tensor(&[4, 3], 1.0, &mut r);
        let report = check(
            "mul",
            &[x.clone(), y.clone()],
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                t.sum(p)
            },
            &CheckOptions::op(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let mut tape = Tape::<f64>::new();
        let xv = tape.param(x);
        let yv = tape.constant(y.clone());
        let p = tape.mul(xv, yv).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), y.data());
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut r = rng(2);
        let a = random_tensor(&[2, 5], 1.0, &mut r);
        let b = random_tensor(&[5], 1.0, &mut r).map(|v| v + 2.0);
        type Op = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
        let cases: [(&str, Op); 4] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
        ];
        for (name, op) in cases {
            let rep = check(
                name,
                &[a.clone(), b.clone()],
                |t, v| {
                    let o = op(t, v[0], v[1])?;
                    random_projection(t, o, 7)
                },
                &CheckOptions::op(),
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn matmul_and_transpose_pass() {
        let mut r = rng(3);
        let a = random_tensor(&[3, 4], 1.0, &mut r);
        let b = random_tensor(&[4, 2], 1.0, &mut r);
        let rep = check(
            "matmul",
            &[a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let ct = t.transpose(c)?;
                random_projection(t, ct, 11)
            },
            &CheckOptions::op(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn smooth_nonlinearities_pass() {
        let mut r = rng(4);
        let x = random_tensor(&[3, 4], 2.0, &mut r);
        for name in ["softmax", "sigmoid", "relu"] {
            let rep = check(
                name,
                std::slice::from_ref(&x),
                |t, v| {
                    let y = match name {
                        "softmax" => t.softmax(v[0])?,
                        "sigmoid" => t.sigmoid(v[0])?,
                        _ => t.relu(v[0])?,
                    };
                    random_projection(t, y, 5)
                },
                &CheckOptions::op(),
            )
            .unwrap();
            assert!(rep.passed(), "{name}: {rep:?}");
        }
    }

    #[test]
    fn losses_pass() {
        let mut r = rng(5);
        let p = random_tensor(&[6], 1.0, &mut r);
        let q = random_tensor(&[6], 1.0, &mut r);
        let rep = check("l2", &[p, q], |t, v| t.l2_loss(v[0], v[1]), &CheckOptions::op()).unwrap();
        assert!(rep.passed(), "{rep:?}");

        let probs = Tensor::from_f64s([4], &[0.2, 0.5, 0.7, 0.9]).unwrap();
        let rep = check(
            "bce",
            &[probs],
            |t, v| t.binary_cross_entropy(v[0], &[1.0, 0.0, 1.0, 0.3]),
            &CheckOptions::op(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn relu_probes_across_the_hinge_are_skipped() {
        let x = Tensor::from_f64s([2], &[0.0005, 1.0]).unwrap();
        let rep = check(
            "relu",
            &[x],
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &CheckOptions::op(),
        )
        .unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.checked, 1);
        assert!(rep.passed());
    }

    #[test]
    fn probe_selection() {
        assert_eq!(probe_indices(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(5)), vec![0, 1]);
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn radn_suite_passes_with_every_row() {
        let rows = suite(Variant::Radn, 0).unwrap();
        assert!(rows.len() >= 11);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }
}
