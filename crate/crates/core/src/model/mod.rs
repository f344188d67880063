//! WResNet trunk, the deformable and attention extensions, and the
//! weighted-average scoring head.

mod config;
mod predict;
mod weight_map;

pub use config::{ModelConfig, ResidualBlockSpec, Variant};
pub use predict::{predict_image, predict_patches, ScoreRecord};
pub use weight_map::{quartile_bins, render_weight_map, QUARTILE_COLORS};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{patch_attention, AttentionVars};
use crate::params::{Bound, ModelParams, Params};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Deterministic parameter initialization.
///
/// The trunk and head draw from one stream seeded by `seed`; the deformable
/// and attention modules draw from a second, derived stream. A `wresnet`
/// and a `radn` built from the same seed therefore share their trunk and
/// head exactly, and since the deformable kernels start as identity taps
/// with zero offsets and the attention output projection starts at zero, all
/// three variants compute the same function at initialization.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();

    for (i, b) in cfg.blocks().iter().enumerate() {
        let s = i + 1;
        let mut in_c = b.in_channels;
        for j in 0..b.conv_count {
            p.insert(
                format!("stage{s}.conv{j}.weight"),
                he_uniform(&[b.out_channels, in_c, 3, 3], &mut rng),
            );
            p.insert(format!("stage{s}.conv{j}.bias"), Tensor::zeros([b.out_channels]));
            in_c = b.out_channels;
        }
        if b.projects() {
            p.insert(
                format!("stage{s}.shortcut.weight"),
                he_uniform(&[b.out_channels, b.in_channels, 1, 1], &mut rng),
            );
            p.insert(format!("stage{s}.shortcut.bias"), Tensor::zeros([b.out_channels]));
        }
    }

    let d = cfg.feature_width;
    for branch in ["score", "weight"] {
        p.insert(
            format!("head.{branch}.fc1.weight"),
            he_uniform(&[cfg.head_hidden, 3 * d], &mut rng),
        );
        p.insert(format!("head.{branch}.fc1.bias"), Tensor::zeros([cfg.head_hidden]));
        p.insert(
            format!("head.{branch}.fc2.weight"),
            lecun_uniform(&[1, cfg.head_hidden], &mut rng),
        );
        // The weight branch starts in the active region of its relu so every
        // patch contributes to the weighted average from the first step.
        let b = if branch == "weight" { 1.0 } else { 0.0 };
        p.insert(format!("head.{branch}.fc2.bias"), Tensor::full([1], b));
    }

    let mut extra = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    if cfg.variant.has_deform() {
        let c = cfg.channels_at(cfg.deform_stage);
        let k = ModelConfig::DEFORM_KERNEL;
        p.insert("deform.offset.weight", Tensor::zeros([2 * k * k, c, 3, 3]));
        p.insert("deform.offset.bias", Tensor::zeros([2 * k * k]));
        p.insert("deform.ref.weight", dirac(c, k));
        p.insert("deform.dist.weight", dirac(c, k));
    }
    if cfg.variant.has_attention() {
        for name in ["query", "key", "value"] {
            p.insert(format!("attn.{name}"), lecun_uniform(&[d, d], &mut extra));
        }
        p.insert("attn.output", Tensor::zeros([d, d]));
    }
    Ok(p)
}

fn he_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn lecun_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `[c, c, k, k]` kernel passing each channel through its centre tap.
fn dirac(c: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros([c, c, k, k]);
    let centre = (k / 2) * k + k / 2;
    for i in 0..c {
        w.data_mut()[(i * c + i) * k * k + centre] = 1.0;
    }
    w
}

/// Per-patch feature matrices of the two branches.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub reference: Var,
    pub distorted: Var,
    /// The offset field used by the deformable stage, when present.
    pub offsets: Option<Var>,
}

/// Head outputs for a batch of images.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[M]` positive patch weights.
    pub weights: Var,
    /// `[M]` patch scores.
    pub scores: Var,
    /// `[images]` weighted-average quality per image.
    pub quality: Var,
}

/// A configured network. Holds no parameters; those are bound per tape.
///
/// Counts how many images pass through the trunk so callers can verify
/// that each image is scored exactly once per step.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    trunk_images: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::new(self.cfg.clone()).expect("validated")
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            trunk_images: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Images pushed through the trunk since construction or the last reset.
    pub fn trunk_images(&self) -> usize {
        self.trunk_images.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.trunk_images.store(0, Ordering::Relaxed);
    }

    fn block<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, stage: usize, x: Var) -> Result<Var> {
        let spec = self.cfg.blocks()[stage - 1];
        let mut h = x;
        for j in 0..spec.conv_count {
            let w = p.var(&format!("stage{stage}.conv{j}.weight"))?;
            let b = p.var(&format!("stage{stage}.conv{j}.bias"))?;
            let stride = if j == 0 { spec.stride } else { 1 };
            h = tape.conv2d(h, w, Some(b), stride, 1)?;
            if j + 1 < spec.conv_count {
                h = tape.relu(h)?;
            }
        }
        let shortcut = if spec.projects() {
            let w = p.var(&format!("stage{stage}.shortcut.weight"))?;
            let b = p.var(&format!("stage{stage}.shortcut.bias"))?;
            tape.conv2d(x, w, Some(b), spec.stride, 0)?
        } else {
            x
        };
        let sum = tape.add(h, shortcut)?;
        tape.relu(sum)
    }

    fn stages<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        range: std::ops::Range<usize>,
        mut x: Var,
    ) -> Result<Var> {
        for s in range {
            x = self.block(tape, p, s, x)?;
        }
        Ok(x)
    }

    /// Twin-trunk features for `M` paired patches (`[M, 3, P, P]` each),
    /// grouped into images by `segments` (patch counts summing to `M`).
    ///
    /// Trunk parameters are shared between the branches. With the
    /// deformable stage, offsets are predicted from the reference branch
    /// only and applied to both. With attention, each image's reference and
    /// distorted feature matrices are attended separately.
    pub fn extract_features<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        reference: Var,
        distorted: Var,
        segments: &[usize],
    ) -> Result<Features> {
        let cfg = &self.cfg;
        let m = check_patches(tape, cfg, reference, distorted, segments)?;
        self.trunk_images.fetch_add(segments.len(), Ordering::Relaxed);

        let n_stages = cfg.stage_channels.len();
        let both = tape.concat_rows(&[reference, distorted])?;
        let mut offsets = None;
        let trunk = if cfg.variant.has_deform() {
            let mid = self.stages(tape, p, 1..cfg.deform_stage, both)?;
            let f_rm = tape.slice_rows(mid, 0, m)?;
            let f_dm = tape.slice_rows(mid, m, 2 * m)?;
            let w_off = p.var("deform.offset.weight")?;
            let b_off = p.var("deform.offset.bias")?;
            let mut off = tape.predict_offsets(f_rm, w_off, Some(b_off), ModelConfig::DEFORM_KERNEL)?;
            if let Some(limit) = cfg.max_offset {
                let l = T::from_f64(limit as f64);
                off = tape.clamp(off, -l, l)?;
            }
            offsets = Some(off);
            let (r, d) = tape.ref_deform_conv(
                f_rm,
                f_dm,
                off,
                p.var("deform.ref.weight")?,
                p.var("deform.dist.weight")?,
            )?;
            let joined = tape.concat_rows(&[r, d])?;
            self.stages(tape, p, cfg.deform_stage..n_stages + 1, joined)?
        } else {
            self.stages(tape, p, 1..n_stages + 1, both)?
        };

        let flat = tape.reshape(trunk, [2 * m, cfg.feature_width])?;
        let mut f_ref = tape.slice_rows(flat, 0, m)?;
        let mut f_dist = tape.slice_rows(flat, m, 2 * m)?;
        if cfg.variant.has_attention() {
            let w = AttentionVars {
                query: p.var("attn.query")?,
                key: p.var("attn.key")?,
                value: p.var("attn.value")?,
                output: p.var("attn.output")?,
            };
            f_ref = attend_per_image(tape, f_ref, segments, &w)?;
            f_dist = attend_per_image(tape, f_dist, segments, &w)?;
        }
        Ok(Features {
            reference: f_ref,
            distorted: f_dist,
            offsets,
        })
    }

    fn branch<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = linear(tape, p, &format!("head.{name}.fc1"), x)?;
        let h = tape.relu(h)?;
        let o = linear(tape, p, &format!("head.{name}.fc2"), h)?;
        let m = tape.shape(o)[0];
        tape.reshape(o, [m])
    }

    /// Per-patch weights and scores from `concat(F_D - F_R, F_D, F_R)`, and
    /// the per-image weighted average `Σ w s / Σ w`.
    pub fn score_head<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f: &Features,
        segments: &[usize],
    ) -> Result<HeadOutput> {
        let (fr, fd) = (f.reference, f.distorted);
        if tape.shape(fr) != tape.shape(fd) {
            return Err(Error::ShapeMismatch {
                op: "score_head",
                lhs: tape.shape(fr).to_vec(),
                rhs: tape.shape(fd).to_vec(),
            });
        }
        let diff = tape.sub(fd, fr)?;
        let cat = tape.concat_cols(&[diff, fd, fr])?;
        let scores = self.branch(tape, p, "score", cat)?;
        let raw = self.branch(tape, p, "weight", cat)?;
        let pos = tape.relu(raw)?;
        let weights = tape.add_scalar(pos, T::from_f64(self.cfg.weight_epsilon as f64))?;
        let quality = weighted_average(tape, weights, scores, segments)?;
        Ok(HeadOutput {
            weights,
            scores,
            quality,
        })
    }

    /// Features then head.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        reference: Var,
        distorted: Var,
        segments: &[usize],
    ) -> Result<HeadOutput> {
        let f = self.extract_features(tape, p, reference, distorted, segments)?;
        self.score_head(tape, p, &f, segments)
    }

    /// Convenience: bind `params` as constants and score one batch.
    pub fn score<T: Element>(
        &self,
        params: &Params<T>,
        reference: &Tensor<T>,
        distorted: &Tensor<T>,
        segments: &[usize],
    ) -> Result<(Tape<T>, HeadOutput)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let r = tape.constant(reference.clone());
        let d = tape.constant(distorted.clone());
        let out = self.forward(&mut tape, &p, r, d, segments)?;
        Ok((tape, out))
    }
}

fn check_patches<T: Element>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    reference: Var,
    distorted: Var,
    segments: &[usize],
) -> Result<usize> {
    let (rs, ds) = (tape.shape(reference), tape.shape(distorted));
    if rs != ds {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: rs.to_vec(),
            rhs: ds.to_vec(),
        });
    }
    let ps = cfg.patch_size;
    let &[m, c, h, w] = rs else {
        return Err(Error::shape(
            "extract_features",
            format!("patches must be [N, 3, P, P], got {rs:?}"),
        ));
    };
    if c != ModelConfig::INPUT_CHANNELS || h != ps || w != ps {
        return Err(Error::shape(
            "extract_features",
            format!("patches must be [N, 3, {ps}, {ps}], got {rs:?}"),
        ));
    }
    if m == 0 || segments.contains(&0) || segments.iter().sum::<usize>() != m {
        return Err(Error::shape(
            "extract_features",
            format!("segments {segments:?} do not partition {m} patches"),
        ));
    }
    Ok(m)
}

fn linear<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add(y, b)
}

fn attend_per_image<T: Element>(tape: &mut Tape<T>, x: Var, segments: &[usize], w: &AttentionVars) -> Result<Var> {
    if segments.len() == 1 {
        return patch_attention(tape, x, w);
    }
    let mut parts = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &n in segments {
        let rows = tape.slice_rows(x, start, start + n)?;
        parts.push(patch_attention(tape, rows, w)?);
        start += n;
    }
    tape.concat_rows(&parts)
}

/// `Σ w_i s_i / Σ w_i` within each segment, stacked into `[segments]`.
pub fn weighted_average<T: Element>(tape: &mut Tape<T>, weights: Var, scores: Var, segments: &[usize]) -> Result<Var> {
    let mut out = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &n in segments {
        let w = tape.slice_rows(weights, start, start + n)?;
        let s = tape.slice_rows(scores, start, start + n)?;
        let ws = tape.mul(w, s)?;
        let num = tape.sum(ws)?;
        let den = tape.sum(w)?;
        let q = tape.div(num, den)?;
        out.push(tape.reshape(q, [1])?);
        start += n;
    }
    tape.concat_rows(&out)
}
