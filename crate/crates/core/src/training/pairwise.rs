//! Contrastive pretraining over the members of one contrast group.
//!
//! Each member is scored once; every untied pair is then formed on the
//! score values and judged by a small comparator network. Because the
//! scores are shared tape nodes, each member's trunk receives the summed
//! gradient of all pairs it takes part in from a single backward pass.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Bound, Grads, Params};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Ground-truth preference of `i` over `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelMode {
    /// 1 if `mos_i > mos_j`, 0 if smaller; ties yield no label.
    Hard,
    /// `sigmoid((mos_i - mos_j) / tau)`.
    Soft { tau: f32 },
}

pub fn derive_preference(mos_i: f32, mos_j: f32, mode: LabelMode) -> Option<f32> {
    match mode {
        LabelMode::Hard if mos_i > mos_j => Some(1.0),
        LabelMode::Hard if mos_i < mos_j => Some(0.0),
        LabelMode::Hard => None,
        LabelMode::Soft { tau } => Some(1.0 / (1.0 + (-(mos_i - mos_j) / tau).exp())),
    }
}

/// `(i, j, p_ij)` for `i < j`, skipping pairs without a label.
pub fn labelled_pairs(mos: &[f32], mode: LabelMode) -> Vec<(usize, usize, f32)> {
    let mut out = Vec::new();
    for i in 0..mos.len() {
        for j in i + 1..mos.len() {
            if let Some(p) = derive_preference(mos[i], mos[j], mode) {
                out.push((i, j, p));
            }
        }
    }
    out
}

/// `(s_i, s_j, s_i - s_j) -> Linear(3, H) -> relu -> Linear(H, 1) -> sigmoid`.
#[derive(Debug)]
pub struct Comparator {
    hidden: usize,
    pairs_seen: AtomicUsize,
}

impl Comparator {
    pub const HIDDEN: usize = 16;

    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            pairs_seen: AtomicUsize::new(0),
        }
    }

    /// Number of pairs pushed through the comparator so far.
    pub fn pairs_seen(&self) -> usize {
        self.pairs_seen.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.pairs_seen.store(0, Ordering::Relaxed);
    }

    pub fn init_params(&self, seed: u64) -> Params<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: [usize; 2]| {
            let b = (1.0 / shape[1] as f32).sqrt();
            let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-b..b)).collect();
            Tensor::new(shape, data).expect("shape")
        };
        let mut p = Params::new();
        p.insert("cmp.fc1.weight", uniform([self.hidden, 3]));
        p.insert("cmp.fc1.bias", Tensor::zeros([self.hidden]));
        p.insert("cmp.fc2.weight", uniform([1, self.hidden]));
        p.insert("cmp.fc2.bias", Tensor::zeros([1]));
        p
    }

    /// Preference probabilities `[P]` for `pairs` over the score vector `[n]`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        scores: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let n = tape.shape(scores)[0];
        if pairs.is_empty() {
            return Err(Error::EmptyInput("comparator"));
        }
        self.pairs_seen.fetch_add(pairs.len(), Ordering::Relaxed);
        let select = |pick: fn(&(usize, usize)) -> usize| {
            let mut m = vec![T::zero(); pairs.len() * n];
            for (r, pair) in pairs.iter().enumerate() {
                m[r * n + pick(pair)] = T::one();
            }
            Tensor::new([pairs.len(), n], m)
        };
        let (sel_i, sel_j) = (select(|p| p.0)?, select(|p| p.1)?);
        let col = tape.reshape(scores, [n, 1])?;
        let a = tape.constant(sel_i);
        let b = tape.constant(sel_j);
        let si = tape.matmul(a, col)?;
        let sj = tape.matmul(b, col)?;
        let diff = tape.sub(si, sj)?;
        let x = tape.concat_cols(&[si, sj, diff])?;
        let h = dense(tape, p, "cmp.fc1", x)?;
        let h = tape.relu(h)?;
        let logit = dense(tape, p, "cmp.fc2", h)?;
        let prob = tape.sigmoid(logit)?;
        tape.reshape(prob, [pairs.len()])
    }
}

impl Default for Comparator {
    fn default() -> Self {
        Self::new(Self::HIDDEN)
    }
}

fn dense<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add(y, b)
}

/// Loss and gradients of one pretraining step.
#[derive(Clone, Debug)]
pub struct PairwiseOutcome<T: Element = f32> {
    pub loss: f64,
    pub pairs: usize,
    pub model_grads: Grads<T>,
    pub comparator_grads: Grads<T>,
}

/// Stack member patches into one `[M, 3, P, P]` pair of tensors.
pub(crate) fn stack_members<T: Element>(members: &[&PatchBatch]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let r: Vec<Tensor<T>> = members.iter().map(|m| m.reference.cast()).collect();
    let d: Vec<Tensor<T>> = members.iter().map(|m| m.distorted.cast()).collect();
    let seg = members.iter().map(|m| m.len()).collect();
    Ok((Tensor::stack_rows(&r)?, Tensor::stack_rows(&d)?, seg))
}

/// Efficient scheme: one trunk pass per member, all pairs on the scores.
pub fn pairwise_grads<T: Element>(
    model: &Model,
    params: &Params<T>,
    comparator: &Comparator,
    comparator_params: &Params<T>,
    members: &[&PatchBatch],
    mos: &[f32],
    mode: LabelMode,
) -> Result<PairwiseOutcome<T>> {
    if members.len() < 2 || members.len() != mos.len() {
        return Err(Error::InvalidArgument(format!(
            "a contrast group needs at least two members with labels, got {} members and {} labels",
            members.len(),
            mos.len()
        )));
    }
    let labelled = labelled_pairs(mos, mode);
    if labelled.is_empty() {
        return Ok(PairwiseOutcome {
            loss: 0.0,
            pairs: 0,
            model_grads: Grads::default(),
            comparator_grads: Grads::default(),
        });
    }
    let (r, d, seg) = stack_members::<T>(members)?;
    let mut tape = Tape::new();
    let mp = params.bind(&mut tape, true);
    let cp = comparator_params.bind(&mut tape, true);
    let (rv, dv) = (tape.constant(r), tape.constant(d));
    let out = model.forward(&mut tape, &mp, rv, dv, &seg)?;
    let pairs: Vec<(usize, usize)> = labelled.iter().map(|&(i, j, _)| (i, j)).collect();
    let labels: Vec<T> = labelled.iter().map(|&(_, _, p)| T::from_f64(p as f64)).collect();
    let prob = comparator.forward(&mut tape, &cp, out.quality, &pairs)?;
    let loss = tape.binary_cross_entropy(prob, &labels)?;
    tape.backward(loss)?;
    Ok(PairwiseOutcome {
        loss: tape.value(loss).data()[0].as_f64(),
        pairs: pairs.len(),
        model_grads: mp.grads(&tape),
        comparator_grads: cp.grads(&tape),
    })
}

/// Reference scheme: every pair re-scores both of its members on a fresh
/// tape. Produces the same loss and gradients as [`pairwise_grads`] at
/// `2 * pairs` trunk passes instead of `n`.
pub fn naive_pairwise_grads<T: Element>(
    model: &Model,
    params: &Params<T>,
    comparator: &Comparator,
    comparator_params: &Params<T>,
    members: &[&PatchBatch],
    mos: &[f32],
    mode: LabelMode,
) -> Result<PairwiseOutcome<T>> {
    let labelled = labelled_pairs(mos, mode);
    let mut outcome = PairwiseOutcome {
        loss: 0.0,
        pairs: labelled.len(),
        model_grads: Grads::default(),
        comparator_grads: Grads::default(),
    };
    let scale = T::one() / T::from_f64(labelled.len().max(1) as f64);
    for &(i, j, p) in &labelled {
        let mut tape = Tape::new();
        let mp = params.bind(&mut tape, true);
        let cp = comparator_params.bind(&mut tape, true);
        let mut scores = Vec::with_capacity(2);
        for k in [i, j] {
            let (r, d, seg) = stack_members::<T>(&[members[k]])?;
            let (rv, dv) = (tape.constant(r), tape.constant(d));
            scores.push(model.forward(&mut tape, &mp, rv, dv, &seg)?.quality);
        }
        let pair_scores = tape.concat_rows(&scores)?;
        let prob = comparator.forward(&mut tape, &cp, pair_scores, &[(0, 1)])?;
        let bce = tape.binary_cross_entropy(prob, &[T::from_f64(p as f64)])?;
        let loss = tape.scalar_mul(bce, scale)?;
        tape.backward(loss)?;
        outcome.loss += tape.value(loss).data()[0].as_f64();
        outcome.model_grads.merge(&mp.grads(&tape));
        outcome.comparator_grads.merge(&cp.grads(&tape));
    }
    Ok(outcome)
}
