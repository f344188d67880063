use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T> {
    pub output: &'a Tensor<T>,
    /// d(loss)/d(output), same length as `output`.
    pub grad: &'a [T],
    pub inputs: &'a [&'a Tensor<T>],
    /// Which inputs need a gradient. Rules may skip the others and return `None`.
    pub needs: &'a [bool],
}

/// Maps an output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    finite: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order: an op
/// can only reference vars that already exist. Gradients accumulate across
/// [`backward`](Tape::backward) calls until [`zero_grad`](Tape::zero_grad).
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
    track_kinks: bool,
    kink_hash: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Element> Tape<T> {
    /// Finite-value checks default to on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
            track_kinks: false,
            kink_hash: FNV_OFFSET,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Record which side of every non-differentiable point (relu hinge,
    /// clamp edge, bilinear cell boundary) the forward pass landed on.
    pub fn with_kink_tracking(mut self, on: bool) -> Self {
        self.track_kinks = on;
        self
    }

    pub fn tracks_kinks(&self) -> bool {
        self.track_kinks
    }

    /// Hash of every branch decision recorded so far. Two forward passes
    /// with equal signatures lie in the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub(crate) fn note_kinks(&mut self, keys: impl IntoIterator<Item = i64>) {
        if !self.track_kinks {
            return;
        }
        let mut h = self.kink_hash;
        for k in keys {
            for b in k.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
            }
        }
        self.kink_hash = h;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let finite = !self.check_finite || value.all_finite();
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Accumulated d(loss)/d(v), if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Append an op. `backward` is dropped when no parent needs a gradient.
    pub fn push<F>(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let mut finite = true;
        if self.check_finite {
            finite = value.all_finite();
            if !finite && parents.iter().all(|p| self.nodes[p.0].finite) {
                return Err(Error::NonFinite(op));
            }
        }
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
            finite,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, adding into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }

        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![T::one()]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
                let ctx = BackwardCtx {
                    output: &node.value,
                    grad: &g,
                    inputs: &inputs,
                    needs: &needs,
                };
                let parent_grads = bw(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), self.nodes[p].value.numel(), "{}", node.op);
                    accumulate(&mut pass[p], pg);
                }
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}
