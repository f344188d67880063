//! Self-attention across the patches of one image.
//!
//! Patch features arrive as the rows of `X` (`[N, d]`). With the projection
//! matrices acting on column vectors, the row form is
//! `Q = X W_Qᵀ`, `K = X W_Kᵀ`, `V = X W_Vᵀ`,
//! `Y = softmax(Q Kᵀ / √d) V`, `Z = Y W_Zᵀ + X`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Tape handles for the four `d x d` projection matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

fn check_width<T: Element>(tape: &Tape<T>, x: Var, w: &AttentionVars) -> Result<usize> {
    let &[n, d] = tape.shape(x) else {
        return Err(Error::shape(
            "patch_attention",
            format!("features must be [N, d], got {:?}", tape.shape(x)),
        ));
    };
    if n == 0 {
        return Err(Error::EmptyInput("patch_attention"));
    }
    for m in [w.query, w.key, w.value, w.output] {
        if tape.shape(m) != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "patch_attention",
                lhs: vec![n, d],
                rhs: tape.shape(m).to_vec(),
            });
        }
    }
    Ok(d)
}

/// Row form of `W x` for each row `x` of `rows`.
fn project<T: Element>(tape: &mut Tape<T>, rows: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    tape.matmul(rows, wt)
}

/// The `N x N` row-stochastic matrix `softmax(Q Kᵀ / √d)`.
pub fn attention_matrix<T: Element>(tape: &mut Tape<T>, x: Var, w: &AttentionVars) -> Result<Var> {
    let d = check_width(tape, x, w)?;
    let q = project(tape, x, w.query)?;
    let k = project(tape, x, w.key)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scalar_mul(logits, T::one() / T::from_f64(d as f64).sqrt())?;
    tape.softmax(scaled)
}

/// `Z = W_Z · softmax(QKᵀ/√d) V + X`, computed row-wise over the patches.
pub fn patch_attention<T: Element>(tape: &mut Tape<T>, x: Var, w: &AttentionVars) -> Result<Var> {
    let attn = attention_matrix(tape, x, w)?;
    let v = project(tape, x, w.value)?;
    let y = tape.matmul(attn, v)?;
    let z = project(tape, y, w.output)?;
    tape.add(z, x)
}
