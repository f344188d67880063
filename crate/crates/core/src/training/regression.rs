use super::optim::Adam;
use super::pairwise::stack_members;
use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Grads, ModelParams, Params};
use crate::tensor::{Element, Tape, Tensor};

/// Mean over the batch of `(q_hat - target)^2`, and its parameter gradients.
pub fn regression_grads<T: Element>(
    model: &Model,
    params: &Params<T>,
    images: &[&PatchBatch],
    targets: &[f32],
) -> Result<(f64, Grads<T>)> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} targets",
            images.len(),
            targets.len()
        )));
    }
    let (r, d, seg) = stack_members::<T>(images)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let (rv, dv) = (tape.constant(r), tape.constant(d));
    let out = model.forward(&mut tape, &p, rv, dv, &seg)?;
    let t = Tensor::new(
        [targets.len()],
        targets.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?;
    let tv = tape.constant(t);
    let loss = tape.l2_loss(out.quality, tv)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).data()[0].as_f64(), p.grads(&tape)))
}

/// One optimizer step on the l2 loss. Returns the pre-update loss.
pub fn regression_step(
    model: &Model,
    params: &mut ModelParams,
    adam: &mut Adam,
    lr: f64,
    images: &[&PatchBatch],
    targets: &[f32],
) -> Result<f64> {
    let (loss, mut grads) = regression_grads(model, params, images, targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("regression loss"));
    }
    adam.step(params, &mut grads, lr)?;
    Ok(loss)
}
