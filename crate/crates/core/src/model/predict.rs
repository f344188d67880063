use super::Model;
use crate::data::{sample_patches, ImageBuffer, PatchBatch, PatchCoord, PatchMode};
use crate::error::Result;
use crate::params::ModelParams;

/// One image's prediction together with its per-patch terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub image_id: String,
    pub quality: f32,
    pub weights: Vec<f32>,
    pub scores: Vec<f32>,
    pub coords: Vec<PatchCoord>,
    pub patch_size: usize,
}

/// Score an already-cut patch batch as one image.
pub fn predict_patches(model: &Model, params: &ModelParams, batch: &PatchBatch) -> Result<ScoreRecord> {
    let (tape, out) = model.score(params, &batch.reference, &batch.distorted, &[batch.len()])?;
    Ok(ScoreRecord {
        image_id: batch.image_id.clone(),
        quality: tape.value(out.quality).data()[0],
        weights: tape.value(out.weights).data().to_vec(),
        scores: tape.value(out.scores).data().to_vec(),
        coords: batch.coords.clone(),
        patch_size: batch.patch_size,
    })
}

/// Cut patches from the pair according to `mode` and score them. Random
/// mode draws `count` positions from `seed`; grid mode ignores both.
pub fn predict_image(
    model: &Model,
    params: &ModelParams,
    reference: &ImageBuffer,
    distorted: &ImageBuffer,
    mode: PatchMode,
    count: usize,
    seed: u64,
) -> Result<ScoreRecord> {
    let batch = sample_patches(reference, distorted, mode, count, model.config().patch_size, seed)?;
    predict_patches(model, params, &batch)
}
