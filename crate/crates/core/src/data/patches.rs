use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How patch positions are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// `count` uniform top-left corners, drawn with replacement.
    TrainRandom,
    /// Non-overlapping tiles, row-major; right and bottom remainders dropped.
    EvalGrid,
}

/// Top-left corner of a patch, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchCoord {
    pub y: usize,
    pub x: usize,
}

/// Position-aligned patches cut from one reference/distorted pair.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[N, 3, P, P]` in `[0, 1]`.
    pub reference: Tensor,
    pub distorted: Tensor,
    /// Shared by both members of each pair.
    pub coords: Vec<PatchCoord>,
    pub patch_size: usize,
    pub image_id: String,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Row-major grid of non-overlapping `size x size` tiles.
pub fn grid_coords(width: usize, height: usize, size: usize) -> Vec<PatchCoord> {
    let (rows, cols) = (height / size, width / size);
    (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| PatchCoord {
                y: r * size,
                x: c * size,
            })
        })
        .collect()
}

/// `count` corners drawn uniformly with replacement over every valid position.
pub fn random_coords(width: usize, height: usize, size: usize, count: usize, seed: u64) -> Vec<PatchCoord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| PatchCoord {
            y: rng.gen_range(0..=height - size),
            x: rng.gen_range(0..=width - size),
        })
        .collect()
}

/// Cut aligned patches from `reference` and `distorted`. `count` is ignored
/// in grid mode.
pub fn sample_patches(
    reference: &ImageBuffer,
    distorted: &ImageBuffer,
    mode: PatchMode,
    count: usize,
    patch_size: usize,
    seed: u64,
) -> Result<PatchBatch> {
    let (w, h) = (reference.width(), reference.height());
    if (w, h) != (distorted.width(), distorted.height()) {
        return Err(Error::InvalidArgument(format!(
            "reference is {w}x{h} but distorted is {}x{}",
            distorted.width(),
            distorted.height()
        )));
    }
    if patch_size == 0 || w < patch_size || h < patch_size {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} image is smaller than one {patch_size}x{patch_size} patch"
        )));
    }
    let coords = match mode {
        PatchMode::TrainRandom => random_coords(w, h, patch_size, count, seed),
        PatchMode::EvalGrid => grid_coords(w, h, patch_size),
    };
    if coords.is_empty() {
        return Err(Error::EmptyInput("sample_patches"));
    }
    let n = coords.len();
    let per = 3 * patch_size * patch_size;
    let (mut r, mut d) = (Vec::with_capacity(n * per), Vec::with_capacity(n * per));
    for c in &coords {
        reference.crop_into(c.y, c.x, patch_size, &mut r);
        distorted.crop_into(c.y, c.x, patch_size, &mut d);
    }
    let shape = [n, 3, patch_size, patch_size];
    Ok(PatchBatch {
        reference: Tensor::new(shape, r)?,
        distorted: Tensor::new(shape, d)?,
        coords,
        patch_size,
        image_id: String::new(),
    })
}
