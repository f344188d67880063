use rayon::prelude::*;

use super::pairwise::{labelled_pairs, Comparator, LabelMode};
use crate::data::{DatasetManifest, ImageBuffer, PatchMode};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srocc};
use crate::model::{predict_image, Model, ScoreRecord};
use crate::params::{ModelParams, Params};
use crate::tensor::{Tape, Tensor};

/// A manifest with every image pair decoded up front.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub manifest: DatasetManifest,
    pub pairs: Vec<(ImageBuffer, ImageBuffer)>,
}

impl LoadedSet {
    /// Decode every record. The first unreadable record aborts the load and
    /// is named in the error.
    pub fn load(manifest: DatasetManifest, min_side: usize) -> Result<Self> {
        let pairs = (0..manifest.len())
            .map(|i| manifest.load_pair(i, min_side))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mos(&self) -> Vec<f32> {
        self.manifest.records.iter().map(|r| r.mos).collect()
    }
}

/// Worker count from `RADN_THREADS`, else the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("RADN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Grid-score every pair on a pool of `threads` workers. Each image is
/// scored independently, so the result does not depend on the worker count.
pub fn evaluate(model: &Model, params: &ModelParams, set: &LoadedSet, threads: usize) -> Result<Vec<ScoreRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| {
        set.pairs
            .par_iter()
            .zip(set.manifest.records.par_iter())
            .map(|((r, d), rec)| {
                let mut s = predict_image(model, params, r, d, PatchMode::EvalGrid, 0, 0)?;
                s.image_id = rec.dist_path.display().to_string();
                Ok(s)
            })
            .collect()
    })
}

/// SROCC and PLCC of predictions against labels; `None` where undefined.
pub fn correlations(pred: &[f32], mos: &[f32]) -> (Option<f64>, Option<f64>) {
    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let m: Vec<f64> = mos.iter().map(|&v| v as f64).collect();
    (srocc(&p, &m).ok(), plcc(&p, &m).ok())
}

/// Fraction of untied within-group pair judgements whose comparator
/// probability falls on the same side of 0.5 as the label. Returns the
/// accuracy and the number of judgements, two per pair.
pub fn pairwise_accuracy(
    model: &Model,
    params: &ModelParams,
    comparator: &Comparator,
    comparator_params: &Params<f32>,
    set: &LoadedSet,
    threads: usize,
) -> Result<(f64, usize)> {
    let scores: Vec<f32> = evaluate(model, params, set, threads)?
        .iter()
        .map(|s| s.quality)
        .collect();
    let (mut right, mut total) = (0usize, 0usize);
    for members in set.manifest.groups().values() {
        let mos: Vec<f32> = members.iter().map(|&i| set.manifest.records[i].mos).collect();
        let labelled = labelled_pairs(&mos, LabelMode::Hard);
        if labelled.is_empty() {
            continue;
        }
        let s: Vec<f32> = members.iter().map(|&i| scores[i]).collect();
        let mut tape = Tape::<f32>::new();
        let cp = comparator_params.bind(&mut tape, false);
        let sv = tape.constant(Tensor::new([s.len()], s)?);
        // Each pair is judged in both orientations, so a comparator that
        // ignores its inputs scores exactly one half.
        let pairs: Vec<(usize, usize)> = labelled.iter().flat_map(|&(i, j, _)| [(i, j), (j, i)]).collect();
        let labels = labelled.iter().flat_map(|&(_, _, p)| [p > 0.5, p < 0.5]);
        let prob = comparator.forward(&mut tape, &cp, sv, &pairs)?;
        for (&p, label) in tape.value(prob).data().iter().zip(labels) {
            right += usize::from((p > 0.5) == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("pairwise_accuracy"));
    }
    Ok((right as f64 / total as f64, total))
}
