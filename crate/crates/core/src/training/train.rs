//! The two-phase epoch loop: optional contrastive pretraining on contrast
//! groups, then l2 regression on MOS.
//!
//! Every epoch draws its shuffle and patch positions from a generator
//! seeded by `(seed, phase, epoch)`, so a run resumed from a checkpoint
//! replays exactly the epochs the uninterrupted run would have.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::{correlations, default_threads, evaluate, pairwise_accuracy, LoadedSet};
use super::optim::{Adam, Moments};
use super::pairwise::{labelled_pairs, pairwise_grads, Comparator};
use super::regression::regression_step;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{sample_patches, PatchBatch, PatchMode};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::params::{ModelParams, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Regression,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Regression => "regression",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "regression" => Ok(Phase::Regression),
            _ => Err(Error::Checkpoint(format!("unknown phase `{s}`"))),
        }
    }
}

/// One finished epoch. Displays as the tab-separated log line
/// `epoch phase loss srocc plcc lr accuracy`, with `NA` for skipped
/// validation. `accuracy` is the held-out pairwise preference accuracy of
/// the comparator and is only reported during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}\t{}\t{:.6}\t{}\t{}\t{:e}\t{}",
            self.epoch,
            self.phase,
            self.loss,
            na(self.srocc),
            na(self.plcc),
            self.lr,
            na(self.accuracy)
        )
    }
}

const PARAM: &str = "param/";
const CMP: &str = "cmp/";

pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    params: ModelParams,
    adam: Adam,
    comparator: Comparator,
    cmp_params: Params<f32>,
    cmp_adam: Adam,
    phase: Phase,
    next_epoch: usize,
    train: LoadedSet,
    val: Option<LoadedSet>,
    threads: usize,
}

impl Trainer {
    /// Fresh parameters from `cfg.seed`.
    pub fn new(cfg: RunConfig, train: LoadedSet, val: Option<LoadedSet>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training manifest"));
        }
        let params = build_model(&cfg.model, cfg.seed)?;
        let comparator = Comparator::default();
        let cmp_params = comparator.init_params(cfg.seed ^ 0xc0ff_ee00);
        let phase = if cfg.pretrain && cfg.pretrain_epochs > 0 {
            Phase::Pretrain
        } else {
            Phase::Regression
        };
        Ok(Self {
            model: Model::new(cfg.model.clone())?,
            adam: Adam::new(cfg.adam),
            cmp_adam: Adam::new(cfg.adam),
            params,
            comparator,
            cmp_params,
            phase,
            next_epoch: 0,
            train,
            val,
            threads: default_threads(),
            cfg,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`]. The
    /// model section of `cfg` must match the one the checkpoint was trained
    /// with; schedule and epoch counts may differ.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint, train: LoadedSet, val: Option<LoadedSet>) -> Result<Self> {
        let saved = RunConfig::parse_text(&ckpt.config, RunConfig::default())?;
        if saved.model != cfg.model {
            return Err(Error::Checkpoint(
                "the checkpoint was trained with a different model configuration".into(),
            ));
        }
        let mut t = Self::new(cfg, train, val)?;
        t.phase = ckpt.meta_value("phase")?.parse()?;
        t.next_epoch = ckpt.meta_parse("next_epoch")?;
        t.params = load_exact(&t.params, &ckpt.with_prefix(PARAM))?;
        t.adam = restore_adam(ckpt, "adam", t.cfg.adam)?;
        if t.phase == Phase::Pretrain {
            t.cmp_params = load_exact(&t.cmp_params, &ckpt.with_prefix(CMP))?;
            t.cmp_adam = restore_adam(ckpt, "cmp_adam", t.cfg.adam)?;
        }
        Ok(t)
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn comparator(&self) -> (&Comparator, &Params<f32>) {
        (&self.comparator, &self.cmp_params)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    fn phase_epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.cfg.pretrain_epochs,
            Phase::Regression => self.cfg.epochs,
        }
    }

    /// Move on to regression once pretraining has run its course. The
    /// comparator is dropped at this point and the optimizer restarts.
    fn advance_phase(&mut self) {
        if self.phase == Phase::Pretrain && self.next_epoch >= self.cfg.pretrain_epochs {
            self.phase = Phase::Regression;
            self.next_epoch = 0;
            self.adam = Adam::new(self.cfg.adam);
            self.cmp_adam = Adam::new(self.cfg.adam);
        }
    }

    /// True once no epoch of either phase remains.
    pub fn finished(&self) -> bool {
        match self.phase {
            Phase::Pretrain => self.next_epoch >= self.cfg.pretrain_epochs && self.cfg.epochs == 0,
            Phase::Regression => self.next_epoch >= self.cfg.epochs,
        }
    }

    fn epoch_rng(&self, phase: Phase, epoch: usize) -> ChaCha8Rng {
        let tag = match phase {
            Phase::Pretrain => 0x7072_6574_7261_696e,
            Phase::Regression => 0x7265_6772_6573_7321,
        };
        ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(tag)
                .wrapping_add((epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)),
        )
    }

    fn train_patches(&self, index: usize, seed: u64) -> Result<PatchBatch> {
        let (r, d) = &self.train.pairs[index];
        let mut b = sample_patches(
            r,
            d,
            PatchMode::TrainRandom,
            self.cfg.train_patches,
            self.cfg.model.patch_size,
            seed,
        )?;
        b.image_id = self.train.manifest.records[index].dist_path.display().to_string();
        Ok(b)
    }

    /// Run the next epoch and return its log line.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        self.advance_phase();
        if self.finished() {
            return Err(Error::InvalidArgument("training has already finished".into()));
        }
        let (phase, epoch) = (self.phase, self.next_epoch);
        let lr = self.cfg.schedule.lr_at(epoch);
        let mut rng = self.epoch_rng(phase, epoch);
        let loss = match phase {
            Phase::Regression => self.regression_epoch(&mut rng, lr)?,
            Phase::Pretrain => self.pretrain_epoch(&mut rng, epoch, lr)?,
        };
        self.next_epoch += 1;
        let last = self.next_epoch >= self.phase_epochs(phase);
        let (mut srocc, mut plcc, mut accuracy) = (None, None, None);
        if let Some(v) = self.val.as_ref().filter(|v| !v.is_empty()) {
            if self.next_epoch.is_multiple_of(self.cfg.val_every) || last {
                let pred: Vec<f32> = evaluate(&self.model, &self.params, v, self.threads)?
                    .iter()
                    .map(|s| self.cfg.to_mos(s.quality))
                    .collect();
                (srocc, plcc) = correlations(&pred, &v.mos());
                if phase == Phase::Pretrain {
                    accuracy = match pairwise_accuracy(
                        &self.model,
                        &self.params,
                        &self.comparator,
                        &self.cmp_params,
                        v,
                        self.threads,
                    ) {
                        Ok((acc, _)) => Some(acc),
                        Err(Error::EmptyInput(_)) => None,
                        Err(e) => return Err(e),
                    };
                }
            }
        }
        Ok(EpochLog {
            epoch,
            phase,
            loss,
            srocc,
            plcc,
            lr,
            accuracy,
        })
    }

    fn regression_epoch(&mut self, rng: &mut ChaCha8Rng, lr: f64) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batches = chunk
                .iter()
                .map(|&i| self.train_patches(i, rng.gen()))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f32> = chunk
                .iter()
                .map(|&i| self.cfg.target(self.train.manifest.records[i].mos))
                .collect();
            let refs: Vec<&PatchBatch> = batches.iter().collect();
            total += regression_step(&self.model, &mut self.params, &mut self.adam, lr, &refs, &targets)?;
            steps += 1;
        }
        Ok(total / steps.max(1) as f64)
    }

    fn pretrain_epoch(&mut self, rng: &mut ChaCha8Rng, epoch: usize, lr: f64) -> Result<f64> {
        let mode = self.cfg.label_mode();
        let mut groups: Vec<Vec<usize>> = self
            .train
            .manifest
            .groups()
            .into_values()
            .filter(|m| {
                let mos: Vec<f32> = m.iter().map(|&i| self.train.manifest.records[i].mos).collect();
                !labelled_pairs(&mos, mode).is_empty()
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::EmptyInput(
                "pretraining needs a contrast group with two distinct labels",
            ));
        }
        groups.shuffle(rng);
        let max = self.cfg.group_max_members;
        let (mut total, mut steps) = (0.0, 0usize);
        for members in &groups {
            // Large groups are visited through a window that moves every
            // epoch, so each member takes turns.
            let mut picked: Vec<usize> = if members.len() > max {
                let start = (epoch * max) % members.len();
                (0..max).map(|k| members[(start + k) % members.len()]).collect()
            } else {
                members.clone()
            };
            // Pairs are formed as (i, j) with i < j in member order. Manifests
            // often list a group by severity, which would make every label
            // the same and let the comparator answer from its bias alone.
            picked.shuffle(rng);
            let batches = picked
                .iter()
                .map(|&i| self.train_patches(i, rng.gen()))
                .collect::<Result<Vec<_>>>()?;
            let mos: Vec<f32> = picked.iter().map(|&i| self.train.manifest.records[i].mos).collect();
            let refs: Vec<&PatchBatch> = batches.iter().collect();
            let mut out = pairwise_grads(
                &self.model,
                &self.params,
                &self.comparator,
                &self.cmp_params,
                &refs,
                &mos,
                mode,
            )?;
            if out.pairs == 0 {
                continue;
            }
            if !out.loss.is_finite() {
                return Err(Error::NonFinite("pretraining loss"));
            }
            self.adam.step(&mut self.params, &mut out.model_grads, lr)?;
            self.cmp_adam
                .step(&mut self.cmp_params, &mut out.comparator_grads, lr)?;
            total += out.loss;
            steps += 1;
        }
        Ok(total / steps.max(1) as f64)
    }

    /// Snapshot of parameters, optimizer state and position in the run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            config: self.cfg.to_text(),
            ..Default::default()
        };
        c.meta.insert("variant".into(), self.cfg.model.variant.to_string());
        c.meta.insert("phase".into(), self.phase.to_string());
        c.meta.insert("next_epoch".into(), self.next_epoch.to_string());
        c.insert_prefixed(PARAM, &self.params);
        store_adam(&mut c, "adam", &self.adam);
        if self.phase == Phase::Pretrain {
            c.insert_prefixed(CMP, &self.cmp_params);
            store_adam(&mut c, "cmp_adam", &self.cmp_adam);
        }
        c
    }

    /// `<dir>/<phase>-epoch<k>.ckpt` for the epoch just finished.
    pub fn checkpoint_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!(
            "{}-epoch{}.ckpt",
            self.phase,
            self.next_epoch.saturating_sub(1)
        ))
    }

    /// Train to completion. Checkpoints go to `out_dir` every
    /// `checkpoint_every` epochs and after the last epoch of each phase;
    /// `on_epoch` sees each log line and the checkpoint written, if any.
    pub fn run(&mut self, out_dir: Option<&Path>, on_epoch: impl FnMut(&EpochLog, Option<&Path>)) -> Result<()> {
        self.run_while(out_dir, |t| !t.finished(), on_epoch)
    }

    /// Like [`Trainer::run`], but stop once pretraining is complete.
    pub fn run_pretrain(
        &mut self,
        out_dir: Option<&Path>,
        on_epoch: impl FnMut(&EpochLog, Option<&Path>),
    ) -> Result<()> {
        self.run_while(
            out_dir,
            |t| t.phase == Phase::Pretrain && t.next_epoch < t.cfg.pretrain_epochs,
            on_epoch,
        )
    }

    fn run_while(
        &mut self,
        out_dir: Option<&Path>,
        keep_going: impl Fn(&Self) -> bool,
        mut on_epoch: impl FnMut(&EpochLog, Option<&Path>),
    ) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while keep_going(self) {
            let log = self.run_epoch()?;
            let last = self.next_epoch >= self.phase_epochs(log.phase);
            let written = match out_dir {
                Some(dir) if last || self.next_epoch.is_multiple_of(self.cfg.checkpoint_every) => {
                    let path = self.checkpoint_path(dir);
                    self.checkpoint().save(&path)?;
                    Some(path)
                }
                _ => None,
            };
            on_epoch(&log, written.as_deref());
            if !keep_going(self) {
                break;
            }
            self.advance_phase();
        }
        Ok(())
    }
}

fn store_adam(c: &mut Checkpoint, prefix: &str, adam: &Adam) {
    c.meta.insert(format!("{prefix}_step"), adam.steps().to_string());
    for (name, mo) in adam.moments() {
        let n = mo.m.len();
        c.tensors.insert(
            format!("{prefix}.m/{name}"),
            Tensor::new([n], mo.m.clone()).expect("1-d"),
        );
        c.tensors.insert(
            format!("{prefix}.v/{name}"),
            Tensor::new([n], mo.v.clone()).expect("1-d"),
        );
    }
}

fn restore_adam(c: &Checkpoint, prefix: &str, config: super::optim::AdamConfig) -> Result<Adam> {
    let step = c.meta_parse(&format!("{prefix}_step"))?;
    let m = c.with_prefix(&format!("{prefix}.m/"));
    let v = c.with_prefix(&format!("{prefix}.v/"));
    let mut moments = Vec::with_capacity(m.len());
    for (name, mt) in m.iter() {
        let vt = v
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{name}` is incomplete")))?;
        moments.push((
            name.to_string(),
            Moments {
                m: mt.data().to_vec(),
                v: vt.data().to_vec(),
            },
        ));
    }
    Ok(Adam::restore(config, step, moments))
}

/// `saved` must hold exactly the tensors of `template`, shape for shape.
fn load_exact(template: &Params<f32>, saved: &Params<f32>) -> Result<Params<f32>> {
    if saved.len() != template.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            template.len(),
            saved.len()
        )));
    }
    let mut out = Params::new();
    for (name, t) in template.iter() {
        let s = saved
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            )));
        }
        out.insert(name, s.clone());
    }
    Ok(out)
}

/// Rebuild the scoring model stored in a checkpoint.
pub fn load_scoring_model(ckpt: &Checkpoint) -> Result<(RunConfig, Model, ModelParams)> {
    let cfg = RunConfig::parse_text(&ckpt.config, RunConfig::default())?;
    let template = build_model(&cfg.model, 0)?;
    let params = load_exact(&template, &ckpt.with_prefix(PARAM))?;
    let model = Model::new(cfg.model.clone())?;
    Ok((cfg, model, params))
}
