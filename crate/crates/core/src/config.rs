//! `key = value` run configuration shared by the trainer and the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::{AdamConfig, LabelMode, LrSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    /// Seed for the reference-level train/validation split.
    pub split_seed: u64,
    /// Fraction of references held out when no validation manifest is given.
    pub val_fraction: f64,
    pub epochs: usize,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub train_patches: usize,
    pub group_max_members: usize,
    pub soft_labels: bool,
    pub soft_label_tau: f32,
    /// Regression targets are `(mos - mos_offset) / mos_scale`.
    pub mos_offset: f32,
    pub mos_scale: f32,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            split_seed: 0,
            val_fraction: 0.2,
            epochs: 100,
            pretrain: false,
            pretrain_epochs: 10,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 2,
            train_patches: 32,
            group_max_members: 8,
            soft_labels: false,
            soft_label_tau: 5.0,
            mos_offset: 0.0,
            mos_scale: 1.0,
            checkpoint_every: 1,
            val_every: 1,
            manifest: None,
            val_manifest: None,
            out_dir: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Every recognised key, in echo order.
    pub const KEYS: [&'static str; 32] = [
        "variant",
        "stage_channels",
        "patch_size",
        "feature_width",
        "deform_stage",
        "head_hidden",
        "weight_epsilon",
        "max_offset",
        "seed",
        "split_seed",
        "val_fraction",
        "epochs",
        "pretrain",
        "pretrain_epochs",
        "lr",
        "lr_decay",
        "lr_decay_every",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "train_patches",
        "group_max_members",
        "soft_labels",
        "soft_label_tau",
        "mos_offset",
        "mos_scale",
        "checkpoint_every",
        "val_every",
        "manifest",
        "val_manifest",
        "out_dir",
    ];

    /// Narrow trunk widths suitable for CPU-scale training.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(Variant::Radn),
            ..Self::default()
        }
    }

    pub fn label_mode(&self) -> LabelMode {
        if self.soft_labels {
            LabelMode::Soft {
                tau: self.soft_label_tau,
            }
        } else {
            LabelMode::Hard
        }
    }

    pub fn target(&self, mos: f32) -> f32 {
        (mos - self.mos_offset) / self.mos_scale
    }

    pub fn to_mos(&self, q: f32) -> f32 {
        q * self.mos_scale + self.mos_offset
    }

    /// Apply one setting; the message names the key on failure.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "variant" => m.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "stage_channels" => {
                m.stage_channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "patch_size" => m.patch_size = parse(key, v)?,
            "feature_width" => m.feature_width = parse(key, v)?,
            "deform_stage" => m.deform_stage = parse(key, v)?,
            "head_hidden" => m.head_hidden = parse(key, v)?,
            "weight_epsilon" => m.weight_epsilon = parse(key, v)?,
            "max_offset" => {
                m.max_offset = match v {
                    "none" | "off" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "pretrain" => self.pretrain = parse_bool(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "lr" => self.schedule.initial = parse(key, v)?,
            "lr_decay" => self.schedule.factor = parse(key, v)?,
            "lr_decay_every" => self.schedule.every = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_patches" => self.train_patches = parse(key, v)?,
            "group_max_members" => self.group_max_members = parse(key, v)?,
            "soft_labels" => self.soft_labels = parse_bool(key, v)?,
            "soft_label_tau" => self.soft_label_tau = parse(key, v)?,
            "mos_offset" => self.mos_offset = parse(key, v)?,
            "mos_scale" => self.mos_scale = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "manifest" => self.manifest = opt_path(v),
            "val_manifest" => self.val_manifest = opt_path(v),
            "out_dir" => self.out_dir = opt_path(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored. Every bad line is reported, not just the first.
    pub fn parse_text(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        let mut errs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v) {
                        errs.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => errs.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
            }
        }
        if let Err(Error::Config(more)) = cfg.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: impl AsRef<Path>, base: Self) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.model.validate() {
            Err(Error::Config(e)) => e,
            _ => Vec::new(),
        };
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(self.schedule.initial > 0.0, "lr must be positive");
        need(
            self.schedule.factor > 0.0 && self.schedule.every > 0,
            "lr_decay and lr_decay_every must be positive",
        );
        need((0.0..1.0).contains(&self.adam.beta1), "beta1 must lie in [0, 1)");
        need((0.0..1.0).contains(&self.adam.beta2), "beta2 must lie in [0, 1)");
        need(self.adam.eps > 0.0, "adam_eps must be positive");
        need(self.batch_size > 0, "batch_size must be positive");
        need(self.train_patches > 0, "train_patches must be positive");
        need(self.group_max_members >= 2, "group_max_members must be at least 2");
        need(self.soft_label_tau > 0.0, "soft_label_tau must be positive");
        need(
            self.mos_scale != 0.0 && self.mos_scale.is_finite() && self.mos_offset.is_finite(),
            "mos_scale must be finite and non-zero",
        );
        need(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction must lie in [0, 1)",
        );
        need(
            self.checkpoint_every > 0 && self.val_every > 0,
            "checkpoint_every and val_every must be positive",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Every effective value, one `key = value` per line, in [`Self::KEYS`]
    /// order. Parsing the echo reproduces the configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("variant", m.variant.to_string());
        put(
            "stage_channels",
            m.stage_channels
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put("patch_size", m.patch_size.to_string());
        put("feature_width", m.feature_width.to_string());
        put("deform_stage", m.deform_stage.to_string());
        put("head_hidden", m.head_hidden.to_string());
        put("weight_epsilon", m.weight_epsilon.to_string());
        put(
            "max_offset",
            m.max_offset.map_or_else(|| "none".into(), |v| v.to_string()),
        );
        put("seed", self.seed.to_string());
        put("split_seed", self.split_seed.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("epochs", self.epochs.to_string());
        put("pretrain", self.pretrain.to_string());
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("lr", self.schedule.initial.to_string());
        put("lr_decay", self.schedule.factor.to_string());
        put("lr_decay_every", self.schedule.every.to_string());
        put("beta1", self.adam.beta1.to_string());
        put("beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("train_patches", self.train_patches.to_string());
        put("group_max_members", self.group_max_members.to_string());
        put("soft_labels", self.soft_labels.to_string());
        put("soft_label_tau", self.soft_label_tau.to_string());
        put("mos_offset", self.mos_offset.to_string());
        put("mos_scale", self.mos_scale.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("val_every", self.val_every.to_string());
        put("manifest", show_path(&self.manifest));
        put("val_manifest", show_path(&self.val_manifest));
        put("out_dir", show_path(&self.out_dir));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::toy();
        cfg.model.max_offset = Some(2.5);
        cfg.pretrain = true;
        cfg.manifest = Some("data/manifest.tsv".into());
        let back = RunConfig::parse_text(&cfg.to_text(), RunConfig::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let text = "epochs = 3\ncolour = blue\nlr = fast\nbatch_size = 0\nnonsense\n";
        match RunConfig::parse_text(text, RunConfig::toy()) {
            Err(Error::Config(errs)) => {
                let all = errs.join("\n");
                assert!(all.contains("colour") && all.contains("lr") && all.contains("line 5"));
                assert!(all.contains("batch_size"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.train_patches, c.batch_size), (32, 2));
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.9, 0.999));
        assert_eq!(c.schedule.initial, 1e-4);
        assert_eq!((c.schedule.factor, c.schedule.every), (0.8, 100));
    }
}
