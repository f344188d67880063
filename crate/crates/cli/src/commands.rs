use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use radn::data::{build_synthetic_manifest, load_image, save_image, write_synthetic_references, PatchMode};
use radn::gradcheck::suite;
use radn::model::{predict_image, render_weight_map};
use radn::training::{correlations, default_threads, evaluate, load_scoring_model, LoadedSet, Trainer};
use radn::{Checkpoint, DatasetManifest, Error, RunConfig};

use crate::{EvalArgs, Failure, GenArgs, GradcheckArgs, PairArgs, TrainArgs, VisArgs};

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Error(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

pub fn gen(a: GenArgs) -> CmdResult {
    if let Some(n) = a.synth_refs {
        write_synthetic_references(&a.refs, n, a.size, a.seed)?;
    } else if !a.refs.is_dir() {
        return Err(Failure::Error(Error::InvalidArgument(format!(
            "{}: reference directory does not exist",
            a.refs.display()
        ))));
    }
    let m = build_synthetic_manifest(&a.refs, &a.out, a.per_ref, a.seed)?;
    println!("{} records", m.len());
    Ok(())
}

/// Defaults, then the checkpoint's configuration when resuming, then the
/// file, then flags. Every bad key from every source is reported at once.
fn resolve_config(a: &TrainArgs, resume: Option<&Checkpoint>) -> Result<RunConfig, Failure> {
    let base = if a.toy { RunConfig::toy() } else { RunConfig::default() };
    let mut cfg = match resume {
        Some(c) => RunConfig::parse_text(&c.config, base)?,
        None => base,
    };
    let mut errs = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        match RunConfig::parse_text(&text, cfg.clone()) {
            Ok(c) => cfg = c,
            Err(Error::Config(e)) => errs.extend(e.into_iter().map(|m| format!("{}: {m}", path.display()))),
            Err(e) => return Err(e.into()),
        }
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &a.sets {
        match s.split_once('=') {
            Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
            None => errs.push(format!("--set {s}: expected KEY=VALUE")),
        }
    }
    let show = |p: &Path| p.display().to_string();
    let flags = [
        ("variant", a.variant.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("pretrain_epochs", a.pretrain_epochs.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("manifest", a.manifest.as_deref().map(show)),
        ("val_manifest", a.val_manifest.as_deref().map(show)),
        ("out_dir", a.out.as_deref().map(show)),
    ];
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    for (k, v) in overrides {
        if let Err(e) = cfg.set(&k, &v) {
            errs.push(format!("flag: {e}"));
        }
    }
    if let Err(Error::Config(e)) = cfg.validate() {
        errs.extend(e);
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs).into())
    }
}

pub fn train(a: TrainArgs, pretrain_only: bool) -> CmdResult {
    let ckpt = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let mut cfg = resolve_config(&a, ckpt.as_ref())?;
    if pretrain_only {
        cfg.pretrain = true;
        if cfg.pretrain_epochs == 0 {
            return Err(Failure::Usage("pretrain_epochs must be positive for `pretrain`".into()));
        }
    }
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::Usage("no manifest given (use --manifest or the `manifest` key)".into()))?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no run directory given (use --out or the `out_dir` key)".into()))?;
    for line in cfg.to_text().lines() {
        eprintln!("# {line}");
    }

    let full = DatasetManifest::load(&manifest_path)?;
    let (train_m, val_m) = match &cfg.val_manifest {
        Some(p) => (full, Some(DatasetManifest::load(p)?)),
        None if cfg.val_fraction > 0.0 => {
            let (t, v) = full.split_by_reference(cfg.val_fraction, cfg.split_seed);
            (t, (!v.is_empty()).then_some(v))
        }
        None => (full, None),
    };
    let side = cfg.model.patch_size;
    let train_set = LoadedSet::load(train_m, side)?;
    let val_set = val_m.map(|m| LoadedSet::load(m, side)).transpose()?;
    eprintln!(
        "# {} training pairs, {} validation pairs",
        train_set.len(),
        val_set.as_ref().map_or(0, LoadedSet::len)
    );

    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(cfg.clone(), c, train_set, val_set)?,
        None => Trainer::new(cfg.clone(), train_set, val_set)?,
    };
    trainer.set_threads(a.threads.unwrap_or_else(default_threads));

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;
    let log_path = out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log_err = None;
    let mut last = None;
    let on_epoch = |line: &radn::training::EpochLog, saved: Option<&Path>| {
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        if let Some(p) = saved {
            last = Some(p.to_path_buf());
        }
    };
    if pretrain_only {
        trainer.run_pretrain(Some(&out), on_epoch)?;
    } else {
        trainer.run(Some(&out), on_epoch)?;
    }
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    match last {
        Some(p) => eprintln!("# final checkpoint {}", p.display()),
        None => eprintln!("# nothing left to train"),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (cfg, model, params) = load_scoring_model(&ckpt)?;
    let set = LoadedSet::load(DatasetManifest::load(&a.manifest)?, cfg.model.patch_size)?;
    let records = evaluate(&model, &params, &set, a.threads.unwrap_or_else(default_threads))?;
    let pred: Vec<f32> = records.iter().map(|r| cfg.to_mos(r.quality)).collect();
    let mos = set.mos();
    if let Some(path) = &a.scores {
        let mut text = String::from("image\tmos\tpredicted\n");
        for ((r, m), p) in records.iter().zip(&mos).zip(&pred) {
            text.push_str(&format!("{}\t{m}\t{p}\n", r.image_id));
        }
        fs::write(path, text).map_err(io_err(path))?;
    }
    let n = pred.len();
    let (s, p) = correlations(&pred, &mos);
    let s = if n < 3 {
        eprintln!("warning: SROCC needs at least 3 images, got {n}");
        None
    } else {
        s
    };
    if p.is_none() {
        eprintln!("warning: PLCC is undefined for this set (N={n} or constant scores)");
    }
    let show = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    println!("{}\t{}\t{n}", show(s), show(p));
    Ok(())
}

fn score_pair(a: &PairArgs) -> Result<(RunConfig, radn::ScoreRecord), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (cfg, model, params) = load_scoring_model(&ckpt)?;
    let r = load_image(&a.reference)?;
    let d = load_image(&a.dist)?;
    let mut rec = predict_image(&model, &params, &r, &d, PatchMode::EvalGrid, 0, 0)?;
    rec.image_id = a.dist.display().to_string();
    Ok((cfg, rec))
}

pub fn score(a: PairArgs) -> CmdResult {
    let (cfg, rec) = score_pair(&a)?;
    println!("{}", cfg.to_mos(rec.quality));
    Ok(())
}

pub fn vis(a: VisArgs) -> CmdResult {
    let (_, rec) = score_pair(&a.pair)?;
    save_image(&render_weight_map(&rec)?, &a.out)?;
    eprintln!("# {} patches rendered to {}", rec.weights.len(), a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let rows = suite(a.variant, a.seed)?;
    println!("check\tchecked\tskipped\tmax_rel_error\ttolerance\tresult");
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passed();
        println!(
            "{}\t{}\t{}\t{:.3e}\t{:.0e}\t{}",
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
