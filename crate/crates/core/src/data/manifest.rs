use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::write_atomic;
use super::synth::{synth_distort, DistortionKind, MAX_SEVERITY};
use super::{load_image, save_image, ImageBuffer};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "#fields: ref\tdist\tmos\tgroup\ttag";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f32,
    pub group_id: String,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory that relative record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Parse manifest text. `origin` names the file in error messages; its
    /// parent directory becomes the root.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(err(1, format!("first line must be `{MANIFEST_HEADER}`"))),
        }
        let mut records = Vec::new();
        let mut group_refs: IndexMap<String, PathBuf> = IndexMap::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(n, format!("expected 5 tab-separated fields, found {}", f.len())));
            }
            let mos: f32 = f[2]
                .parse()
                .map_err(|_| err(n, format!("mos `{}` is not a number", f[2])))?;
            if !mos.is_finite() {
                return Err(err(n, format!("mos `{}` is not finite", f[2])));
            }
            if f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
                return Err(err(n, "ref, dist and group must be non-empty".into()));
            }
            let rec = ManifestRecord {
                ref_path: PathBuf::from(f[0]),
                dist_path: PathBuf::from(f[1]),
                mos,
                group_id: f[3].to_string(),
                tag: f[4].to_string(),
            };
            match group_refs.get(&rec.group_id) {
                Some(r) if *r != rec.ref_path => {
                    return Err(err(
                        n,
                        format!(
                            "group `{}` mixes references {} and {}",
                            rec.group_id,
                            r.display(),
                            rec.ref_path.display()
                        ),
                    ))
                }
                Some(_) => {}
                None => {
                    group_refs.insert(rec.group_id.clone(), rec.ref_path.clone());
                }
            }
            records.push(rec);
        }
        let root = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.ref_path.display(),
                r.dist_path.display(),
                r.mos,
                r.group_id,
                r.tag
            )
            .expect("string write");
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    /// Load and validate one record's image pair.
    pub fn load_pair(&self, index: usize, min_side: usize) -> Result<(ImageBuffer, ImageBuffer)> {
        let rec = &self.records[index];
        let r = load_image(self.resolve(&rec.ref_path))?;
        let d = load_image(self.resolve(&rec.dist_path))?;
        validate_pair(&r, &d, min_side).map_err(|reason| Error::Manifest {
            path: self.resolve(&rec.dist_path),
            line: index + 2,
            reason,
        })?;
        Ok((r, d))
    }

    /// Record indices per contrast group, in first-appearance order.
    pub fn groups(&self) -> IndexMap<&str, Vec<usize>> {
        let mut g: IndexMap<&str, Vec<usize>> = IndexMap::new();
        for (i, r) in self.records.iter().enumerate() {
            g.entry(r.group_id.as_str()).or_default().push(i);
        }
        g
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Partition by reference image so no reference appears on both sides.
    /// `round(val_fraction * refs)` references, chosen by `seed`, go to the
    /// second manifest.
    pub fn split_by_reference(&self, val_fraction: f64, seed: u64) -> (Self, Self) {
        let mut refs: Vec<&Path> = Vec::new();
        for r in &self.records {
            if !refs.contains(&r.ref_path.as_path()) {
                refs.push(&r.ref_path);
            }
        }
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (val_fraction * refs.len() as f64).round() as usize;
        let val_refs = &refs[..n_val.min(refs.len())];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, r) in self.records.iter().enumerate() {
            if val_refs.contains(&r.ref_path.as_path()) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (self.subset(&train), self.subset(&val))
    }
}

fn validate_pair(r: &ImageBuffer, d: &ImageBuffer, min_side: usize) -> std::result::Result<(), String> {
    if (r.width(), r.height()) != (d.width(), d.height()) {
        return Err(format!(
            "reference is {}x{} but distorted is {}x{}",
            r.width(),
            r.height(),
            d.width(),
            d.height()
        ));
    }
    if r.width() < min_side || r.height() < min_side {
        return Err(format!(
            "{}x{} is smaller than the {min_side}-pixel minimum",
            r.width(),
            r.height()
        ));
    }
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm" | "png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Distort every image in `ref_dir` `per_ref` times and write the dataset
/// layout under `out_dir`: `ref/<id>.ppm`, `dist/<id>_<kind>_<sev>.ppm` and
/// `manifest.tsv`. Distortion `j` of a reference uses kind `j mod 5` and
/// severity `(j div 5) + 1`, so 25 per reference covers every combination.
pub fn build_synthetic_manifest(
    ref_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    per_ref: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let (ref_dir, out_dir) = (ref_dir.as_ref(), out_dir.as_ref());
    let combos = DistortionKind::ALL.len() * MAX_SEVERITY as usize;
    if per_ref == 0 || per_ref > combos {
        return Err(Error::InvalidArgument(format!(
            "per_ref must lie in 1..={combos}, got {per_ref}"
        )));
    }
    let files = image_files(ref_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no .ppm or .png reference images",
            ref_dir.display()
        )));
    }
    for sub in ["ref", "dist"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut records = Vec::with_capacity(files.len() * per_ref);
    for (ri, file) in files.iter().enumerate() {
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("{}: bad file name", file.display())))?
            .to_string();
        let img = load_image(file)?;
        let ref_rel = PathBuf::from("ref").join(format!("{id}.ppm"));
        save_image(&img, out_dir.join(&ref_rel))?;
        for j in 0..per_ref {
            let kind = DistortionKind::ALL[j % DistortionKind::ALL.len()];
            let sev = (j / DistortionKind::ALL.len()) as u8 + 1;
            let dseed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((ri * combos + j) as u64);
            let (dist, mos) = synth_distort(&img, kind, sev, dseed)?;
            let dist_rel = PathBuf::from("dist").join(format!("{id}_{kind}_{sev}.ppm"));
            save_image(&dist, out_dir.join(&dist_rel))?;
            records.push(ManifestRecord {
                ref_path: ref_rel.clone(),
                dist_path: dist_rel,
                mos,
                group_id: format!("{id}_{kind}"),
                tag: kind.to_string(),
            });
        }
    }
    let manifest = DatasetManifest::new(out_dir, records);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Write `count` procedural references of `size x size` as `<dir>/refNN.ppm`.
pub fn write_synthetic_references(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("ref{i:03}.ppm"));
            let img = super::synth_reference(size, size, seed.wrapping_add(i as u64));
            save_image(&img, &p)?;
            Ok(p)
        })
        .collect()
}
