//! On-disk datasets: PNG pairs listed in a JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::imageio::{read_mask, read_rgb, write_gray, write_rgb};
use super::synth::{synthesize, SynthSpec, TamperType};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Paths are relative to the manifest's directory unless absolute.
    pub image: String,
    pub mask: String,
    pub tamper_type: TamperType,
    pub seed: u64,
    #[serde(default)]
    pub index: usize,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthesizes `spec` into `out_dir` as `images/`, `masks/` and a manifest.
pub fn write_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let samples = synthesize(spec)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let image = format!("images/{:05}.png", s.index);
        let mask = format!("masks/{:05}.png", s.index);
        write_rgb(&out_dir.join(&image), &s.image)?;
        write_gray(&out_dir.join(&mask), &s.mask)?;
        records.push(ManifestRecord {
            image,
            mask,
            tamper_type: s.tamper,
            seed: spec.seed,
            index: s.index,
        });
    }
    write_manifest(&out_dir.join(MANIFEST), &records)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct Item {
    pub record: ManifestRecord,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<Item>,
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

impl Dataset {
    /// Loads every pair of a manifest. Pairs whose image and mask sizes
    /// differ are skipped with a warning and returned separately.
    pub fn load_manifest(manifest: &Path) -> Result<(Self, Vec<String>)> {
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut items = Vec::new();
        let mut skipped = Vec::new();
        for record in read_manifest(manifest)? {
            let image = read_rgb(&resolve(&root, &record.image))?;
            let mask = read_mask(&resolve(&root, &record.mask))?;
            if image.shape()[1..] != mask.shape()[1..] {
                log::warn!(
                    "{}: image {:?} and mask {:?} differ in size, skipped",
                    record.image,
                    image.shape(),
                    mask.shape()
                );
                skipped.push(record.image.clone());
                continue;
            }
            items.push(Item { record, image, mask });
        }
        Ok((Self { root, items }, skipped))
    }

    /// Loads `dir/manifest.jsonl`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self::load_manifest(&dir.join(MANIFEST))?.0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
