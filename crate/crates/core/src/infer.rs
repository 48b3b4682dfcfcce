//! Mask prediction on image files and dataset evaluation, optionally under a
//! JPEG or resampling degradation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::MAX_STRIDE;
use crate::data::imageio::{read_rgb, write_gray};
use crate::data::{batch, jpeg_roundtrip, quantize, resize_bilinear, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{f1_iou, ImageScore, MetricReport};
use crate::model::Model;
use crate::tensor::{precision, with_precision, Tensor};

/// Mirror index into `0..n` without repeating the edge; tiles as often as
/// needed, so any padding width is accepted.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads `[C, H, W]` on the bottom and right by reflection.
pub fn pad_reflect(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(out_h >= h && out_w >= w, "padding never shrinks");
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for i in 0..out_h {
            let y = mirror(i, h);
            for j in 0..out_w {
                out[(ch * out_h + i) * out_w + j] = t.data()[(ch * h + y) * w + mirror(j, w)];
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

/// Top-left `[C, h, w]` window.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let row = (ch * sh + i) * sw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("sized")
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Probability map `[1, H, W]` for one `[3, H, W]` image of any size.
/// Inputs are reflect-padded up to the encoder stride and the output is
/// cropped back, so its size always equals the input's.
pub fn predict_image(model: &mut Model, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("predict_image", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (ph, pw) = (round_up(h, MAX_STRIDE), round_up(w, MAX_STRIDE));
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        pad_reflect(image, ph, pw)
    };
    let p = model.predict(&batch(&[&padded]))?;
    let p = p.reshape(&[1, ph, pw])?;
    Ok(if (ph, pw) == (h, w) { p } else { crop(&p, h, w) })
}

/// Binary mask of `p >= threshold`.
pub fn binarize(p: &Tensor, threshold: f64) -> Tensor {
    p.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    /// `(input, soft mask, binary mask)` per processed image.
    pub written: Vec<(PathBuf, PathBuf, PathBuf)>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Writes `<stem>_soft.png` (P·255) and `<stem>_mask.png` for each image.
/// Unreadable images are logged and listed in `failed`; the rest proceed.
pub fn infer(model: &Model, images: &[PathBuf], out_dir: &Path, threshold: f64) -> Result<InferReport> {
    check_threshold(threshold)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mode = precision();
    let results: Vec<Result<(PathBuf, PathBuf)>> = images
        .par_iter()
        .map_init(
            || model.clone(),
            |m, path| {
                with_precision(mode, || {
                    let img = read_rgb(path)?;
                    let p = predict_image(m, &img)?;
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let soft = out_dir.join(format!("{stem}_soft.png"));
                    let hard = out_dir.join(format!("{stem}_mask.png"));
                    write_gray(&soft, &p)?;
                    write_gray(&hard, &binarize(&p, threshold))?;
                    Ok((soft, hard))
                })
            },
        )
        .collect();
    let mut report = InferReport::default();
    for (path, r) in images.iter().zip(results) {
        match r {
            Ok((soft, hard)) => report.written.push((path.clone(), soft, hard)),
            Err(e) if e.is_io() => {
                log::error!("{}: {e}; skipped", path.display());
                report.failed.push((path.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Post-processing applied to each image before prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degrade {
    /// JPEG round trip at this quality.
    Jpeg(u8),
    /// Bilinear down-scale by this factor and back to the original size,
    /// which keeps the image aligned with its mask.
    Resize(f64),
}

impl Degrade {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            Degrade::Jpeg(q) => jpeg_roundtrip(image, q),
            Degrade::Resize(f) => {
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let sh = ((h as f64 * f).round() as usize).max(1);
                let sw = ((w as f64 * f).round() as usize).max(1);
                Ok(quantize(&resize_bilinear(&resize_bilinear(image, sh, sw), h, w)))
            }
        }
    }
}

impl FromStr for Degrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("degradation {s:?} is not jpeg:Q or resize:F"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "jpeg" => {
                let q: u8 = arg.parse().map_err(|_| bad())?;
                if !(10..=100).contains(&q) {
                    return Err(Error::InvalidArgument(format!("JPEG quality {q} outside [10, 100]")));
                }
                Ok(Degrade::Jpeg(q))
            }
            "resize" => {
                let f: f64 = arg.parse().map_err(|_| bad())?;
                if !(f > 0.0 && f <= 4.0) {
                    return Err(Error::InvalidArgument(format!("resize factor {f} outside (0, 4]")));
                }
                Ok(Degrade::Resize(f))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Degrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degrade::Jpeg(q) => write!(f, "jpeg:{q}"),
            Degrade::Resize(s) => write!(f, "resize:{s}"),
        }
    }
}

/// Scores every item of `data`, in parallel per image.
pub fn score_dataset(model: &Model, data: &Dataset, threshold: f64, degrade: Option<Degrade>) -> Result<MetricReport> {
    check_threshold(threshold)?;
    let mode = precision();
    let scores: Vec<Result<ImageScore>> = data
        .items
        .par_iter()
        .map_init(
            || model.clone(),
            |m, item| {
                with_precision(mode, || {
                    let img = match degrade {
                        Some(d) => d.apply(&item.image)?,
                        None => item.image.clone(),
                    };
                    let p = predict_image(m, &img)?;
                    f1_iou(&item.record.image, p.data(), item.mask.data(), threshold)
                })
            },
        )
        .collect();
    Ok(MetricReport::new(threshold, scores.into_iter().collect::<Result<_>>()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub n: usize,
    pub threshold: f64,
    pub f1: f64,
    pub iou: f64,
    /// Clean F1 minus this row's F1; present only for degraded runs.
    pub f1_delta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub clean: MetricReport,
    pub degraded: Option<(Degrade, MetricReport)>,
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
}

pub const EVAL_JSONL: &str = "eval.jsonl";
pub const EVAL_CSV: &str = "eval.csv";

/// Evaluates on a manifest and writes `eval.jsonl` (one line per image and
/// condition) and `eval.csv` into `out_dir`. The CSV columns are
/// `dataset,n,threshold,F1,IoU`, plus `F1_delta` when a degradation runs.
pub fn evaluate(
    model: &Model,
    manifest: &Path,
    threshold: f64,
    degrade: Option<Degrade>,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let (data, skipped) = Dataset::load_manifest(manifest)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} lists no usable pairs",
            manifest.display()
        )));
    }
    let name = manifest
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let clean = score_dataset(model, &data, threshold, None)?;
    let degraded = match degrade {
        Some(d) => Some((d, score_dataset(model, &data, threshold, Some(d))?)),
        None => None,
    };
    let mut rows = vec![EvalRow {
        dataset: name.clone(),
        n: clean.len(),
        threshold,
        f1: clean.mean_f1,
        iou: clean.mean_iou,
        f1_delta: degraded.as_ref().map(|_| 0.0),
    }];
    if let Some((d, r)) = &degraded {
        rows.push(EvalRow {
            dataset: format!("{name}@{d}"),
            n: r.len(),
            threshold,
            f1: r.mean_f1,
            iou: r.mean_iou,
            f1_delta: Some(clean.mean_f1 - r.mean_f1),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_jsonl(&out_dir.join(EVAL_JSONL), &clean, degraded.as_ref())?;
    write_csv(&out_dir.join(EVAL_CSV), &rows)?;
    Ok(EvalOutcome {
        clean,
        degraded,
        rows,
        skipped,
    })
}

#[derive(Serialize)]
struct JsonLine<'a> {
    condition: String,
    #[serde(flatten)]
    score: &'a ImageScore,
}

fn write_jsonl(path: &Path, clean: &MetricReport, degraded: Option<&(Degrade, MetricReport)>) -> Result<()> {
    let mut out = String::new();
    let mut emit = |cond: String, r: &MetricReport| -> Result<()> {
        for s in &r.images {
            out.push_str(&serde_json::to_string(&JsonLine {
                condition: cond.clone(),
                score: s,
            })?);
            out.push('\n');
        }
        Ok(())
    };
    emit("clean".into(), clean)?;
    if let Some((d, r)) = degraded {
        emit(d.to_string(), r)?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let with_delta = rows.iter().any(|r| r.f1_delta.is_some());
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("dataset,n,threshold,F1,IoU");
    if with_delta {
        text.push_str(",F1_delta");
    }
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{:.6},{:.6}",
            r.dataset, r.n, r.threshold, r.f1, r.iou
        ));
        if with_delta {
            text.push_str(&format!(",{:.6}", r.f1_delta.unwrap_or(0.0)));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_reflects_without_edge_repeat() {
        let idx: Vec<usize> = (0..9).map(|i| mirror(i, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(mirror(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = pad_reflect(&t, 3, 5);
        assert_eq!(p.data(), &[1., 2., 3., 2., 1., 4., 5., 6., 5., 4., 1., 2., 3., 2., 1.]);
        assert!(crop(&p, 2, 3).bit_eq(&t));
    }

    #[test]
    fn degrade_parses_and_prints() {
        assert_eq!("jpeg:75".parse::<Degrade>().unwrap(), Degrade::Jpeg(75));
        assert_eq!("resize:0.5".parse::<Degrade>().unwrap(), Degrade::Resize(0.5));
        assert_eq!(Degrade::Jpeg(75).to_string(), "jpeg:75");
        for bad in ["jpeg", "jpeg:5", "resize:0", "blur:2", "jpeg:x"] {
            assert!(bad.parse::<Degrade>().is_err(), "{bad}");
        }
    }

    #[test]
    fn resize_degrade_keeps_size() {
        let t = Tensor::full(&[3, 10, 14], 64.0 / 255.0);
        let d = Degrade::Resize(0.5).apply(&t).unwrap();
        assert_eq!(d.shape(), &[3, 10, 14]);
        assert!(d.bit_eq(&t));
        let ramp = Tensor::new(&[3, 1, 7], (0..21).map(|i| i as f64 / 20.0).collect()).unwrap();
        let r = Degrade::Resize(0.5).apply(&ramp).unwrap();
        assert!(
            r.data().iter().all(|&v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9),
            "stays on the 8-bit grid"
        );
    }

    #[test]
    fn odd_sized_prediction_matches_input_size() {
        let mut model = Model::new(&crate::config::ModelConfig::tiny(), 1).unwrap();
        let img = Tensor::full(&[3, 37, 50], 0.5);
        let p = predict_image(&mut model, &img).unwrap();
        assert_eq!(p.shape(), &[1, 37, 50]);
    }
}
