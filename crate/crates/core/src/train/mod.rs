//! Training loop: augment, forward, dice+focal, backward, AdamW on a cosine
//! schedule. Single-threaded and fully determined by the config and seed.

mod adamw;
mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use checkpoint::{Checkpoint, RngState, TensorEntry, TensorKind, MAGIC, VERSION};

use crate::config::ModelConfig;
use crate::data::{augment, batch, resize_bilinear, resize_nearest, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{f1_iou, MetricReport};
use crate::model::Model;
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`, held at
/// `lr_min` past `total`. Endpoints are returned exactly.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step == 0 {
        return lr_max;
    }
    if step >= total {
        return lr_min;
    }
    let t = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// A named preset or a full architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Config(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => {
                ModelConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown model preset {name:?}")))
            }
            ModelSpec::Config(c) => Ok(c.clone()),
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("desk".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub loss: LossConfig,
    /// Square side every sample is resized to before batching.
    pub image_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_interval: usize,
    /// Score the held-out split every this many epochs; 0 never.
    pub eval_interval: usize,
    pub augment: AugmentSpec,
    pub holdout_fraction: f64,
    /// Stop early after this many optimizer steps. The schedule still spans
    /// the full `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            epochs: 30,
            batch_size: 4,
            lr_max: 5e-3,
            lr_min: 5e-4,
            adamw: AdamWConfig::default(),
            loss: LossConfig::default(),
            image_size: 64,
            seed: 0,
            checkpoint_interval: 10,
            eval_interval: 1,
            augment: AugmentSpec::default(),
            holdout_fraction: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        model.validate()?;
        model.check_input(self.image_size, self.image_size)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub holdout_f1: Option<f64>,
    pub holdout_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub train_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Deterministic split of `0..n`. The train part keeps at least two items.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let hold = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(2));
    let holdout = idx.split_off(n - hold);
    (idx, holdout)
}

/// Batches of one epoch; a trailing batch smaller than two is dropped.
fn epoch_batches(train: &[usize], batch_size: usize) -> usize {
    let full = train.len() / batch_size;
    full + usize::from(train.len() % batch_size >= 2)
}

fn fit(t: &Tensor, n: usize, mask: bool) -> Tensor {
    if t.shape()[1..] == [n, n] {
        t.clone()
    } else if mask {
        resize_nearest(t, n, n)
    } else {
        resize_bilinear(t, n, n)
    }
}

/// Eval-mode scores of `indices` at the training size.
pub fn score_items(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    size: usize,
    threshold: f64,
) -> Result<MetricReport> {
    let mut scores = Vec::with_capacity(indices.len());
    for &i in indices {
        let item = &data.items[i];
        let x = fit(&item.image, size, false);
        let gt = fit(&item.mask, size, true);
        let p = model.predict(&batch(&[&x]))?;
        scores.push(f1_iou(&item.record.image, p.data(), gt.data(), threshold)?);
    }
    Ok(MetricReport::new(threshold, scores))
}

struct Logs {
    step: Option<fs::File>,
    epoch: Option<fs::File>,
    dir: Option<PathBuf>,
}

impl Logs {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                step: None,
                epoch: None,
                dir: None,
            });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            step: Some(create("step_log.jsonl")?),
            epoch: Some(create("train_log.jsonl")?),
            dir: Some(dir.to_path_buf()),
        })
    }

    fn line<T: Serialize>(file: &mut Option<fs::File>, dir: &Option<PathBuf>, v: &T) -> Result<()> {
        if let (Some(f), Some(d)) = (file.as_mut(), dir) {
            let mut s = serde_json::to_string(v)?;
            s.push('\n');
            f.write_all(s.as_bytes()).map_err(|e| Error::io(d, e))?;
        }
        Ok(())
    }
}

fn snapshot(model: &Model, adam: &AdamState, epoch: usize, step: usize, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        model: model.config().clone(),
        store: model.store.clone(),
        adam: Some(adam.clone()),
        epoch: epoch as u64,
        step: step as u64,
        rng: Some(RngState::capture(rng)),
    }
}

/// Trains on `data`. With `out_dir`, writes `step_log.jsonl`,
/// `train_log.jsonl`, periodic `epoch_NNNN.ckpt` and `final.ckpt`; a
/// non-finite loss or gradient writes `last_good.ckpt` and returns a
/// numerical error.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let model_cfg = cfg.model.resolve()?;
    let mut model = Model::new(&model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&model.store);
    let (train_idx, holdout_idx) = holdout_split(data.len(), cfg.holdout_fraction, cfg.seed);
    let per_epoch = epoch_batches(&train_idx, cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} training items cannot form a batch of at least two",
            train_idx.len()
        )));
    }
    let total = per_epoch * cfg.epochs;
    let limit = cfg.max_steps.unwrap_or(total).min(total);
    let mut aug = cfg.augment.clone();
    aug.out_size = Some(cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut logs = Logs::open(out_dir)?;
    let mut steps = Vec::with_capacity(limit);
    let mut epochs = Vec::new();
    let mut order = train_idx.clone();
    let mut step = 0usize;
    let mut final_checkpoint = None;

    'outer: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            if step >= limit {
                break 'outer;
            }
            let before = snapshot(&model, &adam, epoch - 1, step, &rng);
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &data.items[i];
                let (x, m) = augment(&item.image, &item.mask, &aug, &mut rng)?;
                imgs.push(x);
                masks.push(m);
            }
            let x = Tensor::stack(&imgs)?;
            let gt = Tensor::stack(&masks)?;
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);

            let g = Graph::new();
            let result = (|| {
                let mut ctx = Ctx::new(&g, &mut model.store, true);
                let xv = g.constant(x);
                let trace = model.network.forward(&mut ctx, xv)?;
                let loss = total_loss(&g, trace.mask, &gt, &cfg.loss)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss {value} at step {step}")));
                }
                g.backward(loss)?;
                Ok((value, ctx.grads()))
            })()
            .and_then(|(value, grads)| {
                adamw_step(&mut model.store, &grads, &mut adam, lr, &cfg.adamw)?;
                Ok(value)
            });
            let loss = match result {
                Ok(v) => v,
                Err(e) => {
                    if e.is_numerical() {
                        if let Some(dir) = out_dir {
                            before.save(&dir.join("last_good.ckpt"))?;
                        }
                        log::error!("step {step}: {e}; last good state kept");
                    }
                    return Err(e);
                }
            };
            step += 1;
            epoch_loss += loss;
            epoch_steps += 1;
            log::debug!("step {step} lr {lr:.3e} loss {loss:.6}");
            let rec = StepLog { step, epoch, lr, loss };
            Logs::line(&mut logs.step, &logs.dir, &rec)?;
            steps.push(rec);
        }
        if epoch_steps == 0 {
            break;
        }
        let (mut hf1, mut hiou) = (None, None);
        if cfg.eval_interval > 0 && epoch % cfg.eval_interval == 0 && !holdout_idx.is_empty() {
            let r = score_items(&mut model, data, &holdout_idx, cfg.image_size, 0.5)?;
            hf1 = Some(r.mean_f1);
            hiou = Some(r.mean_iou);
        }
        let rec = EpochLog {
            epoch,
            steps: epoch_steps,
            mean_loss: epoch_loss / epoch_steps as f64,
            lr,
            holdout_f1: hf1,
            holdout_iou: hiou,
        };
        log::info!(
            "epoch {epoch}: loss {:.5}{}",
            rec.mean_loss,
            hf1.map(|f| format!(", holdout F1 {f:.4}")).unwrap_or_default()
        );
        Logs::line(&mut logs.epoch, &logs.dir, &rec)?;
        epochs.push(rec);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
                snapshot(&model, &adam, epoch, step, &rng).save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("final.ckpt");
        let last_epoch = epochs.last().map_or(0, |e| e.epoch);
        snapshot(&model, &adam, last_epoch, step, &rng).save(&p)?;
        final_checkpoint = Some(p);
    }
    Ok(TrainOutcome {
        model,
        adam,
        steps,
        epochs,
        train_indices: train_idx,
        holdout_indices: holdout_idx,
        final_checkpoint,
    })
}

/// Loads a checkpoint into a ready model.
pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    Model::from_store(&ck.model, ck.store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 5e-3, 5e-4), 5e-3);
        assert_eq!(cosine_lr(100, 100, 5e-3, 5e-4), 5e-4);
        assert_eq!(cosine_lr(250, 100, 5e-3, 5e-4), 5e-4);
        assert!((cosine_lr(50, 100, 5e-3, 5e-4) - 2.75e-3).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..=40).map(|s| cosine_lr(s, 40, 1.0, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_first_step_matches_hand_reference() {
        use crate::nn::ParamStore;
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(0.3), true);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig::default();
        let (lr, g) = (1e-2, 0.7);
        adamw_step(&mut s, &[(id, Tensor::scalar(g))], &mut st, lr, &cfg).unwrap();
        // Hand-stepped: bias-corrected moments are g and g^2 after one step.
        let m = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let want = 0.3 * (1.0 - lr * 0.01) - lr * m / (v.sqrt() + 1e-8);
        assert!((s.value(id).item() - want).abs() < 1e-15);
        assert!((s.value(id).item() - (0.3 - lr)).abs() < 1e-4);
    }

    #[test]
    fn holdout_keeps_two_for_training() {
        let (t, h) = holdout_split(10, 0.3, 4);
        assert_eq!((t.len(), h.len()), (7, 3));
        let mut all: Vec<usize> = t.iter().chain(&h).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (t, h) = holdout_split(2, 0.9, 4);
        assert_eq!((t.len(), h.len()), (2, 0));
    }

    #[test]
    fn trailing_singleton_batch_is_dropped() {
        assert_eq!(epoch_batches(&[0, 1, 2, 3, 4], 4), 1);
        assert_eq!(epoch_batches(&[0, 1, 2, 3, 4, 5], 4), 2);
    }

    #[test]
    fn config_rejects_small_batches_and_inverted_lr() {
        let base = TrainConfig {
            model: ModelSpec::Preset("tiny".into()),
            ..TrainConfig::default()
        };
        assert!(base.validate().is_ok());
        assert!(TrainConfig {
            batch_size: 1,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_min: 1.0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { image_size: 48, ..base }.validate().is_err());
        let parsed = TrainConfig::from_json(r#"{"model": "tiny", "epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(TrainConfig::from_json(r#"{"epoch": 3}"#).is_err());
    }
}
