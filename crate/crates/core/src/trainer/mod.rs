//! Mini-batch optimization of the fusion head and, when the backend allows
//! it, the encoder weights.

pub mod adamw;
pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EvalProtocol, ImageResolver};
use crate::encoders::load_image;
use crate::error::{Error, Result};
use crate::eval::{evaluate_detailed, AblationMode, EvalOptions, MetricsReport};
use crate::fsutil::write_atomic;
use crate::fusion::{composed_loss, l2_normalize, l2_normalize_backward, LossConfig};
use crate::model::CirModel;
use crate::pipeline::PreparedQuery;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

pub const LOSS_LOG: &str = "loss_log.ndjson";
pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Use 5e-6 / 5e-5 instead of the configured learning rates.
    pub shoes_profile: bool,
    pub batch_size: usize,
    pub tau: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fusion hidden width; the embedding dimension when unset.
    pub hidden: Option<usize>,
    pub optimizer: AdamWConfig,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-6,
            lr_head: 1e-4,
            shoes_profile: false,
            batch_size: 16,
            tau: 0.1,
            epochs: 10,
            seed: 0,
            hidden: None,
            optimizer: AdamWConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// (backbone, head) learning rates after applying the Shoes profile.
    pub fn learning_rates(&self) -> (f64, f64) {
        if self.shoes_profile {
            (5e-6, 5e-5)
        } else {
            (self.lr_backbone, self.lr_head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lb, lh) = self.learning_rates();
        if !(lh > 0.0 && lh.is_finite()) {
            return Err(Error::Config(format!("lr_head must be > 0, got {lh}")));
        }
        if !(lb >= 0.0 && lb.is_finite()) {
            return Err(Error::Config(format!("lr_backbone must be >= 0, got {lb}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Decoded inputs for one training triplet.
pub struct TrainingItem {
    pub triplet_id: String,
    pub unified_text: String,
    pub visual: RgbImage,
    pub target: RgbImage,
}

pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
}

impl TrainingSet {
    /// Decodes every visual query and target image, `jobs` threads wide.
    pub fn load(queries: &[PreparedQuery], resolver: &ImageResolver, jobs: usize) -> Result<Self> {
        let load_one = |q: &PreparedQuery| -> Result<TrainingItem> {
            let target_id = q.record.target()?;
            let target_path = resolver.resolve(target_id)?;
            Ok(TrainingItem {
                triplet_id: q.record.triplet_id.clone(),
                unified_text: q.unified_text.clone(),
                visual: load_image(&q.record.triplet_id, &q.visual_path)?,
                target: load_image(target_id, &target_path)?,
            })
        };
        let jobs = jobs.clamp(1, queries.len().max(1));
        let per = queries.len().div_ceil(jobs).max(1);
        let parts: Vec<Result<Vec<TrainingItem>>> = std::thread::scope(|s| {
            let handles: Vec<_> = queries
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(load_one).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread")).collect()
        });
        let mut items = Vec::with_capacity(queries.len());
        for p in parts {
            items.extend(p?);
        }
        if items.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Optional validation run used to pick the best epoch.
pub struct Validation<'a> {
    pub protocol: &'a EvalProtocol,
    pub queries: &'a [PreparedQuery],
    pub resolver: &'a ImageResolver,
    pub gallery: Option<&'a [String]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainLogRecord {
    epoch: usize,
    mean_loss: f64,
    wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_avg: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint (0 = initialization).
    pub selected_epoch: usize,
    pub validation: Option<MetricsReport>,
}

/// Optimizer state for one model.
pub struct Trainer {
    config: TrainConfig,
    loss: LossConfig,
    head: AdamW,
    backbone: Option<AdamW>,
}

fn normalize_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter().map(|r| l2_normalize(r)).collect()
}

impl Trainer {
    pub fn new(model: &CirModel, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let head_sizes: Vec<usize> = model.fusion.slices().iter().map(|s| s.len()).collect();
        let backbone = model
            .backend
            .backbone()
            .map(|bb| AdamW::new(config.optimizer, &bb.parameters().iter().map(|p| p.len()).collect::<Vec<_>>()));
        Ok(Self {
            config: config.clone(),
            loss: LossConfig { tau: config.tau },
            head: AdamW::new(config.optimizer, &head_sizes),
            backbone,
        })
    }

    /// Loss of the current model on a batch, without updating anything.
    pub fn batch_loss(&self, model: &CirModel, batch: &[&TrainingItem]) -> Result<f64> {
        let texts: Vec<&str> = batch.iter().map(|b| b.unified_text.as_str()).collect();
        let visuals: Vec<&RgbImage> = batch.iter().map(|b| &b.visual).collect();
        let targets: Vec<&RgbImage> = batch.iter().map(|b| &b.target).collect();
        let mut t = model.backend.encode_texts(&texts)?;
        let mut v = model.backend.encode_images(&visuals)?;
        let x = model.backend.encode_images(&targets)?;
        if model.normalize_features {
            t = normalize_rows(&t)?;
            v = normalize_rows(&v)?;
        }
        Ok(composed_loss(&model.fusion, &t, &v, &x, &self.loss)?.loss)
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self, model: &mut CirModel, batch: &[&TrainingItem]) -> Result<f64> {
        let (lr_backbone, lr_head) = self.config.learning_rates();
        let texts: Vec<&str> = batch.iter().map(|b| b.unified_text.as_str()).collect();
        let visuals: Vec<&RgbImage> = batch.iter().map(|b| &b.visual).collect();
        let targets: Vec<&RgbImage> = batch.iter().map(|b| &b.target).collect();
        let update_backbone = lr_backbone > 0.0 && self.backbone.is_some();

        let (t_raw, v_raw, x, tapes) = match model.backend.backbone() {
            Some(bb) if update_backbone => {
                let (t, tt) = bb.forward_texts(&texts)?;
                let (v, tv) = bb.forward_images(&visuals)?;
                let (x, tx) = bb.forward_images(&targets)?;
                (t, v, x, Some((tt, tv, tx)))
            }
            _ => (
                model.backend.encode_texts(&texts)?,
                model.backend.encode_images(&visuals)?,
                model.backend.encode_images(&targets)?,
                None,
            ),
        };
        let (t, v) = if model.normalize_features {
            (normalize_rows(&t_raw)?, normalize_rows(&v_raw)?)
        } else {
            (t_raw.clone(), v_raw.clone())
        };
        let out = composed_loss(&model.fusion, &t, &v, &x, &self.loss)?;
        if !out.loss.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite training loss {}", out.loss)));
        }

        if let (Some((tt, tv, tx)), Some(opt)) = (tapes, self.backbone.as_mut()) {
            let (gt, gv) = if model.normalize_features {
                (
                    t_raw.iter().zip(&out.grad_textual).map(|(r, g)| l2_normalize_backward(r, g)).collect(),
                    v_raw.iter().zip(&out.grad_visual).map(|(r, g)| l2_normalize_backward(r, g)).collect(),
                )
            } else {
                (out.grad_textual.clone(), out.grad_visual.clone())
            };
            let bb = model.backend.backbone_mut().expect("backbone present");
            let mut grads: Vec<Vec<f64>> = bb.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
            bb.backward(&tt, &gt, &mut grads);
            bb.backward(&tv, &gv, &mut grads);
            bb.backward(&tx, &out.grad_targets, &mut grads);
            let mut params = bb.parameters_mut();
            opt.step(&mut params, &grads, lr_backbone)?;
        }

        let g = out.grad_params;
        let grads: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        self.head.step(&mut model.fusion.slices_mut(), &grads, lr_head)?;
        Ok(out.loss)
    }
}

/// Triplet order for `epoch`: a seeded uniform shuffle, independent per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

fn validate_snapshot(ckpt: &Checkpoint, v: &Validation<'_>) -> Result<MetricsReport> {
    let model = ckpt.to_model()?;
    Ok(evaluate_detailed(
        v.protocol,
        AblationMode::Full,
        &model,
        v.queries,
        v.resolver,
        v.gallery,
        &EvalOptions::default(),
    )?
    .0)
}

/// Trains `model` in place and returns the selected checkpoint.
///
/// Without validation the last epoch is selected; with it, the epoch with the
/// highest validation Avg (earliest on ties). On return `model` holds exactly
/// the selected checkpoint's weights.
pub fn train(
    model: &mut CirModel,
    data: &TrainingSet,
    config: &TrainConfig,
    validation: Option<&Validation<'_>>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config)?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let log_paths = match &config.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let paths = (dir.join(LOSS_LOG), dir.join(TRAIN_LOG));
            write_atomic(&paths.0, b"")?;
            write_atomic(&paths.1, b"")?;
            Some(paths)
        }
        None => None,
    };

    let mut best = Checkpoint::from_model(model, config, 0);
    let mut best_report = match validation {
        Some(v) => Some(validate_snapshot(&best, v)?),
        None => None,
    };
    let mut selected_epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingItem> = idx.iter().map(|&i| &data.items[i]).collect();
            total += trainer.step(model, &batch)? * batch.len() as f64;
        }
        let mean_loss = total / data.len() as f64;
        log::info!("epoch {epoch}/{}: mean loss {mean_loss:.6}", config.epochs);
        epochs.push(EpochRecord { epoch, mean_loss });

        let snapshot = Checkpoint::from_model(model, config, epoch);
        let mut val_avg = None;
        match validation {
            Some(v) => {
                let report = validate_snapshot(&snapshot, v)?;
                val_avg = Some(report.average);
                if best_report.as_ref().is_none_or(|b| report.average > b.average) {
                    best = snapshot;
                    best_report = Some(report);
                    selected_epoch = epoch;
                }
            }
            None => {
                best = snapshot;
                selected_epoch = epoch;
            }
        }
        if let Some((loss_log, train_log)) = &log_paths {
            append_line(loss_log, &EpochRecord { epoch, mean_loss })?;
            append_line(
                train_log,
                &TrainLogRecord {
                    epoch,
                    mean_loss,
                    wall_time: started.elapsed().as_secs_f64(),
                    val_avg,
                },
            )?;
        }
    }

    *model = best.to_model()?;
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &best)?;
    }
    Ok(TrainOutcome {
        checkpoint: best,
        epochs,
        selected_epoch,
        validation: best_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_seeded_per_epoch() {
        assert_eq!(epoch_order(20, 3, 1), epoch_order(20, 3, 1));
        assert_ne!(epoch_order(20, 3, 1), epoch_order(20, 3, 2));
        assert_ne!(epoch_order(20, 3, 1), epoch_order(20, 4, 1));
        let mut o = epoch_order(20, 3, 5);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_backbone = TrainConfig {
            lr_backbone: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero_backbone.validate().is_ok());
        for bad in [
            TrainConfig { lr_head: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let shoes = TrainConfig {
            shoes_profile: true,
            ..TrainConfig::default()
        };
        assert_eq!(shoes.learning_rates(), (5e-6, 5e-5));
    }
}
