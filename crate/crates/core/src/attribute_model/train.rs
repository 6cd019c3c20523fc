//! Minimizing the soft-label distortion loss over the selected parameters.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::DistortionModel;
use super::probs::check_simplex;
use crate::datagen::{ground_truth_matrix, ManifestRecord};
use crate::digest::sha256_parts;
use crate::diffcore::{Adam, CosineSchedule, Grads, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{DistortionType, Image, RandomStream};
use crate::metrics::StrengthMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub max_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Random rotations/reflections of each training image.
    #[serde(default)]
    pub augment: bool,
    /// Side of a random square training crop; 0 keeps the whole image.
    #[serde(default)]
    pub crop: usize,
}

impl TrainSchedule {
    /// Cosine schedule for prompt tuning: 100 epochs, 20 warmup, peak 0.002.
    pub fn prompt_tuning() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 20,
            max_lr: 0.002,
            min_lr: 0.0,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            augment: false,
            crop: 0,
        }
    }

    /// Whole-encoder fine-tuning of a pretrained model: 5 epochs at 5e-5.
    pub fn full_finetune() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 1,
            max_lr: 5e-5,
            min_lr: 0.0,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            augment: false,
            crop: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.max_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.max_lr {
            return Err(Error::Config(format!("bad learning rates {} / {}", self.max_lr, self.min_lr)));
        }
        Ok(())
    }

    pub fn cosine(&self, samples: usize) -> CosineSchedule {
        let per_epoch = samples.div_ceil(self.batch_size);
        CosineSchedule {
            max_lr: self.max_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs * per_epoch,
            total_steps: self.epochs * per_epoch,
        }
    }
}

/// Images at encoder resolution with their strength targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    /// One row per image, one column per distortion of the model.
    pub targets: StrengthMatrix,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads the images of `records` (paths relative to `root`), resized to
    /// `size`, with targets over `distortions`.
    pub fn from_records(
        records: &[ManifestRecord],
        root: &Path,
        distortions: &[DistortionType],
        size: usize,
    ) -> Result<Self> {
        let images = records
            .par_iter()
            .map(|r| load_at(&root.join(&r.output_path), size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: records.iter().map(ManifestRecord::id).collect(),
            images,
            targets: ground_truth_matrix(records, distortions)?,
        })
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            images: rows.iter().map(|&i| self.images[i].clone()).collect(),
            targets: self.targets.select_rows(rows),
        }
    }
}

pub fn load_at(path: &Path, size: usize) -> Result<Image> {
    let img = Image::load_png(path)?;
    if img.height() == size && img.width() == size {
        Ok(img)
    } else {
        img.center_crop_resize(size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Label-preserving random view of a training image, a pure function of
/// `(seed, epoch, index)`.
pub fn augmented_view(img: &Image, schedule: &TrainSchedule, epoch: usize, index: usize) -> Result<Image> {
    if !schedule.augment && schedule.crop == 0 {
        return Ok(img.clone());
    }
    let key = sha256_parts([
        b"attriqa/augment".as_slice(),
        &schedule.seed.to_le_bytes(),
        &(epoch as u64).to_le_bytes(),
        &(index as u64).to_le_bytes(),
    ]);
    let mut rng = RandomStream::from_seed(key);
    let mut view = if schedule.augment {
        img.dihedral(rng.gen_range(0..8u8))
    } else {
        img.clone()
    };
    let c = schedule.crop;
    if c > 0 && (c < view.height() || c < view.width()) {
        let top = rng.gen_range(0..=view.height().saturating_sub(c));
        let left = rng.gen_range(0..=view.width().saturating_sub(c));
        view = view.crop(top, left, c.min(view.height()), c.min(view.width()))?;
    }
    Ok(view)
}

/// Loss and parameter gradients of one image.
fn sample_gradient(model: &DistortionModel, img: &Image, target: &[f64]) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(&model.params, Mode::Train);
    let f = model.record(&mut tape, img, false)?;
    let t = Tensor::matrix(target.len(), 1, target.to_vec())?;
    let loss = tape.bce_mean(f.dist_probs, &t)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = Grads::zeros_like(&model.params);
    tape.accumulate_param_grads(&mut grads)?;
    Ok((value, grads))
}

/// Mean loss over `data` without updating anything.
pub fn evaluate_loss(model: &DistortionModel, data: &TrainingSet) -> Result<f64> {
    let losses = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new(&model.params, Mode::Eval);
            let f = model.record(&mut tape, &data.images[i], false)?;
            let t = Tensor::matrix(data.targets.cols(), 1, data.targets.row(i).to_vec())?;
            let l = tape.bce_mean(f.dist_probs, &t)?;
            Ok(tape.value(l).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains the trainable parameters of `model` in place. `on_epoch` sees the
/// epoch index, its mean loss and the model after the epoch.
pub fn train_distortion_model(
    model: &mut DistortionModel,
    data: &TrainingSet,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(usize, f64, &DistortionModel) -> Result<()>,
) -> Result<TrainReport> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.targets.cols() != model.distortions.len() || data.targets.rows() != data.len() {
        return Err(Error::Config(format!(
            "targets are {:?} but the model has {} distortions for {} images",
            data.targets.shape(),
            model.distortions.len(),
            data.len()
        )));
    }
    let cosine = schedule.cosine(data.len());
    let mut adam = Adam::new(&model.params);
    adam.weight_decay = schedule.weight_decay;
    let mut rng = RandomStream::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let view = augmented_view(&data.images[i], schedule, epoch, i)?;
                    sample_gradient(model, &view, data.targets.row(i))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Grads::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                grads.add(g);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| data.ids[i].as_str()).collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step}; batch records: {}",
                    ids.join(", ")
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads, cosine.lr(step))?;
            total += batch_loss;
            step += 1;
            debug!("epoch {epoch} step {step} loss {:.6}", batch_loss / batch.len() as f64);
        }
        for w in model.weights() {
            check_simplex(&w)?;
        }
        let mean = total / data.len() as f64;
        info!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        on_epoch(epoch, mean, model)?;
    }
    Ok(TrainReport {
        epoch_losses,
        steps: step,
    })
}
