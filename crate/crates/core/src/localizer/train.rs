use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::localizer::{Detector, StepLoss, TargetConfig};
use crate::nn::Parameters;
use crate::optim::Sgd;
use crate::tensor::{Scalar, Tensor};

/// SGD fine-tuning schedule: linear warmup over the first epoch's worth of
/// mini-batches, a constant phase at `max_lr`, then a reduced phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_factor: f64,
    pub max_lr: f64,
    pub phase1_epochs: usize,
    pub phase2_lr: f64,
    pub phase2_epochs: usize,
    pub train_proposals: usize,
}

impl TrainSchedule {
    /// Full-scale fine-tuning constants.
    pub fn full() -> Self {
        Self {
            momentum: 0.8,
            weight_decay: 5e-2,
            batch_size: 8,
            warmup_factor: 1e-3,
            max_lr: 5e-2,
            phase1_epochs: 25,
            phase2_lr: 5e-3,
            phase2_epochs: 15,
            train_proposals: 1000,
        }
    }

    /// From-scratch training on the synthetic shelves.
    pub fn desk() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            warmup_factor: 1e-3,
            max_lr: 1e-2,
            phase1_epochs: 12,
            phase2_lr: 1e-3,
            phase2_epochs: 4,
            train_proposals: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.momentum, self.weight_decay, self.warmup_factor, self.max_lr, self.phase2_lr];
        if positive.iter().any(|v| !(*v > 0.0)) || self.batch_size == 0 || self.train_proposals == 0 {
            return Err(Error::invalid("training schedule values must be positive"));
        }
        if self.warmup_factor >= 1.0 {
            return Err(Error::invalid("warmup factor must be below 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    /// Warmup spans `⌈|D| / b⌉` iterations.
    pub fn warmup_iters(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch(dataset_len)
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// Learning rate at global mini-batch index `step`.
    pub fn lr_at(&self, step: usize, dataset_len: usize) -> f64 {
        let warmup = self.warmup_iters(dataset_len).max(1);
        let epoch = step / self.steps_per_epoch(dataset_len).max(1);
        if epoch >= self.phase1_epochs {
            return self.phase2_lr;
        }
        if step < warmup {
            let alpha = step as f64 / warmup as f64;
            return self.max_lr * (self.warmup_factor * (1.0 - alpha) + alpha);
        }
        self.max_lr
    }
}

/// One training image with its class-agnostic boxes.
#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub image: Tensor<f32>,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub rpn_loss: f64,
    pub roi_loss: f64,
}

#[derive(Clone, Debug)]
pub struct DetectorTraining {
    pub detector: Detector<f32>,
    pub steps: Vec<StepLog>,
    /// Mean (rpn + roi) loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl DetectorTraining {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,step,lr,rpn_loss,roi_loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:e},{},{}\n", s.epoch, s.step, s.lr, s.rpn_loss, s.roi_loss));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Mini-batch SGD over `dataset`, deterministic given `seed`.
///
/// Images without boxes are skipped with a warning. Gradients are averaged
/// over the images of each mini-batch.
pub fn train_detector(
    mut detector: Detector<f32>,
    dataset: &[DetectionSample],
    schedule: &TrainSchedule,
    targets: &TargetConfig,
    seed: u64,
) -> Result<DetectorTraining> {
    schedule.validate()?;
    let usable: Vec<&DetectionSample> = dataset
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.boxes.is_empty() {
                log::warn!("skipping training image {i}: no ground-truth boxes");
                None
            } else {
                Some(s)
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("no training image has ground-truth boxes".into()));
    }
    let targets = TargetConfig { train_proposals: schedule.train_proposals, ..targets.clone() };
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut steps = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut step = 0usize;
    for epoch in 0..schedule.total_epochs() {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let lr = schedule.lr_at(step, usable.len());
            detector.zero_grad();
            let mut acc = StepLoss::default();
            for &i in batch {
                let s = usable[i];
                let l = detector.train_step(&s.image, &s.boxes, &targets, &mut rng, None, true)?;
                acc.rpn += l.rpn;
                acc.roi += l.roi;
            }
            let n = batch.len() as f64;
            detector.scale_grads(f32::from_f64(1.0 / n));
            opt.step(&mut detector, lr);
            let (rpn_loss, roi_loss) = (acc.rpn / n, acc.roi / n);
            epoch_sum += (rpn_loss + roi_loss) * n;
            steps.push(StepLog { epoch, step, lr, rpn_loss, roi_loss });
            step += 1;
        }
        let mean = epoch_sum / usable.len() as f64;
        log::info!("detector epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(DetectorTraining { detector, steps, epoch_loss })
}
