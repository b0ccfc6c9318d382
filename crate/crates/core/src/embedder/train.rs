use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{augment, derive_seed, hardest_negatives, triplet_loss_grad, AugmentParams, Embedder};
use crate::error::{Error, Result};
use crate::gallery::QueryProduct;
use crate::imageio::{resize_square, rgb_to_tensor};
use crate::nn::Parameters;
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub batch_size: usize,
    /// Augmented anchors drawn per query image in every epoch.
    pub anchors_per_class: usize,
}

impl EmbedderSchedule {
    /// Full-scale fine-tuning constants.
    pub fn full() -> Self {
        Self { epochs: 15, lr: 1e-4, margin: 1.0, batch_size: 32, anchors_per_class: 16 }
    }

    /// From-scratch training on the synthetic shelves.
    pub fn desk() -> Self {
        Self { epochs: 40, lr: 1e-3, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.margin > 0.0) || self.batch_size < 2 || self.anchors_per_class == 0 {
            return Err(Error::invalid("embedder schedule needs lr > 0, margin > 0, batch >= 2, anchors >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of mined triplets with a non-zero hinge.
    pub active_triplet_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct EmbedderTraining {
    pub embedder: Embedder<f32>,
    pub epochs: Vec<EpochLog>,
}

impl EmbedderTraining {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,mean_loss,active_triplet_fraction\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.active_triplet_fraction));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Triplet training with online hard negative mining.
///
/// Each epoch pairs every query image (the positive) with
/// `anchors_per_class` augmentations of itself (the anchors). Within a
/// mini-batch each anchor's negative is the nearest other-label positive
/// under the current weights. Batches that hold a single label are skipped.
pub fn train_embedder(
    mut embedder: Embedder<f32>,
    db: &[QueryProduct],
    schedule: &EmbedderSchedule,
    aug: &AugmentParams,
    seed: u64,
) -> Result<EmbedderTraining> {
    schedule.validate()?;
    aug.validate()?;
    let mut labels: Vec<&str> = db.iter().map(|q| q.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::EmptyDataset("embedder training needs at least two classes".into()));
    }
    let size = embedder.config.input_size;
    let queries: Vec<RgbImage> = db.iter().map(|q| resize_square(&q.image, size)).collect();
    let mut opt = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut items: Vec<(usize, usize)> =
            (0..db.len()).flat_map(|c| (0..schedule.anchors_per_class).map(move |s| (c, s))).collect();
        items.shuffle(&mut rng);
        let (mut loss_sum, mut active, mut counted) = (0.0, 0usize, 0usize);
        for batch in items.chunks(schedule.batch_size) {
            let batch_labels: Vec<&str> = batch.iter().map(|&(c, _)| db[c].label.as_str()).collect();
            if batch_labels.iter().all(|l| *l == batch_labels[0]) {
                log::debug!("epoch {epoch}: skipping single-label batch");
                continue;
            }
            let mut fwd_a = Vec::with_capacity(batch.len());
            let mut fwd_p = Vec::with_capacity(batch.len());
            for &(c, s) in batch {
                let anchor = augment(&queries[c], aug, derive_seed(seed, &[epoch as u64, c as u64, s as u64]));
                fwd_a.push(embedder.forward(&rgb_to_tensor(&anchor))?);
                fwd_p.push(embedder.forward(&rgb_to_tensor(&queries[c]))?);
            }
            let xa: Vec<&[f32]> = fwd_a.iter().map(|(v, _)| v.as_slice()).collect();
            let xp: Vec<&[f32]> = fwd_p.iter().map(|(v, _)| v.as_slice()).collect();
            let neg = hardest_negatives::<f32, _, _>(&xa, &xp, &batch_labels)?;
            let n = batch.len();
            let dim = embedder.dim();
            let mut da = vec![vec![0.0f32; dim]; n];
            let mut dp = vec![vec![0.0f32; dim]; n];
            let mut batch_loss = 0.0;
            for i in 0..n {
                let (l, g) = triplet_loss_grad(xa[i], xp[i], xp[neg[i]], schedule.margin, 1.0 / n as f64);
                batch_loss += l;
                if let Some(g) = g {
                    active += 1;
                    add(&mut da[i], &g.anchor);
                    add(&mut dp[i], &g.positive);
                    add(&mut dp[neg[i]], &g.negative);
                }
            }
            loss_sum += batch_loss;
            counted += n;
            embedder.zero_grad();
            for (i, ((_, ca), (_, cp))) in fwd_a.iter().zip(&fwd_p).enumerate() {
                embedder.backward(ca, &da[i]);
                embedder.backward(cp, &dp[i]);
            }
            opt.step(&mut embedder, schedule.lr);
        }
        let (mean_loss, active_triplet_fraction) =
            if counted == 0 { (0.0, 0.0) } else { (loss_sum / counted as f64, active as f64 / counted as f64) };
        log::info!("embedder epoch {epoch}: loss {mean_loss:.4}, active {active_triplet_fraction:.3}");
        epochs.push(EpochLog { epoch, mean_loss, active_triplet_fraction });
    }
    Ok(EmbedderTraining { embedder, epochs })
}

fn add(acc: &mut [f32], g: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
