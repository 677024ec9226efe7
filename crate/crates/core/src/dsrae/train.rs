use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossTerms};
use super::params::{Mode, ModelParams};
use super::{mix_seed, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean batch loss and per-term means over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub recon_reg: f64,
    pub recon_det: f64,
    pub dsr_reg: f64,
    pub dsr_det: f64,
    pub margin: f64,
    pub batches: usize,
}

/// Splits sample indices into shuffled batches.
///
/// With `both_classes`, every batch gets at least one sample of each class:
/// the batch count is `min(⌈n / batch_size⌉, n_minority)` and each class is
/// dealt round-robin over the batches.
pub fn stratified_batches(labels: &[bool], batch_size: usize, seed: u64, both_classes: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("dataset", "empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    if !both_classes {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        return Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    let mut det: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut reg: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    if det.is_empty() || reg.is_empty() {
        return Err(Error::SingleClassBatch);
    }
    det.shuffle(&mut rng);
    reg.shuffle(&mut rng);
    let count = n.div_ceil(batch_size).min(det.len()).min(reg.len());
    let mut batches = vec![Vec::with_capacity(n / count + 1); count];
    for (k, &i) in det.iter().enumerate() {
        batches[k % count].push(i);
    }
    for (k, &i) in reg.iter().enumerate() {
        batches[k % count].push(i);
    }
    for b in &mut batches {
        b.shuffle(&mut rng);
    }
    Ok(batches)
}

/// One epoch of plain gradient descent (`θ ← θ − lr·∇L_batch`).
///
/// On error `params` is left untouched.
pub fn train_epoch<T: Scalar>(
    params: &mut ModelParams<T>,
    dataset: &[Sample<T>],
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<EpochStats> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid("lr", format!("{lr} must be finite and non-negative")));
    }
    let both = params.mode == Mode::Dsr && params.hyper.lambda3 > 0.0;
    let labels: Vec<bool> = dataset.iter().map(|s| s.detained).collect();
    let batches = stratified_batches(&labels, batch_size, seed, both)?;
    let mut work = params.clone();
    let step = T::lit(-lr);
    let mut sums = LossTerms::default();
    for (b, idx) in batches.iter().enumerate() {
        let batch: Vec<Sample<T>> = idx.iter().map(|&i| dataset[i].clone()).collect();
        let out = total_loss(&work, &batch, mix_seed(seed, b as u64, 0)).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(format!("non-finite loss in batch {b}")),
            other => other,
        })?;
        if lr > 0.0 {
            work.add_scaled(step, &out.grads);
            if !work.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after batch {b} (loss {})",
                    out.terms.total
                )));
            }
        }
        sums.total += out.terms.total;
        sums.recon_reg += out.terms.recon_reg;
        sums.recon_det += out.terms.recon_det;
        sums.dsr_reg += out.terms.dsr_reg;
        sums.dsr_det += out.terms.dsr_det;
        sums.margin += out.terms.margin;
    }
    *params = work;
    let k = batches.len() as f64;
    Ok(EpochStats {
        mean_loss: sums.total / k,
        recon_reg: sums.recon_reg / k,
        recon_det: sums.recon_det / k,
        dsr_reg: sums.dsr_reg / k,
        dsr_det: sums.dsr_det / k,
        margin: sums.margin / k,
        batches: batches.len(),
    })
}
