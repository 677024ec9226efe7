//! Dual robust-subspace-recovery autoencoder.
//!
//! A convolutional encoder maps the normalized 2×7 grid to a latent code
//! `d_all ∈ ℝᴰ`. Two linear subspace maps `A_reg`, `A_det` (each `d×D`,
//! applied by left multiplication) project it to `ℝᵈ`, and a decoder per
//! branch reconstructs the 14 attributes. The regular branch is supervised
//! by regular samples only, the detention branch by detained samples only;
//! a supervised contrastive margin term on dropout views separates the
//! concatenated codes of the two classes.
//!
//! In [`Mode::Rsr`] the detention branch and the margin term are absent,
//! which reduces the model to a single-branch RSR autoencoder.

mod checkpoint;
mod forward;
mod loss;
mod params;
mod score;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::fnv1a64;
pub use forward::{decode_detention, decode_regular, dsr_project, encode, Forward};
pub use loss::{
    loss_dsr, loss_dsr_grad, loss_margin, loss_margin_grad, loss_recon, loss_recon_grad, total_loss,
    DsrGrad, LossOutput, LossTerms, MarginGrad, ReconGrad,
};
pub use params::{AffineLayer, Architecture, Branch, ConvLayer, Encoder, Hyper, Mode, ModelParams};
pub use score::{detention_score, dsr_features, score_samples, SampleScore};
pub use train::{stratified_batches, train_epoch, EpochStats};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::schema::{apply_normalizer, encode_record, Labeled, NormStats, PscRecord, GRID_COLS, GRID_ROWS};

/// A normalized model input with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<T> {
    pub id: String,
    /// `[1, 2, 7]`.
    pub grid: Tensor<T>,
    pub detained: bool,
}

impl<T: Scalar> Sample<T> {
    pub fn from_record(record: &PscRecord, stats: &NormStats) -> Result<Self> {
        let grid = apply_normalizer(&encode_record(record)?, stats);
        let data = grid.flat().iter().map(|&v| T::lit(v)).collect();
        Ok(Sample {
            id: record.id.clone(),
            grid: Tensor::from_vec(&[1, GRID_ROWS, GRID_COLS], data)?,
            detained: record.detained,
        })
    }

    pub fn from_records(records: &[PscRecord], stats: &NormStats) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::from_record(r, stats)).collect()
    }
}

impl<T> Labeled for Sample<T> {
    fn is_detained(&self) -> bool {
        self.detained
    }
}

/// Deterministic 64-bit mixing (splitmix64 finalizer) used to derive
/// per-sample seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
