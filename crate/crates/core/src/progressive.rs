//! Staged training over datasets of increasing detention prevalence.
//!
//! Each phase downsamples the regular class of the training set to its
//! target prevalence, trains for a fixed number of epochs at the phase
//! learning rate, writes a checkpoint, and hands the reloaded checkpoint to
//! the next phase.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{downsample_regular, max_detained_for};
use crate::dsrae::{
    load_checkpoint, save_checkpoint, score_samples, train_epoch, Architecture, Hyper, Mode, ModelParams, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, roc_auc};
use crate::scalar::Scalar;
use crate::schema::NormStats;

pub const DEFAULT_RHOS: [f64; 6] = [0.0179, 0.0558, 0.1237, 0.2437, 0.3675, 0.50];
pub const DEFAULT_EPOCHS: [usize; 6] = [5; 6];
pub const DEFAULT_LRS: [f64; 6] = [1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-6];
pub const NUM_PHASES: usize = 6;
pub const TOTAL_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// 1-based.
    pub index: usize,
    pub rho: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

/// Optional replacements for the default schedule (accepted as JSON).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub rho: Option<Vec<f64>>,
    pub epochs: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

fn phase_seed(base: u64, index: usize) -> u64 {
    // Odd-constant spread so neighbouring phases get unrelated streams.
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn build_schedule(overrides: &ScheduleOverrides) -> Result<PhaseSchedule> {
    let rho = overrides.rho.clone().unwrap_or_else(|| DEFAULT_RHOS.to_vec());
    let epochs = overrides.epochs.clone().unwrap_or_else(|| DEFAULT_EPOCHS.to_vec());
    let lr = overrides.lr.clone().unwrap_or_else(|| DEFAULT_LRS.to_vec());
    let seed = overrides.seed.unwrap_or(0);
    for (name, len) in [("rho", rho.len()), ("epochs", epochs.len()), ("lr", lr.len())] {
        if len != NUM_PHASES {
            return Err(Error::Schedule(format!("{name} has {len} entries, need {NUM_PHASES}")));
        }
    }
    let schedule = PhaseSchedule {
        phases: (0..NUM_PHASES)
            .map(|k| Phase {
                index: k + 1,
                rho: rho[k],
                epochs: epochs[k],
                lr: lr[k],
                seed: phase_seed(seed, k + 1),
            })
            .collect(),
    };
    schedule.validate()?;
    Ok(schedule)
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.len() != NUM_PHASES {
            return Err(Error::Schedule(format!("{} phases, need {NUM_PHASES}", self.phases.len())));
        }
        for (k, p) in self.phases.iter().enumerate() {
            if p.index != k + 1 {
                return Err(Error::Schedule(format!("phase {} listed at position {}", p.index, k + 1)));
            }
            if !(p.rho > 0.0 && p.rho <= 1.0) {
                return Err(Error::Schedule(format!("phase {}: rho {} not in (0, 1]", p.index, p.rho)));
            }
            if !(p.lr >= 0.0 && p.lr.is_finite()) {
                return Err(Error::Schedule(format!("phase {}: lr {} invalid", p.index, p.lr)));
            }
            if p.epochs == 0 {
                return Err(Error::Schedule(format!("phase {}: zero epochs", p.index)));
            }
        }
        for w in self.phases.windows(2) {
            if w[1].rho <= w[0].rho {
                return Err(Error::Schedule(format!(
                    "rho must strictly increase: phase {} has {} after {}",
                    w[1].index, w[1].rho, w[0].rho
                )));
            }
            if w[1].lr > w[0].lr {
                return Err(Error::Schedule(format!(
                    "lr must not increase: phase {} has {} after {}",
                    w[1].index, w[1].lr, w[0].lr
                )));
            }
        }
        let total: usize = self.phases.iter().map(|p| p.epochs).sum();
        if total != TOTAL_EPOCHS {
            return Err(Error::Schedule(format!("epochs sum to {total}, need {TOTAL_EPOCHS}")));
        }
        Ok(())
    }

    pub fn min_rho(&self) -> f64 {
        self.phases[0].rho
    }
}

/// Everything `train` needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub hyper: Hyper,
    pub mode: Mode,
    pub schedule: ScheduleOverrides,
    pub seed: u64,
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub const DEFAULT_BATCH_SIZE: usize = 64;

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(Self::DEFAULT_BATCH_SIZE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub index: usize,
    pub checkpoint: PathBuf,
    pub rho: f64,
    pub n_detained: usize,
    pub n_regular: usize,
    pub epochs: Vec<EpochRecord>,
}

impl PhaseResult {
    pub fn final_val_auc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_auc)
    }

    pub fn final_val_ap(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_ap)
    }
}

/// Validation AP and AUC of `params`; `None` when the set is empty or
/// single-class.
pub fn validation_metrics<T: Scalar>(params: &ModelParams<T>, val: &[Sample<T>]) -> Result<(Option<f64>, Option<f64>)> {
    let labels: Vec<bool> = val.iter().map(|s| s.detained).collect();
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Ok((None, None));
    }
    let scores: Vec<f64> = score_samples(params, val)?.into_iter().map(|s| s.score).collect();
    Ok((Some(average_precision(&scores, &labels)?), Some(roc_auc(&scores, &labels)?)))
}

/// Trains one phase starting from `params_in` and writes `checkpoint`.
/// A failed phase leaves earlier checkpoints untouched.
pub fn run_phase<T: Scalar>(
    params_in: &ModelParams<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    phase: &Phase,
    batch_size: usize,
    checkpoint: &Path,
) -> Result<(ModelParams<T>, PhaseResult)> {
    let data = downsample_regular(train, phase.rho, phase.seed)?;
    let n_detained = data.iter().filter(|s| s.detained).count();
    let mut params = params_in.clone();
    let mut epochs = Vec::with_capacity(phase.epochs);
    for e in 0..phase.epochs {
        let seed = phase_seed(phase.seed, e + 1) ^ 0xE90C;
        let stats = train_epoch(&mut params, &data, phase.lr, batch_size, seed)?;
        let (val_ap, val_auc) = validation_metrics(&params, val)?;
        info!(
            "phase {} epoch {}: loss {:.5} val_ap {:?} val_auc {:?}",
            phase.index,
            e + 1,
            stats.mean_loss,
            val_ap,
            val_auc
        );
        epochs.push(EpochRecord {
            epoch: e + 1,
            loss: stats.mean_loss,
            val_ap,
            val_auc,
        });
    }
    save_checkpoint(&params, checkpoint)?;
    Ok((
        params,
        PhaseResult {
            index: phase.index,
            checkpoint: checkpoint.to_path_buf(),
            rho: phase.rho,
            n_detained,
            n_regular: data.len() - n_detained,
            epochs,
        },
    ))
}

/// Drops detained samples (uniformly, order kept) until every phase
/// prevalence of `schedule` is reachable by downsampling regulars.
pub fn cap_detained<T: Clone>(train: &[Sample<T>], schedule: &PhaseSchedule, seed: u64) -> Vec<Sample<T>> {
    let n_det = train.iter().filter(|s| s.detained).count();
    let cap = max_detained_for(train.len() - n_det, schedule.min_rho());
    if n_det <= cap {
        return train.to_vec();
    }
    warn!("capping detained training samples from {n_det} to {cap} so phase 1 prevalence is reachable");
    let mut det: Vec<usize> = (0..train.len()).filter(|&i| train[i].detained).collect();
    det.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = vec![true; train.len()];
    for &i in &det[cap..] {
        keep[i] = false;
    }
    train.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect()
}

pub fn metrics_csv(results: &[PhaseResult]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from("phase,epoch,loss,val_ap,val_auc\n");
    for r in results {
        for e in &r.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", r.index, e.epoch, e.loss, opt(e.val_ap), opt(e.val_auc)));
        }
    }
    out
}

/// Runs all phases in order from a fresh initialization, writing
/// `phase{k}.ckpt` and `metrics.csv` into `out_dir`. Each phase starts from
/// the reloaded checkpoint of the previous one.
pub fn run_all<T: Scalar>(
    train: &[Sample<T>],
    val: &[Sample<T>],
    schedule: &PhaseSchedule,
    config: &TrainConfig,
    norm: Option<NormStats>,
    out_dir: &Path,
) -> Result<(ModelParams<T>, Vec<PhaseResult>)> {
    schedule.validate()?;
    fs::create_dir_all(out_dir)?;
    let train = cap_detained(train, schedule, phase_seed(config.seed, 0));
    let mut params = ModelParams::<T>::init(&config.arch, &config.hyper, config.mode, config.seed)?;
    params.norm = norm;
    let mut results = Vec::with_capacity(schedule.phases.len());
    for phase in &schedule.phases {
        let path = out_dir.join(format!("phase{}.ckpt", phase.index));
        let (_, result) = run_phase(&params, &train, val, phase, config.batch_size(), &path)?;
        params = load_checkpoint(&path)?;
        results.push(result);
    }
    let mut f = fs::File::create(out_dir.join("metrics.csv"))?;
    f.write_all(metrics_csv(&results).as_bytes())?;
    Ok((params, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = build_schedule(&ScheduleOverrides::default()).unwrap();
        assert_eq!(s.phases[2].rho, 0.1237);
        assert_eq!(s.phases.iter().map(|p| p.epochs).sum::<usize>(), 30);
        assert_eq!(s.phases[5].lr, 1e-6);
    }

    #[test]
    fn invalid_overrides_rejected() {
        let mut rho = DEFAULT_RHOS.to_vec();
        rho[3] = 0.1;
        let err = build_schedule(&ScheduleOverrides {
            rho: Some(rho),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("strictly increase"));
        let lr = vec![1e-5, 1e-4, 1e-4, 1e-5, 1e-5, 1e-6];
        assert!(build_schedule(&ScheduleOverrides {
            lr: Some(lr),
            ..Default::default()
        })
        .is_err());
        assert!(build_schedule(&ScheduleOverrides {
            epochs: Some(vec![5; 5]),
            ..Default::default()
        })
        .is_err());
        assert!(build_schedule(&ScheduleOverrides {
            epochs: Some(vec![6; 6]),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn overrides_parse_from_json() {
        let o: ScheduleOverrides = serde_json::from_str(r#"{"seed": 4, "epochs": [10, 4, 4, 4, 4, 4]}"#).unwrap();
        let s = build_schedule(&o).unwrap();
        assert_eq!(s.phases[0].epochs, 10);
        assert!(serde_json::from_str::<ScheduleOverrides>(r#"{"phases": 3}"#).is_err());
    }
}
