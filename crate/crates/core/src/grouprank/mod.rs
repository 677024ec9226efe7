//! Group-of-20 ranking layer.
//!
//! Samples are bundled into groups; a backend assigns every member a
//! detention probability. At training time each group holds exactly two
//! detained samples (used for the SFT export); at inference groups are a
//! plain partition of the input.

mod prompt;
mod remote;
mod sft;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use prompt::{parse_response, serialize_prompt, ParseError, ParsedScores, PROMPT_INSTRUCTION};
pub use remote::{RemoteBackend, RemoteBackendConfig};
pub use sft::{export_sft_jsonl, gold_scores, sft_lines};

use crate::dsrae::{detention_score, dsr_features, ModelParams, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GROUP_SIZE: usize = 20;
pub const DETAINED_PER_GROUP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMember {
    pub id: String,
    /// `d̃_reg ‖ d̃_det`.
    pub features: Vec<f64>,
    pub dsrae_score: Option<f64>,
    /// Known only for training groups.
    pub label: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankGroup {
    pub members: Vec<RankMember>,
}

impl RankGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    /// One score in `[0, 1]` per member, in member order.
    pub scores: Vec<f64>,
    pub backend: String,
    pub raw_response: Option<String>,
    /// Some remote score was clamped back into `[0, 1]`.
    pub clamped: bool,
    pub attempts: usize,
}

/// Builds members carrying subspace features, DSRAE score and label.
pub fn members_from_samples<T: Scalar>(params: &ModelParams<T>, samples: &[Sample<T>]) -> Result<Vec<RankMember>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(RankMember {
                id: s.id.clone(),
                features: dsr_features(params, s)?,
                dsrae_score: Some(detention_score(params, s)?.score),
                label: Some(s.detained),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingGroups {
    pub groups: Vec<RankGroup>,
    /// Detained members that did not fit into a pair.
    pub leftover_detained: Vec<String>,
}

/// `⌊n_det/2⌋` groups of 20, each with 2 detained and 18 regular members
/// drawn without replacement; member order is shuffled within each group.
pub fn make_training_groups(members: &[RankMember], seed: u64) -> Result<TrainingGroups> {
    let mut det = Vec::new();
    let mut reg = Vec::new();
    for (i, m) in members.iter().enumerate() {
        match m.label {
            Some(true) => det.push(i),
            Some(false) => reg.push(i),
            None => return Err(Error::Group(format!("member {} has no label", m.id))),
        }
    }
    if det.len() < DETAINED_PER_GROUP {
        return Err(Error::InsufficientDetained {
            required: DETAINED_PER_GROUP,
            available: det.len(),
        });
    }
    let count = det.len() / DETAINED_PER_GROUP;
    let per_group = GROUP_SIZE - DETAINED_PER_GROUP;
    if reg.len() < count * per_group {
        return Err(Error::InsufficientRegulars {
            required: count * per_group,
            available: reg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    det.shuffle(&mut rng);
    reg.shuffle(&mut rng);
    let groups = (0..count)
        .map(|g| {
            let mut idx: Vec<usize> = det[g * DETAINED_PER_GROUP..(g + 1) * DETAINED_PER_GROUP].to_vec();
            idx.extend_from_slice(&reg[g * per_group..(g + 1) * per_group]);
            idx.shuffle(&mut rng);
            RankGroup {
                members: idx.into_iter().map(|i| members[i].clone()).collect(),
            }
        })
        .collect();
    let leftover_detained = det[count * DETAINED_PER_GROUP..].iter().map(|&i| members[i].id.clone()).collect();
    Ok(TrainingGroups {
        groups,
        leftover_detained,
    })
}

/// Shuffles by `seed` and cuts into contiguous groups of `group_size`
/// (the last may be smaller). Labels are dropped. A `group_size` of 0 is
/// treated as 1.
pub fn partition_inference(members: &[RankMember], group_size: usize, seed: u64) -> Vec<RankGroup> {
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(group_size.max(1))
        .map(|chunk| RankGroup {
            members: chunk
                .iter()
                .map(|&i| RankMember {
                    label: None,
                    ..members[i].clone()
                })
                .collect(),
        })
        .collect()
}

pub trait RankBackend: Sync {
    fn tag(&self) -> &str;

    fn rank(&self, group: &RankGroup) -> Result<RankResult>;

    /// Ranks every group; results follow input order.
    fn rank_all(&self, groups: &[RankGroup]) -> Result<Vec<RankResult>> {
        groups.iter().map(|g| self.rank(g)).collect()
    }
}

/// Passes each member's DSRAE score through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleBackend;

impl RankBackend for OracleBackend {
    fn tag(&self) -> &str {
        "oracle"
    }

    fn rank(&self, group: &RankGroup) -> Result<RankResult> {
        let scores = group
            .members
            .iter()
            .map(|m| m.dsrae_score.ok_or_else(|| Error::Group(format!("member {} has no DSRAE score", m.id))))
            .collect::<Result<_>>()?;
        Ok(RankResult {
            scores,
            backend: self.tag().to_string(),
            raw_response: None,
            clamped: false,
            attempts: 1,
        })
    }
}

/// Ranks `groups` and flattens to `(id, score)` pairs in group order.
pub fn rank_scores(backend: &dyn RankBackend, groups: &[RankGroup]) -> Result<Vec<(String, f64)>> {
    let results = backend.rank_all(groups)?;
    Ok(groups
        .iter()
        .zip(&results)
        .flat_map(|(g, r)| g.members.iter().map(|m| m.id.clone()).zip(r.scores.iter().copied()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Detained iff `score ≥ θ`.
    Fixed(f64),
    /// The top `⌈k·n⌉` scores are detained.
    Rate(f64),
}

impl ThresholdMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdMode::Fixed(t) if !(0.0..=1.0).contains(&t) => {
                Err(Error::invalid("threshold", format!("fixed θ={t} not in [0, 1]")))
            }
            ThresholdMode::Rate(k) if !(k > 0.0 && k <= 1.0) => {
                Err(Error::invalid("threshold", format!("rate k={k} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid("threshold", format!("`{s}` is not fixed:<θ> or rate:<k>")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid("threshold", format!("`{value}` is not a number")))?;
        let mode = match kind.trim() {
            "fixed" => ThresholdMode::Fixed(v),
            "rate" => ThresholdMode::Rate(v),
            other => return Err(Error::invalid("threshold", format!("unknown mode `{other}`"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdMode::Rate(k) => write!(f, "rate:{k}"),
        }
    }
}

/// Converts scores to detain/clear predictions. In rate mode ties at the
/// boundary go to the smaller id.
pub fn apply_threshold(ids: &[String], scores: &[f64], mode: ThresholdMode) -> Result<Vec<bool>> {
    mode.validate()?;
    if ids.len() != scores.len() {
        return Err(Error::Shape {
            op: "apply_threshold",
            expected: vec![ids.len()],
            actual: vec![scores.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("threshold scores"));
    }
    match mode {
        ThresholdMode::Fixed(t) => Ok(scores.iter().map(|&s| s >= t).collect()),
        ThresholdMode::Rate(k) => {
            let n = scores.len();
            let take = ((k * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
            let mut out = vec![false; n];
            for &i in order.iter().take(take.min(n)) {
                out[i] = true;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(id: usize, label: Option<bool>, score: f64) -> RankMember {
        RankMember {
            id: format!("S{id:04}"),
            features: vec![0.0; 4],
            dsrae_score: Some(score),
            label,
        }
    }

    fn labeled(n_det: usize, n_reg: usize) -> Vec<RankMember> {
        (0..n_det + n_reg).map(|i| member(i, Some(i < n_det), i as f64 / 1000.0)).collect()
    }

    #[test]
    fn hundred_detained_use_everything() {
        let g = make_training_groups(&labeled(100, 900), 1).unwrap();
        assert_eq!(g.groups.len(), 50);
        assert!(g.leftover_detained.is_empty());
        let mut ids: Vec<&str> = g.groups.iter().flat_map(|g| g.members.iter().map(|m| m.id.as_str())).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn odd_detained_leaves_one() {
        let g = make_training_groups(&labeled(3, 40), 1).unwrap();
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.leftover_detained.len(), 1);
    }

    #[test]
    fn too_few_regulars() {
        let err = make_training_groups(&labeled(4, 35), 0).unwrap_err();
        assert_eq!(err.to_string(), "insufficient regular samples: need 36, have 35");
    }

    #[test]
    fn partition_sizes() {
        let g = partition_inference(&labeled(5, 40), 20, 3);
        assert_eq!(g.iter().map(RankGroup::len).collect::<Vec<_>>(), vec![20, 20, 5]);
        assert!(g.iter().all(|g| g.members.iter().all(|m| m.label.is_none())));
        assert!(partition_inference(&[], 20, 3).is_empty());
    }

    #[test]
    fn oracle_passes_scores() {
        let group = RankGroup {
            members: vec![member(0, None, 0.9), member(1, None, 0.1)],
        };
        let r = OracleBackend.rank(&group).unwrap();
        assert_eq!(r.scores, vec![0.9, 0.1]);
        assert_eq!(OracleBackend.rank(&group).unwrap(), r);
        let mut missing = group.clone();
        missing.members[0].dsrae_score = None;
        assert!(OracleBackend.rank(&missing).is_err());
    }

    #[test]
    fn threshold_cases() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = [0.9, 0.4, 0.1];
        assert_eq!(apply_threshold(&ids, &s, ThresholdMode::Fixed(0.5)).unwrap(), vec![true, false, false]);
        assert_eq!(apply_threshold(&ids, &s, ThresholdMode::Rate(2.0 / 3.0)).unwrap(), vec![true, true, false]);
        let tied = [0.5, 0.5, 0.5];
        let rev: Vec<String> = ["c", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(apply_threshold(&rev, &tied, ThresholdMode::Rate(0.34)).unwrap(), vec![false, true, true]);
        assert_eq!(apply_threshold(&rev, &tied, ThresholdMode::Rate(0.3)).unwrap(), vec![false, false, true]);
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("rate:0.05".parse::<ThresholdMode>().unwrap(), ThresholdMode::Rate(0.05));
        assert_eq!("fixed:0.5".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(0.5));
        assert!("rate:0".parse::<ThresholdMode>().is_err());
        assert!("fixed:1.5".parse::<ThresholdMode>().is_err());
        assert!("top:3".parse::<ThresholdMode>().is_err());
        assert_eq!(ThresholdMode::Rate(0.05).to_string(), "rate:0.05");
    }
}
