use std::fs;
use std::path::Path;

use serde::Serialize;

use super::prompt::serialize_prompt;
use super::RankGroup;
use crate::error::{Error, Result};

const DETAINED_GOLD: (f64, f64) = (0.90, 0.95);
const REGULAR_GOLD: (f64, f64) = (0.05, 0.80);

fn spaced(range: (f64, f64), k: usize, count: usize) -> f64 {
    if count <= 1 {
        return range.1;
    }
    range.0 + (range.1 - range.0) * k as f64 / (count - 1) as f64
}

/// Target scores in member order: detained members take `[0.90, 0.95]`,
/// regulars are spread evenly over `[0.05, 0.80]`, each class ordered by
/// DSRAE score (ties by id).
pub fn gold_scores(group: &RankGroup) -> Result<Vec<f64>> {
    let mut det = Vec::new();
    let mut reg = Vec::new();
    for (i, m) in group.members.iter().enumerate() {
        let score = m
            .dsrae_score
            .ok_or_else(|| Error::Group(format!("member {} has no DSRAE score", m.id)))?;
        match m.label {
            Some(true) => det.push((score, i)),
            Some(false) => reg.push((score, i)),
            None => return Err(Error::Group(format!("member {} has no label", m.id))),
        }
    }
    let by_score = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then_with(|| group.members[a.1].id.cmp(&group.members[b.1].id))
    };
    det.sort_by(by_score);
    reg.sort_by(by_score);
    let mut gold = vec![0.0; group.len()];
    for (k, &(_, i)) in det.iter().enumerate() {
        gold[i] = spaced(DETAINED_GOLD, k, det.len());
    }
    for (k, &(_, i)) in reg.iter().enumerate() {
        gold[i] = spaced(REGULAR_GOLD, k, reg.len());
    }
    Ok(gold)
}

#[derive(Serialize)]
struct SftLine<'a> {
    prompt: &'a str,
    completion: &'a str,
}

/// One JSON object per group and line: `{"prompt": ..., "completion": "[...]"}`.
pub fn sft_lines(groups: &[RankGroup]) -> Result<String> {
    let mut out = String::new();
    for g in groups {
        let prompt = serialize_prompt(g)?;
        let completion = serde_json::to_string(&gold_scores(g)?)?;
        out.push_str(&serde_json::to_string(&SftLine {
            prompt: &prompt,
            completion: &completion,
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn export_sft_jsonl(groups: &[RankGroup], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, sft_lines(groups)?)?;
    Ok(())
}
