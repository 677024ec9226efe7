use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::Forward;
use super::params::ModelParams;
use super::Sample;
use crate::error::Result;
use crate::numerics::l2_norm;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub re_reg: f64,
    /// `None` in RSR mode.
    pub re_det: Option<f64>,
    /// In `[0, 1]`; higher means more likely detained.
    pub score: f64,
}

impl SampleScore {
    pub(crate) fn from_errors(id: String, re_reg: f64, re_det: Option<f64>) -> Self {
        let score = match re_det {
            Some(re_det) if re_reg + re_det > 0.0 => re_reg / (re_reg + re_det),
            Some(_) => 0.5,
            None => re_reg / (1.0 + re_reg),
        };
        SampleScore { id, re_reg, re_det, score }
    }
}

/// Scores one sample from its two reconstruction errors:
/// `re_reg / (re_reg + re_det)`, or `re_reg / (1 + re_reg)` in RSR mode.
pub fn detention_score<T: Scalar>(params: &ModelParams<T>, sample: &Sample<T>) -> Result<SampleScore> {
    let f = Forward::run(params, &sample.grid)?;
    let re_reg = l2_norm(&sample.grid.sub(f.recon_reg())).as_f64();
    let re_det = f.recon_det().map(|r| l2_norm(&sample.grid.sub(r)).as_f64());
    Ok(SampleScore::from_errors(sample.id.clone(), re_reg, re_det))
}

/// Concatenated subspace codes `d̃_reg ‖ d̃_det` (just `d̃_reg` in RSR
/// mode).
pub fn dsr_features<T: Scalar>(params: &ModelParams<T>, sample: &Sample<T>) -> Result<Vec<f64>> {
    let f = Forward::run(params, &sample.grid)?;
    let mut out: Vec<f64> = f.code_reg.data().iter().map(|v| v.as_f64()).collect();
    if let Some(code) = &f.code_det {
        out.extend(code.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Scores every sample in parallel; output order follows input order.
pub fn score_samples<T: Scalar>(params: &ModelParams<T>, samples: &[Sample<T>]) -> Result<Vec<SampleScore>> {
    samples.par_iter().map(|s| detention_score(params, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_formula_cases() {
        assert_eq!(SampleScore::from_errors("a".into(), 2.0, Some(2.0)).score, 0.5);
        assert_eq!(SampleScore::from_errors("a".into(), 0.0, Some(3.0)).score, 0.0);
        assert_eq!(SampleScore::from_errors("a".into(), 0.0, Some(0.0)).score, 0.5);
        assert_eq!(SampleScore::from_errors("a".into(), 1.0, None).score, 0.5);
        assert_eq!(SampleScore::from_errors("a".into(), 3.0, Some(1.0)).score, 0.75);
    }
}
