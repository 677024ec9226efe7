use std::fmt::Write;

use serde_json::Value;
use thiserror::Error;

use super::RankGroup;
use crate::error::{Error, Result};

/// First prompt line; `{N}` is replaced by the group size.
pub const PROMPT_INSTRUCTION: &str = "You are ranking ships by detention risk. For each sample, output a detention probability in [0,1]. Respond with a JSON array of {N} numbers in sample order.";

/// Tolerance outside `[0, 1]` that is clamped rather than rejected.
const CLAMP_BAND: f64 = 0.05;

/// Instruction line followed by one `S<k>: v1,v2,...` line per member,
/// values with four decimals. No trailing newline.
pub fn serialize_prompt(group: &RankGroup) -> Result<String> {
    let width = group.members.first().map_or(0, |m| m.features.len());
    let mut out = PROMPT_INSTRUCTION.replace("{N}", &group.len().to_string());
    for (k, m) in group.members.iter().enumerate() {
        if m.features.len() != width {
            return Err(Error::Shape {
                op: "serialize_prompt features",
                expected: vec![width],
                actual: vec![m.features.len()],
            });
        }
        if m.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("serialize_prompt features"));
        }
        write!(out, "\nS{:02}: ", k + 1).unwrap();
        for (j, v) in m.features.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.4}").unwrap();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParseError {
    #[error("no JSON array in response")]
    NoArray,
    #[error("expected {expected} scores, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("entry {index} is not a finite number")]
    NonNumeric { index: usize },
    #[error("entry {index} = {value} outside [-0.05, 1.05]")]
    OutOfRange { index: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedScores {
    pub scores: Vec<f64>,
    /// Some value was pulled back into `[0, 1]`.
    pub clamped: bool,
}

fn first_array(text: &str) -> Option<Vec<Value>> {
    text.match_indices('[').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Array(a))) => Some(a),
            _ => None,
        }
    })
}

/// Reads the first JSON array in `text` as `n` probabilities.
pub fn parse_response(text: &str, n: usize) -> std::result::Result<ParsedScores, ParseError> {
    let values = first_array(text).ok_or(ParseError::NoArray)?;
    if values.len() != n {
        return Err(ParseError::WrongLength {
            expected: n,
            actual: values.len(),
        });
    }
    let mut clamped = false;
    let scores = values
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let x = v.as_f64().filter(|x| x.is_finite()).ok_or(ParseError::NonNumeric { index })?;
            if !(-CLAMP_BAND..=1.0 + CLAMP_BAND).contains(&x) {
                return Err(ParseError::OutOfRange { index, value: x });
            }
            if !(0.0..=1.0).contains(&x) {
                clamped = true;
            }
            Ok(x.clamp(0.0, 1.0))
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(ParsedScores { scores, clamped })
}
