//! Inspection record schema, the two-row feature grid and z-score
//! normalization.
//!
//! Each record carries seven vessel particulars and seven inspection-history
//! attributes. [`encode_record`] lays them out as a 2×7 grid: row 0 holds the
//! particulars, row 1 the history, both in declaration order, so the
//! convolutional encoder sees related attributes as neighbours.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 2;
pub const GRID_COLS: usize = 7;
/// Number of attributes per record.
pub const NUM_FEATURES: usize = GRID_ROWS * GRID_COLS;

/// Highest ordinal band for flag / RO / company performance (0 = best).
pub const MAX_PERFORMANCE_LEVEL: u8 = 3;

pub const PARTICULAR_NAMES: [&str; GRID_COLS] = [
    "ship_tonnage",
    "flag_performance",
    "recognized_organization",
    "company_performance",
    "classification_society_number",
    "ship_type",
    "ship_age",
];

pub const HISTORY_NAMES: [&str; GRID_COLS] = [
    "last_deficiency_number",
    "interval_days",
    "last_inspection_state",
    "avg_def_36m",
    "max_def_36m",
    "prob_def_36m",
    "total_def_36m",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestGlobal,
    TestRegional,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestGlobal, Split::TestRegional];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestGlobal => "test_global",
            Split::TestRegional => "test_regional",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|split| split.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Vessel particulars (grid row 0).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Particulars {
    /// Gross tons.
    pub ship_tonnage: f64,
    pub flag_performance: u8,
    pub recognized_organization: u8,
    pub company_performance: u8,
    pub classification_society_number: u32,
    /// Categorical vessel type code.
    pub ship_type: u32,
    /// Years.
    pub ship_age: f64,
}

/// Inspection history (grid row 1).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub last_deficiency_number: u32,
    pub interval_days: u32,
    /// 0 or 1.
    pub last_inspection_state: u8,
    pub avg_def_36m: f64,
    pub max_def_36m: u32,
    pub prob_def_36m: f64,
    pub total_def_36m: u32,
}

/// One port state control inspection record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PscRecord {
    pub id: String,
    pub particulars: Particulars,
    pub history: History,
    pub detained: bool,
    pub split: Split,
}

impl PscRecord {
    /// All-zero, non-detained training record.
    pub fn zeroed(id: impl Into<String>) -> Self {
        PscRecord {
            id: id.into(),
            particulars: Particulars::default(),
            history: History::default(),
            detained: false,
            split: Split::Train,
        }
    }
}

/// Anything carrying a detention label.
pub trait Labeled {
    fn is_detained(&self) -> bool;
}

impl Labeled for PscRecord {
    fn is_detained(&self) -> bool {
        self.detained
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

/// List of invariant violations; empty means the record is valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn fields(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.field).collect()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_record(r: &PscRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    let p = &r.particulars;
    let h = &r.history;

    let mut nonneg_real = |field: &'static str, v: f64| {
        if !v.is_finite() {
            report.push(field, format!("{v} is not finite"));
        } else if v < 0.0 {
            report.push(field, format!("{v} is negative"));
        }
    };
    nonneg_real("ship_tonnage", p.ship_tonnage);
    nonneg_real("ship_age", p.ship_age);
    nonneg_real("avg_def_36m", h.avg_def_36m);

    for (field, level) in [
        ("flag_performance", p.flag_performance),
        ("recognized_organization", p.recognized_organization),
        ("company_performance", p.company_performance),
    ] {
        if level > MAX_PERFORMANCE_LEVEL {
            report.push(field, format!("{level} outside 0..={MAX_PERFORMANCE_LEVEL}"));
        }
    }
    if h.last_inspection_state > 1 {
        report.push(
            "last_inspection_state",
            format!("{} is not 0 or 1", h.last_inspection_state),
        );
    }
    if !(0.0..=1.0).contains(&h.prob_def_36m) {
        report.push("prob_def_36m", format!("{} outside [0, 1]", h.prob_def_36m));
    }
    if h.total_def_36m < h.max_def_36m {
        report.push(
            "total_def_36m",
            format!("total {} < max {}", h.total_def_36m, h.max_def_36m),
        );
    }
    report
}

/// Encoded 2×7 attribute grid (row 0 particulars, row 1 history).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub values: [[f64; GRID_COLS]; GRID_ROWS],
}

impl FeatureGrid {
    pub fn zeros() -> Self {
        FeatureGrid {
            values: [[0.0; GRID_COLS]; GRID_ROWS],
        }
    }

    /// Row-major flattening (particulars first).
    pub fn flat(&self) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for (r, row) in self.values.iter().enumerate() {
            out[r * GRID_COLS..(r + 1) * GRID_COLS].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != NUM_FEATURES {
            return Err(Error::Shape {
                op: "feature grid",
                expected: vec![GRID_ROWS, GRID_COLS],
                actual: vec![flat.len()],
            });
        }
        let mut grid = FeatureGrid::zeros();
        for (i, &v) in flat.iter().enumerate() {
            grid.values[i / GRID_COLS][i % GRID_COLS] = v;
        }
        Ok(grid)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn encode_record(r: &PscRecord) -> Result<FeatureGrid> {
    let report = validate_record(r);
    if !report.is_valid() {
        return Err(Error::InvalidRecord {
            id: r.id.clone(),
            report,
        });
    }
    let p = &r.particulars;
    let h = &r.history;
    Ok(FeatureGrid {
        values: [
            [
                p.ship_tonnage,
                f64::from(p.flag_performance),
                f64::from(p.recognized_organization),
                f64::from(p.company_performance),
                f64::from(p.classification_society_number),
                f64::from(p.ship_type),
                p.ship_age,
            ],
            [
                f64::from(h.last_deficiency_number),
                f64::from(h.interval_days),
                f64::from(h.last_inspection_state),
                h.avg_def_36m,
                f64::from(h.max_def_36m),
                h.prob_def_36m,
                f64::from(h.total_def_36m),
            ],
        ],
    })
}

/// Per-cell mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [[f64; GRID_COLS]; GRID_ROWS],
    pub std: [[f64; GRID_COLS]; GRID_ROWS],
}

pub fn fit_normalizer(grids: &[FeatureGrid]) -> Result<NormStats> {
    if grids.is_empty() {
        return Err(Error::EmptyFitSet);
    }
    let n = grids.len() as f64;
    let mut mean = [[0.0; GRID_COLS]; GRID_ROWS];
    let mut std = [[0.0; GRID_COLS]; GRID_ROWS];
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let m = grids.iter().map(|g| g.values[r][c]).sum::<f64>() / n;
            let var = grids
                .iter()
                .map(|g| (g.values[r][c] - m).powi(2))
                .sum::<f64>()
                / n;
            mean[r][c] = m;
            std[r][c] = var.sqrt();
        }
    }
    Ok(NormStats { mean, std })
}

/// Z-scores each cell; constant cells (`std == 0`) are only centered.
pub fn apply_normalizer(grid: &FeatureGrid, stats: &NormStats) -> FeatureGrid {
    let mut out = *grid;
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let centered = grid.values[r][c] - stats.mean[r][c];
            let s = stats.std[r][c];
            out.values[r][c] = if s > 0.0 { centered / s } else { centered };
        }
    }
    out
}

/// Inverse of [`apply_normalizer`].
pub fn invert_normalizer(grid: &FeatureGrid, stats: &NormStats) -> FeatureGrid {
    let mut out = *grid;
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let s = stats.std[r][c];
            let scaled = if s > 0.0 { grid.values[r][c] * s } else { grid.values[r][c] };
            out.values[r][c] = scaled + stats.mean[r][c];
        }
    }
    out
}

/// Fits normalization statistics on the train split of `records` only.
pub fn fit_on_train(records: &[PscRecord]) -> Result<NormStats> {
    let grids = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(encode_record)
        .collect::<Result<Vec<_>>>()?;
    fit_normalizer(&grids)
}
