//! Synthetic PSC-like datasets, label-preserving downsampling and CSV I/O.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{History, Labeled, Particulars, PscRecord, Split};

/// Share of the latent history factor common to all shifted attributes.
const HISTORY_FACTOR_LOADING: f64 = 0.6;

const LABEL_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test_global: f64,
    pub test_regional: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.2,
            test_global: 0.05,
            test_regional: 0.05,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [(Split, f64); 4] {
        [
            (Split::Train, self.train),
            (Split::Val, self.val),
            (Split::TestGlobal, self.test_global),
            (Split::TestRegional, self.test_regional),
        ]
    }
}

/// Generator settings. `separability` is the class mean shift, in standard
/// deviations, applied to the latent drivers of the history attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_total: usize,
    pub detention_rate: f64,
    pub separability: f64,
    pub seed: u64,
    #[serde(default)]
    pub split_fractions: SplitFractions,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(Error::invalid("n_total", "must be positive"));
        }
        if !(self.detention_rate > 0.0 && self.detention_rate < 1.0) {
            return Err(Error::invalid(
                "detention_rate",
                format!("{} not in (0, 1)", self.detention_rate),
            ));
        }
        if !(self.separability.is_finite() && self.separability >= 0.0) {
            return Err(Error::invalid(
                "separability",
                format!("{} must be finite and nonnegative", self.separability),
            ));
        }
        let fractions = self.split_fractions.as_array();
        if fractions.iter().any(|(_, f)| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("split_fractions", "fractions must be nonnegative"));
        }
        let sum: f64 = fractions.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split_fractions", format!("sum {sum} != 1")));
        }
        Ok(())
    }

    pub fn detained_count(&self) -> usize {
        (self.n_total as f64 * self.detention_rate).round() as usize
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `n_total` records with exactly `round(n_total·ρ)` detained.
///
/// Every record draws from its own ChaCha stream (indexed by record
/// position), so the output does not depend on the number of worker threads.
pub fn generate_dataset(spec: &GenSpec) -> Result<Vec<PscRecord>> {
    spec.validate()?;
    let n = spec.n_total;
    let n_det = spec.detained_count();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, LABEL_STREAM));
    let mut detained = vec![false; n];
    for &i in &order[..n_det] {
        detained[i] = true;
    }
    let splits = assign_splits(&detained, &spec.split_fractions, spec.seed);

    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let shift = if detained[i] { spec.separability } else { 0.0 };
            PscRecord {
                id: format!("PSC{i:07}"),
                particulars: sample_particulars(&mut rng),
                history: sample_history(&mut rng, shift),
                detained: detained[i],
                split: splits[i],
            }
        })
        .collect();
    Ok(records)
}

/// Stratified split assignment: each class is shuffled and cut by the
/// fractions, with remainders going to the largest fractional parts.
fn assign_splits(detained: &[bool], fractions: &SplitFractions, seed: u64) -> Vec<Split> {
    let mut rng = stream_rng(seed, SPLIT_STREAM);
    let mut splits = vec![Split::Train; detained.len()];
    for class in [false, true] {
        let mut members: Vec<usize> = (0..detained.len()).filter(|&i| detained[i] == class).collect();
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fractions);
        let mut cursor = 0;
        for (split, count) in counts {
            for &i in &members[cursor..cursor + count] {
                splits[i] = split;
            }
            cursor += count;
        }
    }
    splits
}

fn apportion(n: usize, fractions: &SplitFractions) -> Vec<(Split, usize)> {
    let parts = fractions.as_array();
    let mut counts: Vec<(Split, usize, f64)> = parts
        .iter()
        .map(|&(s, f)| {
            let exact = f * n as f64;
            (s, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
    for &k in by_remainder.iter().take(n.saturating_sub(assigned)) {
        counts[k].1 += 1;
    }
    counts.into_iter().map(|(s, c, _)| (s, c)).collect()
}

fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k as u8;
        }
    }
    (weights.len() - 1) as u8
}

fn sample_particulars(rng: &mut ChaCha8Rng) -> Particulars {
    let z: f64 = StandardNormal.sample(rng);
    let log_tonnage = 15_000f64.ln() + 0.9 * z;
    Particulars {
        ship_tonnage: log_tonnage.exp().round(),
        flag_performance: categorical(rng, &[0.55, 0.25, 0.12, 0.08]),
        recognized_organization: categorical(rng, &[0.6, 0.2, 0.12, 0.08]),
        company_performance: categorical(rng, &[0.3, 0.35, 0.2, 0.15]),
        classification_society_number: rng.random_range(0..=3),
        ship_type: rng.random_range(0..12),
        ship_age: (rng.random_range(0.0..35.0f64) * 10.0).round() / 10.0,
    }
}

fn sample_history(rng: &mut ChaCha8Rng, shift: f64) -> History {
    let common: f64 = StandardNormal.sample(rng);
    let idio = (1.0 - HISTORY_FACTOR_LOADING * HISTORY_FACTOR_LOADING).sqrt();
    let mut driver = || {
        let e: f64 = StandardNormal.sample(rng);
        HISTORY_FACTOR_LOADING * common + idio * e + shift
    };
    let (g_last, g_avg, g_max, g_prob, g_total) = (driver(), driver(), driver(), driver(), driver());
    let count = |mean: f64, scale: f64, g: f64| (mean + scale * g).max(0.0).round() as u32;
    let max_def_36m = count(4.0, 2.5, g_max);
    History {
        last_deficiency_number: count(3.0, 2.5, g_last),
        interval_days: rng.random_range(30..=900),
        last_inspection_state: u8::from(rng.random_bool(0.25)),
        avg_def_36m: ((2.5 + 1.5 * g_avg).max(0.0) * 100.0).round() / 100.0,
        max_def_36m,
        prob_def_36m: 1.0 / (1.0 + (0.3 - g_prob).exp()),
        total_def_36m: max_def_36m + count(5.0, 4.0, g_total),
    }
}

/// Number of regulars kept so that detained make up `rho` of the result,
/// rounded half away from zero.
pub fn regular_count_for(n_det: usize, rho: f64) -> usize {
    (n_det as f64 * (1.0 - rho) / rho).round() as usize
}

/// Keeps every detained record and a uniform sample (without replacement)
/// of `round(n_det·(1−ρ)/ρ)` regulars. Input order is preserved.
pub fn downsample_regular<R: Labeled + Clone>(records: &[R], target_rho: f64, seed: u64) -> Result<Vec<R>> {
    if !(target_rho > 0.0 && target_rho <= 1.0) {
        return Err(Error::invalid("target_rho", format!("{target_rho} not in (0, 1]")));
    }
    let n_det = records.iter().filter(|r| r.is_detained()).count();
    if n_det == 0 {
        return Err(Error::InsufficientDetained {
            required: 1,
            available: 0,
        });
    }
    let regulars: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_detained()).collect();
    let required = regular_count_for(n_det, target_rho);
    if required > regulars.len() {
        return Err(Error::InsufficientRegulars {
            required,
            available: regulars.len(),
        });
    }
    let keep = choose_subset(&regulars, required, seed);
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.is_detained() || keep[*i])
        .map(|(_, r)| r.clone())
        .collect())
}

/// Detained records kept when capping a set so that `rho` is reachable by
/// downsampling regulars: the largest `n` with `round(n(1−ρ)/ρ) ≤ n_reg`.
pub fn max_detained_for(n_reg: usize, rho: f64) -> usize {
    let mut n = (n_reg as f64 * rho / (1.0 - rho)).floor() as usize + 1;
    while n > 0 && regular_count_for(n, rho) > n_reg {
        n -= 1;
    }
    n
}

/// Resamples to prevalence `rho` by dropping whichever class is in excess:
/// regulars via [`downsample_regular`], or detained (keeping all regulars).
pub fn resample_to_prevalence<R: Labeled + Clone>(records: &[R], rho: f64, seed: u64) -> Result<Vec<R>> {
    let n_det = records.iter().filter(|r| r.is_detained()).count();
    let n_reg = records.len() - n_det;
    if regular_count_for(n_det, rho) <= n_reg {
        return downsample_regular(records, rho, seed);
    }
    let keep_det = max_detained_for(n_reg, rho);
    let detained: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_detained()).collect();
    let keep = choose_subset(&detained, keep_det, seed);
    let capped: Vec<R> = records
        .iter()
        .enumerate()
        .filter(|(i, r)| !r.is_detained() || keep[*i])
        .map(|(_, r)| r.clone())
        .collect();
    downsample_regular(&capped, rho, seed)
}

/// Marks a uniform `count`-subset of `candidates` (indices into a slice of
/// length `max(candidates) + 1` or more).
fn choose_subset(candidates: &[usize], count: usize, seed: u64) -> Vec<bool> {
    let len = candidates.iter().max().map_or(0, |m| m + 1);
    let mut shuffled = candidates.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = vec![false; len];
    for &i in &shuffled[..count] {
        keep[i] = true;
    }
    keep
}

pub const CSV_HEADER: [&str; 17] = [
    "id",
    "ship_tonnage",
    "flag_performance",
    "recognized_organization",
    "company_performance",
    "classification_society_number",
    "ship_type",
    "ship_age",
    "last_deficiency_number",
    "interval_days",
    "last_inspection_state",
    "avg_def_36m",
    "max_def_36m",
    "prob_def_36m",
    "total_def_36m",
    "detained",
    "split",
];

fn csv_err(line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Csv {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

fn from_csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => csv_err(line, "", format!("{kind:?}")),
    }
}

pub fn write_csv_to<W: Write>(records: &[PscRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(from_csv_error)?;
    for r in records {
        let p = &r.particulars;
        let h = &r.history;
        // `Display` for f64 is the shortest string that parses back to the same bits.
        w.write_record([
            r.id.clone(),
            p.ship_tonnage.to_string(),
            p.flag_performance.to_string(),
            p.recognized_organization.to_string(),
            p.company_performance.to_string(),
            p.classification_society_number.to_string(),
            p.ship_type.to_string(),
            p.ship_age.to_string(),
            h.last_deficiency_number.to_string(),
            h.interval_days.to_string(),
            h.last_inspection_state.to_string(),
            h.avg_def_36m.to_string(),
            h.max_def_36m.to_string(),
            h.prob_def_36m.to_string(),
            h.total_def_36m.to_string(),
            u8::from(r.detained).to_string(),
            r.split.to_string(),
        ])
        .map_err(from_csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(records: &[PscRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(records, File::create(path)?)
}

struct RowParser<'a> {
    row: &'a csv::StringRecord,
    line: u64,
}

impl RowParser<'_> {
    fn field(&self, col: usize) -> &str {
        self.row.get(col).unwrap_or("")
    }

    fn parse<V: std::str::FromStr>(&self, col: usize) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.field(col)
            .parse::<V>()
            .map_err(|e| csv_err(self.line, CSV_HEADER[col], format!("`{}`: {e}", self.field(col))))
    }

    fn real(&self, col: usize) -> Result<f64> {
        let v: f64 = self.parse(col)?;
        if !v.is_finite() {
            return Err(csv_err(self.line, CSV_HEADER[col], "value is not finite"));
        }
        Ok(v)
    }
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<Vec<PscRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(from_csv_error)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(csv_err(1, "", format!("expected header `{}`", CSV_HEADER.join(","))));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(from_csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let p = RowParser { row: &row, line };
        let detained = match p.field(15) {
            "0" => false,
            "1" => true,
            other => return Err(csv_err(line, "detained", format!("`{other}` is not 0 or 1"))),
        };
        let split = p
            .field(16)
            .parse::<Split>()
            .map_err(|e| csv_err(line, "split", e))?;
        records.push(PscRecord {
            id: p.field(0).to_string(),
            particulars: Particulars {
                ship_tonnage: p.real(1)?,
                flag_performance: p.parse(2)?,
                recognized_organization: p.parse(3)?,
                company_performance: p.parse(4)?,
                classification_society_number: p.parse(5)?,
                ship_type: p.parse(6)?,
                ship_age: p.real(7)?,
            },
            history: History {
                last_deficiency_number: p.parse(8)?,
                interval_days: p.parse(9)?,
                last_inspection_state: p.parse(10)?,
                avg_def_36m: p.real(11)?,
                max_def_36m: p.parse(12)?,
                prob_def_36m: p.real(13)?,
                total_def_36m: p.parse(14)?,
            },
            detained,
            split,
        });
    }
    Ok(records)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<PscRecord>> {
    read_csv_from(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_record;

    fn spec(n_total: usize, rho: f64, delta: f64) -> GenSpec {
        GenSpec {
            n_total,
            detention_rate: rho,
            separability: delta,
            seed: 42,
            split_fractions: SplitFractions::default(),
        }
    }

    #[test]
    fn detained_count_is_exact() {
        let records = generate_dataset(&spec(1000, 0.05, 1.0)).unwrap();
        assert_eq!(records.iter().filter(|r| r.detained).count(), 50);
        assert!(records.iter().all(|r| validate_record(r).is_valid()));
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = generate_dataset(&spec(500, 0.1, 2.0)).unwrap();
        let b = generate_dataset(&spec(500, 0.1, 2.0)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_csv_to(&a, &mut ba).unwrap();
        write_csv_to(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn generation_is_independent_of_thread_count() {
        let s = spec(300, 0.1, 2.0);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_dataset(&s).unwrap());
        assert_eq!(single, generate_dataset(&s).unwrap());
    }

    #[test]
    fn no_shift_means_no_class_difference() {
        // Oracle: two-sample z statistic on prob_def_36m.
        let records = generate_dataset(&spec(10_000, 0.3, 0.0)).unwrap();
        let stats = |det: bool| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.detained == det)
                .map(|r| r.history.prob_def_36m)
                .collect();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var / n)
        };
        let ((m1, se1), (m0, se0)) = (stats(true), stats(false));
        assert!((m1 - m0).abs() < 3.0 * (se1 + se0).sqrt());
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut s = spec(10, 1.5, 0.0);
        assert!(generate_dataset(&s).unwrap_err().to_string().contains("detention_rate"));
        s.detention_rate = 0.5;
        s.split_fractions.val = 0.5;
        assert!(generate_dataset(&s).unwrap_err().to_string().contains("split_fractions"));
        s.split_fractions = SplitFractions::default();
        s.n_total = 0;
        assert!(generate_dataset(&s).unwrap_err().to_string().contains("n_total"));
    }

    #[test]
    fn splits_follow_fractions_per_class() {
        let records = generate_dataset(&spec(2000, 0.05, 1.0)).unwrap();
        let count = |split: Split, det: bool| {
            records.iter().filter(|r| r.split == split && r.detained == det).count()
        };
        assert_eq!(count(Split::Train, true), 70);
        assert_eq!(count(Split::Val, true), 20);
        assert_eq!(count(Split::TestGlobal, true) + count(Split::TestRegional, true), 10);
        assert_eq!(count(Split::Train, false), 1330);
    }

    fn labeled(n_det: usize, n_reg: usize) -> Vec<PscRecord> {
        (0..n_det + n_reg)
            .map(|i| {
                let mut r = PscRecord::zeroed(format!("r{i}"));
                r.detained = i < n_det;
                r
            })
            .collect()
    }

    #[test]
    fn downsample_hand_cases() {
        assert_eq!(regular_count_for(100, 0.50), 100);
        assert_eq!(regular_count_for(100, 0.0558), 1692);
        assert_eq!(regular_count_for(100, 0.0179), 5487);

        let recs = labeled(100, 6000);
        assert_eq!(recs.iter().filter(|r| r.detained).count(), 100);
        let out = downsample_regular(&recs, 0.0558, 3).unwrap();
        assert_eq!(out.iter().filter(|r| r.detained).count(), 100);
        assert_eq!(out.len(), 100 + 1692);
        assert_eq!(out, downsample_regular(&recs, 0.0558, 3).unwrap());
    }

    #[test]
    fn downsample_errors() {
        let recs = labeled(100, 1000);
        assert!(matches!(
            downsample_regular(&recs, 0.0179, 1),
            Err(Error::InsufficientRegulars { required: 5487, available: 1000 })
        ));
        let none = labeled(0, 10);
        assert!(downsample_regular(&none, 0.5, 1).is_err());
    }

    #[test]
    fn detained_cap_makes_target_reachable() {
        let n = max_detained_for(13_300, 0.0179);
        assert!(regular_count_for(n, 0.0179) <= 13_300);
        assert!(regular_count_for(n + 1, 0.0179) > 13_300);
        let recs = labeled(100, 1900);
        let out = resample_to_prevalence(&recs, 0.0179, 9).unwrap();
        let det = out.iter().filter(|r| r.detained).count();
        assert_eq!(out.len() - det, regular_count_for(det, 0.0179));
        assert!(out.len() - det <= 1900);
    }

    #[test]
    fn csv_header_only_is_empty() {
        let text = format!("{}\n", CSV_HEADER.join(","));
        assert!(read_csv_from(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn csv_bad_label_reports_line_and_column() {
        let records = generate_dataset(&spec(3, 0.4, 1.0)).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[2].split(',').collect();
        fields[15] = "2";
        lines[2] = fields.join(",");
        let err = read_csv_from(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            Error::Csv { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "detained");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_rejects_wrong_header() {
        assert!(read_csv_from("a,b\n1,2\n".as_bytes()).is_err());
    }
}
