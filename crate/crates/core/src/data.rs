//! Tabular inputs: the validated [`Dataset`] record, CSV ingestion, centering
//! and the honest train/estimation split.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome, features and a binary policy indicator for `n` units.
///
/// Immutable once built; every constructor validates shape, finiteness and
/// the policy coding.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    outcome: DVector<f64>,
    policy: Vec<bool>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        outcome: DVector<f64>,
        policy: Vec<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        let p = features.ncols();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, found {n}")));
        }
        if p < 1 {
            return Err(Error::InvalidData("need at least one feature column".into()));
        }
        if outcome.len() != n || policy.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} outcomes and policies"),
                found: format!("{} outcomes, {} policies", outcome.len(), policy.len()),
            });
        }
        if feature_names.len() != p {
            return Err(Error::Shape {
                expected: format!("{p} feature names"),
                found: format!("{}", feature_names.len()),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % n, pos / n);
            return Err(Error::InvalidData(format!(
                "non-finite feature value at row {row}, column `{}`",
                feature_names[col]
            )));
        }
        if let Some(row) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at row {row}")));
        }
        Ok(Self {
            features,
            outcome,
            policy,
            feature_names,
        })
    }

    /// Builds a dataset with generated names `x1..xp`.
    pub fn from_parts(features: DMatrix<f64>, outcome: DVector<f64>, policy: Vec<bool>) -> Result<Self> {
        let names = (1..=features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, outcome, policy, names)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn policy(&self) -> &[bool] {
        &self.policy
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_treated(&self) -> usize {
        self.policy.iter().filter(|&&t| t).count()
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices);
        let outcome = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.outcome[i]));
        let policy = indices.iter().map(|&i| self.policy[i]).collect();
        Self::new(features, outcome, policy, self.feature_names.clone())
    }

    /// Same units, different feature columns (e.g. target component scores).
    pub fn with_features(&self, features: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        Self::new(features, self.outcome.clone(), self.policy.clone(), names)
    }
}

/// Converts a 0/1 coded column to booleans, rejecting anything else.
pub fn policy_from_values(values: &[f64]) -> Result<Vec<bool>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::InvalidData(format!("policy value {v} at row {i} is not 0 or 1")))
            }
        })
        .collect()
}

/// Column means (and standard deviations) removed by [`center`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringStats {
    pub feature_means: Vec<f64>,
    pub outcome_mean: f64,
    /// Sample standard deviations (`n - 1` denominator) of the raw features.
    pub std_devs: Vec<f64>,
    /// Whether features were divided by `std_devs`.
    pub scaled: bool,
}

impl CenteringStats {
    fn divisor(&self, j: usize) -> f64 {
        if self.scaled {
            self.std_devs[j]
        } else {
            1.0
        }
    }

    /// Applies the stored centering (and scaling) to new rows.
    pub fn apply(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.feature_means.len();
        if features.ncols() != p {
            return Err(Error::Shape {
                expected: format!("{p} columns"),
                found: format!("{} columns", features.ncols()),
            });
        }
        let mut out = features.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_means[j], self.divisor(j));
            col.apply(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    /// Inverse of [`CenteringStats::apply`].
    pub fn restore(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = features.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_means[j], self.divisor(j));
            col.apply(|v| *v = *v * s + m);
        }
        out
    }

    pub fn restore_outcome(&self, outcome: &DVector<f64>) -> DVector<f64> {
        outcome.add_scalar(self.outcome_mean)
    }
}

/// Centers every feature column and the outcome; optionally scales features
/// to unit sample standard deviation.
pub fn center(dataset: &Dataset, scale: bool) -> Result<(Dataset, CenteringStats)> {
    let n = dataset.n();
    if n < 2 {
        return Err(Error::Precondition("centering needs n >= 2".into()));
    }
    let x = dataset.features();
    let mut feature_means = Vec::with_capacity(dataset.p());
    let mut std_devs = Vec::with_capacity(dataset.p());
    for (j, col) in x.column_iter().enumerate() {
        let m = col.mean();
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if scale && !(sd > 0.0) {
            return Err(Error::DegenerateColumn(dataset.feature_names()[j].clone()));
        }
        feature_means.push(m);
        std_devs.push(sd);
    }
    let stats = CenteringStats {
        feature_means,
        outcome_mean: dataset.outcome().mean(),
        std_devs,
        scaled: scale,
    };
    let features = stats.apply(x)?;
    let outcome = dataset.outcome().add_scalar(-stats.outcome_mean);
    let centered = Dataset::new(
        features,
        outcome,
        dataset.policy().to_vec(),
        dataset.feature_names().to_vec(),
    )?;
    Ok((centered, stats))
}

/// Disjoint training and estimation halves used for honest estimation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HonestSplit {
    pub train: Vec<usize>,
    pub estimation: Vec<usize>,
}

impl HonestSplit {
    /// Arm-stratified random split of `0..policy.len()`. Both halves receive
    /// at least one treated and one control unit; `train_fraction = 0.5`
    /// gives halves whose sizes differ by at most one.
    pub fn stratified<R: Rng + ?Sized>(policy: &[bool], train_fraction: f64, rng: &mut R) -> Result<Self> {
        let n = policy.len();
        if n < 4 {
            return Err(Error::Precondition(format!("honest split needs n >= 4, found {n}")));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Precondition(format!(
                "train fraction must lie in (0, 1), found {train_fraction}"
            )));
        }
        let mut treated: Vec<usize> = (0..n).filter(|&i| policy[i]).collect();
        let mut control: Vec<usize> = (0..n).filter(|&i| !policy[i]).collect();
        let (nt, nc) = (treated.len(), control.len());
        if nt < 2 || nc < 2 {
            return Err(Error::SplitInfeasible(format!(
                "each arm needs two units to appear on both sides ({nt} treated, {nc} control)"
            )));
        }
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(2, n - 2);
        let target = nt as f64 * n_train as f64 / n as f64;
        let mut t_train = target.floor() as usize;
        if rng.random::<f64>() < target - target.floor() {
            t_train += 1;
        }
        let lo = 1.max(n_train.saturating_sub(nc - 1));
        let hi = (nt - 1).min(n_train - 1);
        if lo > hi {
            return Err(Error::SplitInfeasible(format!(
                "cannot place both arms in a training half of {n_train}"
            )));
        }
        let t_train = t_train.clamp(lo, hi);
        let c_train = n_train - t_train;

        treated.shuffle(rng);
        control.shuffle(rng);
        let mut train: Vec<usize> = treated[..t_train].iter().chain(&control[..c_train]).copied().collect();
        let mut estimation: Vec<usize> = treated[t_train..].iter().chain(&control[c_train..]).copied().collect();
        train.sort_unstable();
        estimation.sort_unstable();
        Ok(Self { train, estimation })
    }
}

/// Deterministic 50/50 honest split of a dataset.
pub fn honest_split(dataset: &Dataset, seed: u64) -> Result<HonestSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HonestSplit::stratified(dataset.policy(), 0.5, &mut rng)
}

/// Which columns become features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureSelection {
    Names(Vec<String>),
    Keyword(FeatureKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKeyword {
    /// Every column not used as outcome, policy or filter.
    Rest,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection::Keyword(FeatureKeyword::Rest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTransform {
    #[default]
    Identity,
    /// `ln(max(v, 1))`.
    LogFloorOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    /// Comma if the header line contains one, otherwise whitespace.
    #[default]
    Auto,
    Comma,
    Whitespace,
}

/// Column-role mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub outcome: String,
    pub policy: String,
    #[serde(default)]
    pub features: FeatureSelection,
    /// `column=value` entries. Entries on the same column are alternatives;
    /// entries on different columns must all hold.
    #[serde(default)]
    pub filter: Vec<String>,
    /// When set, a unit is treated iff its policy column equals this value.
    /// Otherwise the policy column must be coded 0/1.
    #[serde(default)]
    pub treated_value: Option<f64>,
    #[serde(default)]
    pub outcome_transform: OutcomeTransform,
    #[serde(default)]
    pub delimiter: Delimiter,
}

/// Claimant characteristics of the Pennsylvania reemployment bonus file.
pub const PENN_FEATURES: [&str; 20] = [
    "abdt", "female", "black", "hispanic", "othrace", "dep", "q1", "q2", "q3", "q4", "q5", "q6", "recall", "agelt35",
    "agegt54", "durable", "nondurable", "lusd", "husd", "muld",
];

impl Schema {
    /// Control group against treatment group 4, log unemployment duration.
    pub fn penn() -> Self {
        Self {
            outcome: "inuidur1".into(),
            policy: "tg".into(),
            features: FeatureSelection::Names(PENN_FEATURES.iter().map(|s| s.to_string()).collect()),
            filter: vec!["tg=0".into(), "tg=4".into()],
            treated_value: Some(4.0),
            outcome_transform: OutcomeTransform::LogFloorOne,
            delimiter: Delimiter::Auto,
        }
    }
}

/// Warnings raised while loading.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadWarning {
    DroppedConstantColumn(String),
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<LoadWarning>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Loaded> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, schema)
}

fn split_table(text: &str, delimiter: Delimiter) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let header_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let comma = match delimiter {
        Delimiter::Comma => true,
        Delimiter::Whitespace => false,
        Delimiter::Auto => header_line.contains(','),
    };
    if comma {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record?.iter().map(str::to_string).collect());
        }
        Ok((header, rows))
    } else {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .unwrap_or_default();
        let rows = lines.map(|l| l.split_whitespace().map(str::to_string).collect()).collect();
        Ok((header, rows))
    }
}

fn parse_cell(value: &str, row: usize, column: &str) -> Result<f64> {
    match value.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            row,
            column: column.to_string(),
            value: value.to_string(),
        }),
    }
}

/// Parses an in-memory table under `schema`. Rows are numbered from 1
/// (the first data row after the header).
pub fn parse_table(text: &str, schema: &Schema) -> Result<Loaded> {
    let (header, rows) = split_table(text, schema.delimiter)?;
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };

    let mut filters: Vec<(usize, Vec<String>)> = Vec::new();
    for entry in &schema.filter {
        let (col, value) = entry
            .split_once('=')
            .ok_or_else(|| Error::Schema(format!("filter `{entry}` is not of the form column=value")))?;
        let c = lookup(col.trim())?;
        match filters.iter_mut().find(|(fc, _)| *fc == c) {
            Some((_, values)) => values.push(value.trim().to_string()),
            None => filters.push((c, vec![value.trim().to_string()])),
        }
    }
    let outcome_col = lookup(&schema.outcome)?;
    let policy_col = lookup(&schema.policy)?;
    let feature_names: Vec<String> = match &schema.features {
        FeatureSelection::Names(names) => names.clone(),
        FeatureSelection::Keyword(FeatureKeyword::Rest) => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != outcome_col && *i != policy_col && !filters.iter().any(|(c, _)| c == i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if feature_names.is_empty() {
        return Err(Error::Schema("schema selects no feature columns".into()));
    }
    let feature_cols = feature_names.iter().map(|f| lookup(f)).collect::<Result<Vec<_>>>()?;

    let mut outcome = Vec::new();
    let mut policy = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); feature_cols.len()];
    for (r, row) in rows.iter().enumerate() {
        let row_no = r + 1;
        if row.len() != header.len() {
            return Err(Error::Schema(format!(
                "row {row_no} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        let keep = filters.iter().all(|(c, values)| {
            values.iter().any(|v| {
                let cell = row[*c].trim();
                cell == v || matches!((cell.parse::<f64>(), v.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
            })
        });
        if !keep {
            continue;
        }
        let y = parse_cell(&row[outcome_col], row_no, &schema.outcome)?;
        let y = match schema.outcome_transform {
            OutcomeTransform::Identity => y,
            OutcomeTransform::LogFloorOne => y.max(1.0).ln(),
        };
        let pv = parse_cell(&row[policy_col], row_no, &schema.policy)?;
        let treated = match schema.treated_value {
            Some(t) => pv == t,
            None if pv == 0.0 => false,
            None if pv == 1.0 => true,
            None => {
                return Err(Error::Parse {
                    row: row_no,
                    column: schema.policy.clone(),
                    value: row[policy_col].clone(),
                })
            }
        };
        for (k, &c) in feature_cols.iter().enumerate() {
            columns[k].push(parse_cell(&row[c], row_no, &feature_names[k])?);
        }
        outcome.push(y);
        policy.push(treated);
    }
    if outcome.is_empty() {
        return Err(Error::EmptyData(if schema.filter.is_empty() {
            "(no data rows)".into()
        } else {
            format!("with {:?}", schema.filter)
        }));
    }

    let mut warnings = Vec::new();
    let mut kept_names = Vec::new();
    let mut kept = Vec::new();
    for (name, col) in feature_names.into_iter().zip(columns) {
        if col.iter().all(|&v| v == col[0]) {
            warn!("dropping constant feature column `{name}`");
            warnings.push(LoadWarning::DroppedConstantColumn(name));
        } else {
            kept_names.push(name);
            kept.push(col);
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidData("every selected feature column is constant".into()));
    }
    let n = outcome.len();
    let features = DMatrix::from_fn(n, kept.len(), |i, j| kept[j][i]);
    let dataset = Dataset::new(features, DVector::from_vec(outcome), policy, kept_names)?;
    Ok(Loaded { dataset, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn schema_ypx() -> Schema {
        Schema {
            outcome: "y".into(),
            policy: "p".into(),
            features: FeatureSelection::default(),
            filter: vec![],
            treated_value: None,
            outcome_transform: OutcomeTransform::Identity,
            delimiter: Delimiter::Auto,
        }
    }

    #[test]
    fn loads_three_row_csv() {
        let loaded = parse_table("y,p,x1\n1,0,5\n2,1,6\n3,0,7\n", &schema_ypx()).unwrap();
        let d = loaded.dataset;
        assert_eq!((d.n(), d.p()), (3, 1));
        assert_eq!(d.outcome().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(d.policy(), &[false, true, false]);
        assert_eq!(d.features().column(0).as_slice(), &[5.0, 6.0, 7.0]);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn na_cell_is_a_parse_error() {
        let err = parse_table("y,p,x1\n1,0,5\n2,1,NA\n", &schema_ypx()).unwrap_err();
        match err {
            Error::Parse { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "x1", "NA"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse_table("y,q,x1\n1,0,5\n", &schema_ypx()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn filtering_everything_is_empty_data() {
        let mut schema = schema_ypx();
        schema.filter = vec!["x1=9".into()];
        schema.features = FeatureSelection::Names(vec!["x1".into()]);
        let err = parse_table("y,p,x1\n1,0,5\n2,1,6\n", &schema).unwrap_err();
        assert!(matches!(err, Error::EmptyData(_)));
    }

    #[test]
    fn constant_columns_are_dropped_with_warning() {
        let loaded = parse_table("y,p,x1,x2\n1,0,5,1\n2,1,6,1\n3,0,7,1\n", &schema_ypx()).unwrap();
        assert_eq!(loaded.dataset.feature_names(), &["x1".to_string()]);
        assert_eq!(loaded.warnings, vec![LoadWarning::DroppedConstantColumn("x2".into())]);
    }

    #[test]
    fn penn_preset_filters_groups_and_logs_duration() {
        let mut text = String::from("abdt tg inuidur1 inuidur2");
        for f in &PENN_FEATURES[1..] {
            text.push(' ');
            text.push_str(f);
        }
        text.push('\n');
        let rows = [(0, 10.0), (4, 0.0), (2, 5.0), (4, 20.0), (0, 1.0)];
        for (r, (tg, dur)) in rows.iter().enumerate() {
            text.push_str(&format!("{} {tg} {dur} {dur}", 10000 + r));
            for k in 1..PENN_FEATURES.len() {
                text.push_str(&format!(" {}", (r + k) % 2));
            }
            text.push('\n');
        }
        let loaded = parse_table(&text, &Schema::penn()).unwrap();
        let d = loaded.dataset;
        assert_eq!(d.n(), 4);
        assert_eq!(d.policy(), &[false, true, true, false]);
        let y = d.outcome();
        assert!((y[0] - 10f64.ln()).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 20f64.ln()).abs() < 1e-15);
        assert_eq!(d.p(), 20);
        assert_eq!(d.feature_names()[0], "abdt");
    }

    #[test]
    fn center_small_column() {
        let d = Dataset::from_parts(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            DVector::from_vec(vec![1.0, 1.0, 4.0]),
            vec![true, false, true],
        )
        .unwrap();
        let (c, stats) = center(&d, false).unwrap();
        assert_eq!(c.features().column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(stats.feature_means, vec![2.0]);
        assert_eq!(stats.outcome_mean, 2.0);
    }

    #[test]
    fn scaling_constant_column_fails() {
        let d = Dataset::from_parts(DMatrix::zeros(3, 1), DVector::from_vec(vec![1.0, 2.0, 3.0]), vec![true, false, true])
            .unwrap();
        assert!(matches!(center(&d, true), Err(Error::DegenerateColumn(name)) if name == "x1"));
    }

    #[test]
    fn centered_gaussian_means_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(100, 4, |_, j| 5.0 * j as f64 + rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(100, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = Dataset::from_parts(x, y, (0..100).map(|i| i % 2 == 0).collect()).unwrap();
        let (c, _) = center(&d, true).unwrap();
        for col in c.features().column_iter() {
            // recomputed independently of the transform
            let m: f64 = col.iter().sum::<f64>() / 100.0;
            assert!(m.abs() < 1e-10);
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 99.0).sqrt();
            assert!((sd - 1.0).abs() < 1e-12);
        }
        assert!(c.outcome().mean().abs() < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, f64::NAN]);
        assert!(Dataset::from_parts(x, DVector::zeros(2), vec![true, false]).is_err());
        assert!(policy_from_values(&[0.0, 2.0]).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let d = Dataset::from_parts(DMatrix::from_fn(10, 1, |i, _| i as f64), DVector::zeros(10), (0..10).map(|i| i % 3 == 0).collect())
            .unwrap();
        assert_eq!(honest_split(&d, 7).unwrap(), honest_split(&d, 7).unwrap());
    }

    #[test]
    fn four_units_two_arms() {
        let d = Dataset::from_parts(DMatrix::from_fn(4, 1, |i, _| i as f64), DVector::zeros(4), vec![true, true, false, false]).unwrap();
        // Feasible 2/2 splits are exactly those pairing one treated with one control.
        for seed in 0..20 {
            let s = honest_split(&d, seed).unwrap();
            for half in [&s.train, &s.estimation] {
                assert_eq!(half.len(), 2);
                assert_eq!(half.iter().filter(|&&i| i < 2).count(), 1);
            }
        }
    }

    #[test]
    fn three_units_is_precondition_error() {
        let d = Dataset::from_parts(DMatrix::from_fn(3, 1, |i, _| i as f64), DVector::zeros(3), vec![true, false, true]).unwrap();
        assert!(matches!(honest_split(&d, 1), Err(Error::Precondition(_))));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 5usize..1000, seed in any::<u64>(), frac in 0.2f64..0.8) {
            let policy: Vec<bool> = (0..n).map(|i| (i * 7 + 3) % 5 < 2).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = HonestSplit::stratified(&policy, 0.5, &mut rng).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.estimation).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(s.train.len().abs_diff(s.estimation.len()) <= 1);
            for half in [&s.train, &s.estimation] {
                prop_assert!(half.iter().any(|&i| policy[i]));
                prop_assert!(half.iter().any(|&i| !policy[i]));
            }
            if n >= 20 {
                let s = HonestSplit::stratified(&policy, frac, &mut rng).unwrap();
                prop_assert_eq!(s.train.len() + s.estimation.len(), n);
            }
        }

        #[test]
        fn center_round_trip(seed in any::<u64>(), n in 2usize..50, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1e3..1e3));
            let d = Dataset::from_parts(x.clone(), DVector::zeros(n), vec![false; n]).unwrap();
            let (c, stats) = center(&d, false).unwrap();
            let back = stats.restore(c.features());
            let rel = (&back - &x).norm() / x.norm().max(1e-300);
            prop_assert!(rel < 1e-12);
        }

        #[test]
        fn malformed_tables_never_yield_non_finite(cells in proptest::collection::vec("[0-9a-zA-Z.eE+-]{0,4}", 9)) {
            let text = format!("y,p,x1\n{},{},{}\n{},{},{}\n{},{},{}\n",
                cells[0], cells[1], cells[2], cells[3], cells[4], cells[5], cells[6], cells[7], cells[8]);
            if let Ok(loaded) = parse_table(&text, &schema_ypx()) {
                prop_assert!(loaded.dataset.features().iter().all(|v| v.is_finite()));
                prop_assert!(loaded.dataset.outcome().iter().all(|v| v.is_finite()));
            }
        }
    }
}
