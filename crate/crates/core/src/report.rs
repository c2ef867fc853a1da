//! Vigintile effect reports and effect-point tables.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::EffectEstimate;
use crate::stats;

/// Percentiles reported within each vigintile, in percent.
pub const PERCENTILES: [f64; 5] = [2.5, 25.0, 50.0, 75.0, 97.5];

/// Number of bins.
pub const VIGINTILES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VigintileRow {
    /// 1 to 20.
    pub vigintile: usize,
    pub score_low: f64,
    pub score_high: f64,
    pub count: usize,
    /// Effect percentiles in the order of [`PERCENTILES`]; `None` for an
    /// empty bin.
    pub percentiles: Vec<Option<f64>>,
}

impl VigintileRow {
    /// `p97.5 - p2.5`.
    pub fn spread(&self) -> Option<f64> {
        match (self.percentiles.first(), self.percentiles.last()) {
            (Some(Some(lo)), Some(Some(hi))) => Some(hi - lo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VigintileReport {
    /// 1-based component number.
    pub component_index: usize,
    pub boundaries: Vec<f64>,
    pub rows: Vec<VigintileRow>,
    /// Bins holding fewer than two points.
    pub sparse_bins: Vec<usize>,
}

/// Bin of `score` given the 19 inner boundaries: one plus the number of
/// boundaries strictly below it, so scores on a boundary fall in the lower
/// bin.
pub fn vigintile_of(score: f64, boundaries: &[f64]) -> usize {
    1 + boundaries.partition_point(|&b| b < score)
}

/// Groups points into vigintiles of `scores` (type-7 quantiles) and
/// summarizes `effects` within each.
pub fn build_vigintile_report(scores: &[f64], effects: &[f64], component_index: usize) -> Result<VigintileReport> {
    let n = scores.len();
    if effects.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} effects"),
            found: effects.len().to_string(),
        });
    }
    if n < 2 * VIGINTILES {
        return Err(Error::Precondition(format!("vigintile report needs at least 40 points, found {n}")));
    }
    if scores.iter().chain(effects).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite score or effect".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let boundaries: Vec<f64> = (1..VIGINTILES)
        .map(|k| stats::quantile_sorted(&sorted, k as f64 / VIGINTILES as f64))
        .collect();
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); VIGINTILES];
    for (&s, &e) in scores.iter().zip(effects) {
        bins[vigintile_of(s, &boundaries) - 1].push(e);
    }
    let mut sparse_bins = Vec::new();
    let rows = bins
        .into_iter()
        .enumerate()
        .map(|(k, mut values)| {
            if values.len() < 2 {
                sparse_bins.push(k + 1);
                log::warn!("vigintile {} of component {component_index} holds {} point(s)", k + 1, values.len());
            }
            values.sort_by(f64::total_cmp);
            let percentiles = PERCENTILES
                .iter()
                .map(|p| (!values.is_empty()).then(|| stats::quantile_sorted(&values, p / 100.0)))
                .collect();
            VigintileRow {
                vigintile: k + 1,
                score_low: if k == 0 { sorted[0] } else { boundaries[k - 1] },
                score_high: if k + 1 == VIGINTILES { sorted[n - 1] } else { boundaries[k] },
                count: values.len(),
                percentiles,
            }
        })
        .collect();
    Ok(VigintileReport {
        component_index,
        boundaries,
        rows,
        sparse_bins,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl VigintileReport {
    pub fn first_spread(&self) -> Option<f64> {
        self.rows.first().and_then(VigintileRow::spread)
    }

    pub fn last_spread(&self) -> Option<f64> {
        self.rows.last().and_then(VigintileRow::spread)
    }

    /// Columns: `vigintile, score_low, score_high, count, p2_5, p25, p50,
    /// p75, p97_5, spread, spread_pct` (the spread times 100).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(VIGINTILE_COLUMNS)?;
        for row in &self.rows {
            let mut rec = vec![
                row.vigintile.to_string(),
                row.score_low.to_string(),
                row.score_high.to_string(),
                row.count.to_string(),
            ];
            rec.extend(row.percentiles.iter().map(|p| opt(*p)));
            rec.push(opt(row.spread()));
            rec.push(opt(row.spread().map(|s| 100.0 * s)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("vigintiles.csv", e))?;
        Ok(())
    }
}

pub const VIGINTILE_COLUMNS: [&str; 11] = [
    "vigintile", "score_low", "score_high", "count", "p2_5", "p25", "p50", "p75", "p97_5", "spread", "spread_pct",
];

/// One row per test point: `point, score1..scoreq, effect, variance,
/// ci_low, ci_high`.
pub fn write_effects_csv<W: std::io::Write>(out: W, rows: &[usize], scores: &DMatrix<f64>, estimates: &[EffectEstimate]) -> Result<()> {
    if scores.nrows() != estimates.len() || rows.len() != estimates.len() {
        return Err(Error::Shape {
            expected: format!("{} score rows and point ids", estimates.len()),
            found: format!("{} and {}", scores.nrows(), rows.len()),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["point".to_string()];
    header.extend((1..=scores.ncols()).map(|k| format!("score{k}")));
    header.extend(["effect", "variance", "ci_low", "ci_high"].map(String::from));
    w.write_record(&header)?;
    for (r, (id, est)) in rows.iter().zip(estimates).enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(scores.row(r).iter().map(|v| v.to_string()));
        rec.extend([est.point, est.variance, est.ci_low, est.ci_high].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("effects.csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forty_points_two_per_bin() {
        let s: Vec<f64> = (1..=40).map(f64::from).collect();
        let rep = build_vigintile_report(&s, &s, 1).unwrap();
        assert!(rep.rows.iter().all(|r| r.count == 2));
        assert_eq!(rep.rows[0].percentiles[2], Some(1.5));
        assert!(rep.sparse_bins.is_empty());
    }

    #[test]
    fn constant_effects_have_flat_percentiles() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let rep = build_vigintile_report(&s, &[4.0; 100], 2).unwrap();
        for row in &rep.rows {
            assert!(row.percentiles.iter().all(|p| *p == Some(4.0)));
            assert_eq!(row.spread(), Some(0.0));
        }
    }

    #[test]
    fn boundary_scores_go_low() {
        let b = [1.0, 2.0, 3.0];
        assert_eq!(vigintile_of(1.0, &b), 1);
        assert_eq!(vigintile_of(1.5, &b), 2);
        assert_eq!(vigintile_of(3.0, &b), 3);
        assert_eq!(vigintile_of(3.1, &b), 4);
    }

    #[test]
    fn tied_scores_leave_empty_bins() {
        let mut s = vec![0.0; 60];
        s.extend((0..20).map(f64::from));
        let e: Vec<f64> = (0..80).map(f64::from).collect();
        let rep = build_vigintile_report(&s, &e, 1).unwrap();
        assert_eq!(rep.rows.iter().map(|r| r.count).sum::<usize>(), 80);
        assert!(!rep.sparse_bins.is_empty());
        assert!(rep.rows.iter().any(|r| r.count == 0 && r.percentiles.iter().all(Option::is_none)));
    }

    #[test]
    fn rejects_short_input() {
        assert!(build_vigintile_report(&[0.0; 39], &[0.0; 39], 1).is_err());
    }

    proptest! {
        #[test]
        fn bins_match_sort_and_slice(m in 2usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 20 * m;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let effects: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let rep = build_vigintile_report(&scores, &effects, 1).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
            for (k, chunk) in order.chunks(m).enumerate() {
                for &i in chunk {
                    prop_assert_eq!(vigintile_of(scores[i], &rep.boundaries), k + 1);
                }
                let mut vals: Vec<f64> = chunk.iter().map(|&i| effects[i]).collect();
                vals.sort_by(f64::total_cmp);
                prop_assert_eq!(rep.rows[k].percentiles[2], Some(stats::quantile_sorted(&vals, 0.5)));
            }
        }

        #[test]
        fn rows_are_sorted_and_counts_sum(n in 40usize..400, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).floor()).collect();
            let effects: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let rep = build_vigintile_report(&scores, &effects, 1).unwrap();
            prop_assert_eq!(rep.rows.iter().map(|r| r.count).sum::<usize>(), n);
            for row in &rep.rows {
                let vals: Vec<f64> = row.percentiles.iter().flatten().copied().collect();
                prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
