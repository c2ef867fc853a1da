//! Honest causal trees and the subsampled forest built from them.
//!
//! A tree partitions the point space with axis-aligned splits chosen on a
//! training half and reports, for the leaf containing a query point, the
//! difference between treated and control means of a disjoint estimation
//! half. The forest averages trees grown on random size-`s` subsamples
//! drawn without replacement and quantifies uncertainty with the
//! infinitesimal jackknife (see [`CausalForest::estimate`]).

mod tree;

pub use tree::{best_split, draw_eligible, leaf_effect, CausalTree, Leaf, LeafKind, Node, ScoredSplit, SplitRule, TreeParams};

use std::path::Path;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::HonestSplit;
use crate::error::{Error, Result};

/// Fresh seeds tried per tree before a degenerate subsample is an error.
pub const MAX_TREE_ATTEMPTS: u64 = 10;

/// How large each tree's subsample is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleSize {
    /// `ceil(n^beta)`, capped at `n - 1`.
    Power(f64),
    /// A fixed size, at most `n`.
    Fixed(usize),
}

impl SubsampleSize {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match *self {
            SubsampleSize::Power(beta) => {
                if !(beta > 0.0 && beta <= 1.0) {
                    return Err(Error::Precondition(format!("beta must lie in (0, 1], found {beta}")));
                }
                Ok(((n as f64).powf(beta).ceil() as usize).min(n - 1))
            }
            SubsampleSize::Fixed(s) if s >= 4 && s <= n => Ok(s),
            SubsampleSize::Fixed(s) => Err(Error::Precondition(format!("subsample size {s} outside 4..={n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub subsample: SubsampleSize,
    pub tree: TreeParams,
    /// Share of each subsample used for choosing splits.
    pub honest_fraction: f64,
    pub seed: u64,
    /// Confidence level of reported intervals.
    pub ci_level: f64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 1000,
            subsample: SubsampleSize::Power(0.8),
            tree: TreeParams::default(),
            honest_fraction: 0.5,
            seed: 0,
            ci_level: 0.95,
        }
    }
}

impl ForestConfig {
    /// Below 100 rows, `k` is capped at 5 and `min_arm` at 2.
    pub fn for_sample_size(mut self, n: usize) -> Self {
        if n < 100 {
            self.tree.k = self.tree.k.min(5);
            self.tree.min_arm = self.tree.min_arm.min(2);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if self.trees == 0 {
            return Err(Error::Precondition("forest needs at least one tree".into()));
        }
        if !(self.honest_fraction > 0.0 && self.honest_fraction < 1.0) {
            return Err(Error::Precondition(format!(
                "honest fraction must lie in (0, 1), found {}",
                self.honest_fraction
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Precondition(format!("CI level must lie in (0, 1), found {}", self.ci_level)));
        }
        Ok(())
    }
}

/// Point estimate with jackknife variance and a normal interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The bias-corrected variance was negative and has been set to zero.
    pub clamped: bool,
}

/// Version tag written into serialized forests.
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub format_version: u32,
    pub trees: Vec<CausalTree>,
    /// Rows in the data the forest was grown on.
    pub n: usize,
    /// Dimension of the point space.
    pub q: usize,
    pub subsample_size: usize,
    pub config: ForestConfig,
}

/// Mean centered on the first value, exact when all values agree.
fn mean_of(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Deterministic generator for tree `index`, attempt `attempt`.
fn tree_rng(master: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((index as u64) << 8) | attempt);
    rng
}

impl CausalForest {
    /// Grows `config.trees` honest trees on independent subsamples. Trees
    /// are built in parallel; results are ordered by tree index and depend
    /// only on `config.seed`.
    pub fn build(points: &DMatrix<f64>, outcomes: &[f64], policy: &[bool], config: &ForestConfig) -> Result<Self> {
        config.validate()?;
        let (n, q) = points.shape();
        if outcomes.len() != n || policy.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} outcomes and policies"),
                found: format!("{} and {}", outcomes.len(), policy.len()),
            });
        }
        if n < 4 * config.tree.k {
            return Err(Error::Precondition(format!("forest needs n >= 4k = {}, found {n}", 4 * config.tree.k)));
        }
        let s = config.subsample.resolve(n)?;
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|g| Self::build_tree(points, outcomes, policy, config, s, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format_version: FOREST_FORMAT_VERSION,
            trees,
            n,
            q,
            subsample_size: s,
            config: config.clone(),
        })
    }

    fn build_tree(
        points: &DMatrix<f64>,
        outcomes: &[f64],
        policy: &[bool],
        config: &ForestConfig,
        s: usize,
        index: usize,
    ) -> Result<CausalTree> {
        let n = points.nrows();
        let mut last = None;
        for attempt in 0..MAX_TREE_ATTEMPTS {
            let mut rng = tree_rng(config.seed, index, attempt);
            let mut sub = rand::seq::index::sample(&mut rng, n, s).into_vec();
            sub.sort_unstable();
            let sub_policy: Vec<bool> = sub.iter().map(|&i| policy[i]).collect();
            let local = match HonestSplit::stratified(&sub_policy, config.honest_fraction, &mut rng) {
                Ok(h) => h,
                Err(e @ Error::SplitInfeasible(_)) => {
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let honest = HonestSplit {
                train: local.train.iter().map(|&i| sub[i]).collect(),
                estimation: local.estimation.iter().map(|&i| sub[i]).collect(),
            };
            match CausalTree::build(points, outcomes, policy, &honest, &config.tree, rng.next_u64()) {
                Ok(tree) => return Ok(tree),
                Err(e @ Error::TreeDegenerate(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::TreeDegenerate(format!(
            "tree {index} failed {MAX_TREE_ATTEMPTS} attempts: {}",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    fn check_point(&self, point: &[f64]) {
        assert_eq!(point.len(), self.q, "query point has {} coordinates, forest expects {}", point.len(), self.q);
    }

    /// Per-tree estimates at `point`.
    pub fn tree_predictions(&self, point: &[f64]) -> Vec<f64> {
        self.check_point(point);
        self.trees.iter().map(|t| t.predict(point)).collect()
    }

    /// Mean of the tree estimates at `point`.
    pub fn predict(&self, point: &[f64]) -> f64 {
        mean_of(&self.tree_predictions(point))
    }

    /// Predictions for every row of `points`.
    pub fn predict_rows(&self, points: &DMatrix<f64>) -> Vec<f64> {
        (0..points.nrows())
            .into_par_iter()
            .map(|r| {
                let p: Vec<f64> = points.row(r).iter().copied().collect();
                self.predict(&p)
            })
            .collect()
    }

    /// Point estimate, infinitesimal-jackknife variance and normal interval.
    ///
    /// With `N_ig` the inclusion indicator of row `i` in tree `g`'s
    /// subsample and `t_g` the tree estimates, the raw estimate is
    /// `sum_i Cov_g(N_ig, t_g)^2`. Its Monte Carlo bias
    /// `sum_i Var_g(N_ig) Var_g(t_g) / B` is subtracted (for bootstrap
    /// weights this is the familiar `n / B^2 sum_g (t_g - mean)^2`), and the
    /// result is scaled by `(n - 1) / n * (n / (n - s))^2` to account for
    /// subsampling without replacement. Negative values are clamped to zero
    /// and flagged.
    pub fn estimate(&self, point: &[f64]) -> EffectEstimate {
        let preds = self.tree_predictions(point);
        let b = preds.len() as f64;
        let mean = mean_of(&preds);
        let mut acc = vec![0.0; self.n];
        let mut count = vec![0u32; self.n];
        for (tree, t) in self.trees.iter().zip(&preds) {
            let d = t - mean;
            for &i in tree.honest.train.iter().chain(&tree.honest.estimation) {
                acc[i] += d;
                count[i] += 1;
            }
        }
        let raw: f64 = acc.iter().map(|a| (a / b) * (a / b)).sum();
        let var_t = preds.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / b;
        let var_n: f64 = count
            .iter()
            .map(|&c| {
                let m = c as f64 / b;
                m * (1.0 - m)
            })
            .sum();
        let bias = var_n * var_t / b;
        let (n, s) = (self.n as f64, self.subsample_size as f64);
        let factor = if s < n { (n - 1.0) / n * (n / (n - s)).powi(2) } else { 1.0 };
        let corrected = factor * (raw - bias);
        let (variance, clamped) = if corrected >= 0.0 { (corrected, false) } else { (0.0, true) };
        let z = Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(0.5 + 0.5 * self.config.ci_level);
        let half = z * variance.sqrt();
        EffectEstimate {
            point: mean,
            variance,
            ci_low: mean - half,
            ci_high: mean + half,
            clamped,
        }
    }

    /// [`CausalForest::estimate`] for every row of `points`.
    pub fn estimate_rows(&self, points: &DMatrix<f64>) -> Vec<EffectEstimate> {
        (0..points.nrows())
            .into_par_iter()
            .map(|r| {
                let p: Vec<f64> = points.row(r).iter().copied().collect();
                self.estimate(&p)
            })
            .collect()
    }

    /// Number of times row `i` appears in tree `g`'s subsample (0 or 1).
    pub fn inclusion_count(&self, i: usize, g: usize) -> u32 {
        let h = &self.trees[g].honest;
        (h.train.binary_search(&i).is_ok() || h.estimation.binary_search(&i).is_ok()) as u32
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: Self = serde_json::from_str(text)?;
        if forest.format_version != FOREST_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "forest format version {} is not supported (expected {FOREST_FORMAT_VERSION})",
                forest.format_version
            )));
        }
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
