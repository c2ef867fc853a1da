use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share of total squared-error reduction attributed to each feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub feature_names: Vec<String>,
    pub shares: Vec<f64>,
    pub method: String,
    /// The target was constant; shares are uniform.
    pub degenerate: bool,
}

/// Growth limits for the importance tree: a node is split only if it holds
/// at least `2 k` observations, and each child keeps at least
/// `max(k, ceil(alpha * parent))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartParams {
    pub alpha: f64,
    pub k: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self { alpha: 0.2, k: 10 }
    }
}

/// Fits an unpruned CART regression tree of `target` on `features` and
/// reports normalized per-feature squared-error reductions.
pub fn regression_tree_importance(
    features: &DMatrix<f64>,
    target: &[f64],
    feature_names: &[String],
    method: &str,
    params: CartParams,
) -> Result<ImportanceReport> {
    let (n, p) = features.shape();
    if n < 20 {
        return Err(Error::Precondition(format!("importance tree needs n >= 20, found {n}")));
    }
    if target.len() != n || feature_names.len() != p {
        return Err(Error::Shape {
            expected: format!("{n} targets and {p} names"),
            found: format!("{} targets and {} names", target.len(), feature_names.len()),
        });
    }
    let mut gains = vec![0.0; p];
    let mut stack = vec![(0..n).collect::<Vec<usize>>()];
    while let Some(node) = stack.pop() {
        if node.len() < 2 * params.k {
            continue;
        }
        if let Some((j, gain, left, right)) = best_variance_split(features, target, &node, params) {
            gains[j] += gain;
            stack.push(left);
            stack.push(right);
        }
    }
    let total: f64 = gains.iter().sum();
    let (shares, degenerate) = if total > 0.0 {
        (gains.iter().map(|g| g / total).collect(), false)
    } else {
        log::warn!("importance target has no explainable variation; reporting uniform shares");
        (vec![1.0 / p as f64; p], true)
    };
    Ok(ImportanceReport {
        feature_names: feature_names.to_vec(),
        shares,
        method: method.to_string(),
        degenerate,
    })
}

/// Best admissible split by squared-error reduction
/// `n_l n_r / n (mean_l - mean_r)^2`; ties go to the lowest feature then the
/// lowest threshold. `None` when no split reduces the error.
fn best_variance_split(
    x: &DMatrix<f64>,
    target: &[f64],
    node: &[usize],
    params: CartParams,
) -> Option<(usize, f64, Vec<usize>, Vec<usize>)> {
    let m = node.len();
    let min_child = params.k.max((params.alpha * m as f64).ceil() as usize).max(1);
    if m < 2 * min_child {
        return None;
    }
    let total: f64 = node.iter().map(|&i| target[i]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = node.to_vec();
    for j in 0..x.ncols() {
        order.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
        let mut left_sum = 0.0;
        for pos in 0..m - 1 {
            left_sum += target[order[pos]];
            let nl = pos + 1;
            let nr = m - nl;
            if nl < min_child {
                continue;
            }
            if nr < min_child {
                break;
            }
            let (a, b) = (x[(order[pos], j)], x[(order[pos + 1], j)]);
            if a == b {
                continue;
            }
            let diff = left_sum / nl as f64 - (total - left_sum) / nr as f64;
            let gain = nl as f64 * nr as f64 / m as f64 * diff * diff;
            if best.is_none_or(|(_, g, _)| gain > g) {
                best = Some((j, gain, 0.5 * (a + b)));
            }
        }
    }
    let (j, gain, threshold) = best?;
    if !(gain > 0.0) {
        return None;
    }
    let (left, right): (Vec<usize>, Vec<usize>) = node.iter().partition(|&&i| x[(i, j)] <= threshold);
    Some((j, gain, left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    fn features(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn step_in_first_feature_dominates() {
        let x = features(400, 4, 1);
        let target: Vec<f64> = (0..400).map(|i| if x[(i, 0)] > 0.0 { 3.0 } else { -1.0 }).collect();
        let rep = regression_tree_importance(&x, &target, &names(4), "test", CartParams::default()).unwrap();
        assert!(rep.shares[0] > 0.9, "{:?}", rep.shares);
        assert!((rep.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_target_is_uniform_and_flagged() {
        let x = features(50, 4, 2);
        let rep = regression_tree_importance(&x, &[2.0; 50], &names(4), "test", CartParams::default()).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.shares, vec![0.25; 4]);
    }

    #[test]
    fn affine_rescaling_leaves_shares_unchanged() {
        let x = features(300, 3, 3);
        let t: Vec<f64> = (0..300).map(|i| x[(i, 0)] * x[(i, 1)] + 0.3 * x[(i, 2)]).collect();
        let scaled: Vec<f64> = t.iter().map(|v| 4.0 * v - 7.5).collect();
        let a = regression_tree_importance(&x, &t, &names(3), "a", CartParams::default()).unwrap();
        let b = regression_tree_importance(&x, &scaled, &names(3), "b", CartParams::default()).unwrap();
        for (u, v) in a.shares.iter().zip(&b.shares) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn small_samples_rejected() {
        let x = features(19, 2, 4);
        assert!(regression_tree_importance(&x, &[0.0; 19], &names(2), "t", CartParams::default()).is_err());
    }
}
