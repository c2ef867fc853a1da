use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LinearFit;
use crate::error::{Error, Result};

/// Sweeps allowed before [`lasso_fit`] gives up.
pub const MAX_SWEEPS: usize = 100_000;

/// KKT tolerance the solver iterates to (tighter than the reported 1e-6
/// contract so that `lambda = 0` agrees with least squares).
const KKT_TOLERANCE: f64 = 1e-9;

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Columns centered and divided by their population (`1/n`) standard
/// deviation, so that `x_j'x_j / n = 1` for every non-constant column.
struct Standardized {
    x: DMatrix<f64>,
    y: DVector<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    y_mean: f64,
}

impl Standardized {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n || n < 2 {
            return Err(Error::Shape {
                expected: format!("{n} >= 2 outcomes"),
                found: format!("{}", y.len()),
            });
        }
        let mut xs = x.clone();
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for mut col in xs.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
            let s = (col.norm_squared() / n as f64).sqrt();
            if s > 0.0 {
                col /= s;
            }
            means.push(m);
            scales.push(s);
        }
        let y_mean = y.mean();
        Ok(Self {
            x: xs,
            y: y.add_scalar(-y_mean),
            means,
            scales,
            y_mean,
        })
    }

    fn to_original(&self, beta: &DVector<f64>, lambda: f64) -> LinearFit {
        let coefficients: Vec<f64> = beta
            .iter()
            .zip(&self.scales)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let intercept = self.y_mean - coefficients.iter().zip(&self.means).map(|(b, m)| b * m).sum::<f64>();
        LinearFit {
            intercept,
            coefficients,
            lambda,
            jittered: false,
        }
    }
}

/// Largest violation of the LASSO optimality conditions for standardized
/// columns: `|g_j - lambda sign(b_j)|` for active coefficients and
/// `max(|g_j| - lambda, 0)` for zeros, where `g_j = x_j'r / n`.
fn kkt_violation_std(x: &DMatrix<f64>, resid: &DVector<f64>, beta: &DVector<f64>, lambda: f64, active: &[bool]) -> f64 {
    let n = x.nrows() as f64;
    let mut worst: f64 = 0.0;
    for j in 0..x.ncols() {
        if !active[j] {
            continue;
        }
        let g = x.column(j).dot(resid) / n;
        let v = if beta[j] != 0.0 {
            (g - lambda * beta[j].signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Optimality violation of a returned fit, measured on internally
/// standardized columns (the scale on which `lambda` acts).
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, fit: &LinearFit) -> Result<f64> {
    let s = Standardized::new(x, y)?;
    let beta = DVector::from_iterator(
        x.ncols(),
        fit.coefficients.iter().zip(&s.scales).map(|(b, sc)| b * sc),
    );
    let resid = &s.y - &s.x * &beta;
    let active: Vec<bool> = s.scales.iter().map(|sc| *sc > 0.0).collect();
    Ok(kkt_violation_std(&s.x, &resid, &beta, fit.lambda, &active))
}

/// Smallest penalty that zeroes every coefficient.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let s = Standardized::new(x, y)?;
    Ok((s.x.tr_mul(&s.y) / x.nrows() as f64).amax())
}

/// Cyclic coordinate descent for
/// `(1/2n) |y - b0 - X b|^2 + lambda |b|_1` on standardized columns, with
/// coefficients mapped back to the original scale. The intercept is never
/// penalized.
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<LinearFit> {
    if !(lambda >= 0.0) {
        return Err(Error::Precondition(format!("lambda must be non-negative, found {lambda}")));
    }
    let s = Standardized::new(x, y)?;
    let (n, p) = s.x.shape();
    let nf = n as f64;
    let active: Vec<bool> = s.scales.iter().map(|sc| *sc > 0.0).collect();
    let mut beta: DVector<f64> = DVector::zeros(p);
    let mut resid = s.y.clone();
    let mut violation = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if !active[j] {
                continue;
            }
            let col = s.x.column(j);
            let rho = col.dot(&resid) / nf + beta[j];
            let new = soft_threshold(rho, lambda);
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < 1e-8 || sweep % 10 == 0 {
            // Recompute the residual from scratch to avoid drift.
            resid = &s.y - &s.x * &beta;
            violation = kkt_violation_std(&s.x, &resid, &beta, lambda, &active);
            let scale = 1.0 + s.y.amax();
            if violation <= KKT_TOLERANCE * scale {
                return Ok(s.to_original(&beta, lambda));
            }
        }
    }
    Err(Error::Convergence {
        sweeps: MAX_SWEEPS,
        violation,
    })
}

/// Geometric grid of `len` penalties from `lambda_max` down to
/// `ratio * lambda_max`.
pub fn default_lambda_grid(x: &DMatrix<f64>, y: &DVector<f64>, len: usize, ratio: f64) -> Result<Vec<f64>> {
    let hi = lambda_max(x, y)?;
    if len <= 1 || hi <= 0.0 {
        return Ok(vec![hi]);
    }
    let step = ratio.ln() / (len - 1) as f64;
    Ok((0..len).map(|i| hi * (step * i as f64).exp()).collect())
}

/// Cross-validated LASSO result.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoCv {
    pub lambda: f64,
    pub fit: LinearFit,
    /// `(lambda, mean out-of-fold squared error)` for every grid value.
    pub curve: Vec<(f64, f64)>,
}

/// Chooses the grid penalty with the smallest mean out-of-fold squared
/// error (ties go to the larger penalty), then refits on all rows.
pub fn lasso_cv(x: &DMatrix<f64>, y: &DVector<f64>, folds: usize, lambda_grid: &[f64], seed: u64) -> Result<LassoCv> {
    if lambda_grid.is_empty() {
        return Err(Error::Precondition("lambda grid is empty".into()));
    }
    let n = x.nrows();
    if folds < 2 || n < folds {
        return Err(Error::Precondition(format!("need 2 <= folds <= n, found folds = {folds}, n = {n}")));
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.len() == 1 {
        let fit = lasso_fit(x, y, grid[0])?;
        return Ok(LassoCv {
            lambda: grid[0],
            fit,
            curve: vec![(grid[0], f64::NAN)],
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sse = vec![0.0; grid.len()];
    for fold in 0..folds {
        let test: Vec<usize> = order.iter().copied().enumerate().filter(|(pos, _)| pos % folds == fold).map(|(_, i)| i).collect();
        let mut train: Vec<usize> = order.iter().copied().enumerate().filter(|(pos, _)| pos % folds != fold).map(|(_, i)| i).collect();
        train.sort_unstable();
        let xt = x.select_rows(&train);
        let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let xv = x.select_rows(&test);
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = lasso_fit(&xt, &yt, lambda)?;
            let pred = fit.predict(&xv);
            sse[g] += test.iter().zip(pred.iter()).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>();
        }
    }
    let curve: Vec<(f64, f64)> = grid.iter().zip(&sse).map(|(l, s)| (*l, s / n as f64)).collect();
    let best = curve
        .iter()
        .enumerate()
        .fold(0, |best, (g, &(_, e))| if e < curve[best].1 { g } else { best });
    let lambda = curve[best].0;
    Ok(LassoCv {
        lambda,
        fit: lasso_fit(x, y, lambda)?,
        curve,
    })
}
