use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intercept plus slopes on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Penalty used; `0` for least squares.
    pub lambda: f64,
    /// The Gram matrix needed a ridge jitter to factorize.
    #[serde(default)]
    pub jittered: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let beta = DVector::from_column_slice(&self.coefficients);
        (x * beta).add_scalar(self.intercept)
    }

    pub fn nonzero(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

/// Least-squares fit with classical standard errors and R².
#[derive(Debug, Clone, PartialEq)]
pub struct OlsInference {
    pub fit: LinearFit,
    pub std_errors: Vec<f64>,
    pub intercept_se: f64,
    pub r_squared: f64,
}

const JITTER: f64 = 1e-10;

fn centered(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>, Vec<f64>, f64)> {
    let (n, _) = x.shape();
    if y.len() != n || n < 2 {
        return Err(Error::Shape {
            expected: format!("{n} >= 2 outcomes"),
            found: format!("{}", y.len()),
        });
    }
    let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let y_mean = y.mean();
    Ok((xc, y.add_scalar(-y_mean), means, y_mean))
}

/// Solves the centered normal equations, returning the slopes, the inverse
/// Gram matrix and whether jitter was needed.
fn solve_normal(xc: &DMatrix<f64>, yc: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
    let p = xc.ncols();
    let gram = xc.tr_mul(xc);
    let rhs = xc.tr_mul(yc);
    let (chol, jittered) = match gram.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let scale = (gram.trace() / p.max(1) as f64).max(f64::MIN_POSITIVE);
            let ridge = &gram + DMatrix::identity(p, p) * (JITTER * scale);
            match ridge.cholesky() {
                Some(c) => {
                    log::warn!("least squares: Gram matrix needed a {JITTER:e} ridge jitter");
                    (c, true)
                }
                None => return Err(Error::Singular),
            }
        }
    };
    let mut beta = chol.solve(&rhs);
    // One refinement step against the unjittered system.
    let resid = &rhs - &gram * &beta;
    beta += chol.solve(&resid);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Singular);
    }
    Ok((beta, chol.inverse(), jittered))
}

/// Ordinary least squares with an unpenalized intercept.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearFit> {
    let (xc, yc, means, y_mean) = centered(x, y)?;
    let (beta, _, jittered) = solve_normal(&xc, &yc)?;
    let intercept = y_mean - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearFit {
        intercept,
        coefficients: beta.as_slice().to_vec(),
        lambda: 0.0,
        jittered,
    })
}

/// OLS plus standard errors (`RSS / (n - p - 1)` residual variance) and R².
pub fn ols_with_inference(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsInference> {
    let (n, p) = x.shape();
    let (xc, yc, means, y_mean) = centered(x, y)?;
    let (beta, gram_inv, jittered) = solve_normal(&xc, &yc)?;
    let intercept = y_mean - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let resid = &yc - &xc * &beta;
    let rss = resid.norm_squared();
    let tss = yc.norm_squared();
    let dof = n as f64 - p as f64 - 1.0;
    let sigma2 = if dof > 0.0 { rss / dof } else { f64::NAN };
    let std_errors = (0..p).map(|j| (sigma2 * gram_inv[(j, j)]).max(0.0).sqrt()).collect();
    let m = DVector::from_column_slice(&means);
    let intercept_var = sigma2 * (1.0 / n as f64 + m.dot(&(&gram_inv * &m)));
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(OlsInference {
        fit: LinearFit {
            intercept,
            coefficients: beta.as_slice().to_vec(),
            lambda: 0.0,
            jittered,
        },
        std_errors,
        intercept_se: intercept_var.max(0.0).sqrt(),
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
    }

    #[test]
    fn constant_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = ols_fit(&x, &DVector::from_element(30, 5.0)).unwrap();
        assert!((fit.intercept - 5.0).abs() < 1e-12);
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn matches_dense_solver_and_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 0)] - 2.0 * x[(i, 2)] + rng.sample::<f64, _>(StandardNormal));
        let fit = ols_fit(&x, &y).unwrap();
        // Independent route: augmented design with a ones column, solved by LU.
        let mut a = DMatrix::from_element(n, 4, 1.0);
        a.view_mut((0, 1), (n, 3)).copy_from(&x);
        let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * &y)).unwrap();
        assert!((sol[0] - fit.intercept).abs() < 1e-10);
        for j in 0..3 {
            assert!((sol[j + 1] - fit.coefficients[j]).abs() < 1e-10);
        }
        let grad = a.transpose() * (&y - fit.predict(&x));
        assert!(grad.amax() < 1e-8);
    }

    #[test]
    fn duplicated_column_is_jittered_or_singular() {
        let x = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let y = DVector::from_fn(10, |i, _| i as f64);
        match ols_fit(&x, &y) {
            Ok(fit) => assert!(fit.jittered),
            Err(e) => assert!(matches!(e, Error::Singular)),
        }
    }
}
