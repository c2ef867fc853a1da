//! Comparators: least squares, LASSO with cross-validated penalty, and
//! regression-tree variable importance over estimated effects.

mod importance;
mod lasso;
mod linear;

pub use importance::{regression_tree_importance, CartParams, ImportanceReport};
pub use lasso::{default_lambda_grid, kkt_violation, lambda_max, lasso_cv, lasso_fit, LassoCv, MAX_SWEEPS};
pub use linear::{ols_fit, ols_with_inference, LinearFit, OlsInference};

use crate::error::{Error, Result};

/// Writes `method,lambda,term,coefficient` rows (intercept first).
pub fn write_linear_fits_csv<W: std::io::Write>(out: W, fits: &[(&str, &LinearFit)], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "lambda", "term", "coefficient"])?;
    for (method, fit) in fits {
        let lambda = fit.lambda.to_string();
        w.write_record([*method, lambda.as_str(), "intercept", fit.intercept.to_string().as_str()])?;
        for (name, c) in names.iter().zip(&fit.coefficients) {
            w.write_record([*method, lambda.as_str(), name.as_str(), c.to_string().as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io("lasso.csv", e))?;
    Ok(())
}

/// Writes `method,feature,share` rows.
pub fn write_importance_csv<W: std::io::Write>(out: W, reports: &[ImportanceReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "feature", "share"])?;
    for rep in reports {
        for (name, share) in rep.feature_names.iter().zip(&rep.shares) {
            w.write_record([rep.method.as_str(), name.as_str(), share.to_string().as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io("varimp.csv", e))?;
    Ok(())
}
