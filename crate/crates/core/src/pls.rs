//! Partial least squares target components.
//!
//! Components are extracted one at a time: a unit weight vector proportional
//! to the covariances between the residual features and the residual
//! outcome, the score `c = X w`, the loadings `v = X'c / c'c`, the outcome
//! coefficient `b = y'c / c'c`, and finally the rank-one deflation
//! `X <- X - c v'`, `y <- y - b c`. The same coefficient vector also has the
//! closed form `R (R' S R)^-1 R' s` over the Krylov sequence
//! `R = (s, S s, ..., S^(q-1) s)`, see [`KrylovBasis`].

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{ols_with_inference, OlsInference};
use crate::data::{center, CenteringStats, Dataset};
use crate::error::{Error, Result};

/// Largest absolute residual covariance below which no further component is
/// extracted.
pub const EXHAUSTION_THRESHOLD: f64 = 1e-12;

/// Condition number above which the Krylov inner matrix counts as singular.
pub const MAX_KRYLOV_CONDITION: f64 = 1e12;

/// Unit-norm vector of sample covariances (`n - 1` denominator) between the
/// residual feature columns and the residual outcome.
///
/// Both residuals must already be centered. Returns
/// [`Error::ResidualExhausted`] with `achieved = 0` when every covariance is
/// below [`EXHAUSTION_THRESHOLD`]; callers fill in the component count.
pub fn compute_weight(x_residual: &DMatrix<f64>, y_residual: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x_residual.nrows();
    if y_residual.len() != n {
        return Err(Error::Shape {
            expected: format!("outcome of length {n}"),
            found: format!("{}", y_residual.len()),
        });
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = x_residual.tr_mul(y_residual) / denom;
    if cov.amax() < EXHAUSTION_THRESHOLD {
        return Err(Error::ResidualExhausted { achieved: 0 });
    }
    let norm = cov.norm();
    Ok(cov / norm)
}

/// Raw output of the iterative extraction on centered inputs.
#[derive(Debug, Clone)]
pub struct Nipals {
    pub weights: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub coefficients: DVector<f64>,
    pub residual_features: DMatrix<f64>,
    pub residual_outcome: DVector<f64>,
    /// Fewer than the requested components could be extracted.
    pub truncated: bool,
}

/// Extracts up to `q` components from centered `x` and `y`.
pub fn fit_nipals(x: &DMatrix<f64>, y: &DVector<f64>, q: usize) -> Result<Nipals> {
    let (n, p) = x.shape();
    if q == 0 || q > p {
        return Err(Error::Precondition(format!("component count must lie in 1..={p}, found {q}")));
    }
    let mut x_res = x.clone();
    let mut y_res = y.clone();
    let mut weights = Vec::with_capacity(q);
    let mut loadings = Vec::with_capacity(q);
    let mut scores = Vec::with_capacity(q);
    let mut coefficients = Vec::with_capacity(q);
    for j in 0..q {
        let w = match compute_weight(&x_res, &y_res) {
            Ok(w) => w,
            Err(Error::ResidualExhausted { .. }) if j == 0 => {
                return Err(Error::ResidualExhausted { achieved: 0 })
            }
            Err(Error::ResidualExhausted { .. }) => break,
            Err(e) => return Err(e),
        };
        let c = &x_res * &w;
        let cc = c.norm_squared();
        if cc <= 0.0 {
            if j == 0 {
                return Err(Error::ResidualExhausted { achieved: 0 });
            }
            break;
        }
        let v = x_res.tr_mul(&c) / cc;
        let b = y_res.dot(&c) / cc;
        x_res.ger(-1.0, &c, &v, 1.0);
        y_res.axpy(-b, &c, 1.0);
        weights.push(w);
        loadings.push(v);
        scores.push(c);
        coefficients.push(b);
    }
    let achieved = weights.len();
    let stack = |cols: &[DVector<f64>], rows: usize| {
        if cols.is_empty() {
            DMatrix::zeros(rows, 0)
        } else {
            DMatrix::from_columns(cols)
        }
    };
    Ok(Nipals {
        weights: stack(&weights, p),
        loadings: stack(&loadings, p),
        scores: stack(&scores, n),
        coefficients: DVector::from_vec(coefficients),
        residual_features: x_res,
        residual_outcome: y_res,
        truncated: achieved < q,
    })
}

/// A fitted PLS model: components, loadings, scores and the centering used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlsModel {
    /// `p x q`, unit-norm columns.
    pub weights: DMatrix<f64>,
    /// `p x q`.
    pub loadings: DMatrix<f64>,
    /// `n x q` training scores, mutually orthogonal columns.
    pub scores: DMatrix<f64>,
    /// Outcome coefficient of each score column.
    pub outcome_coefficients: DVector<f64>,
    pub centering: CenteringStats,
    /// Feature residual after the final deflation.
    pub residual_features: DMatrix<f64>,
    pub requested: usize,
    pub truncated: bool,
}

impl PlsModel {
    /// Centers (and optionally scales) the dataset and extracts `q` components.
    pub fn fit(dataset: &Dataset, q: usize, scale: bool) -> Result<Self> {
        let (centered, centering) = center(dataset, scale)?;
        let nip = fit_nipals(centered.features(), centered.outcome(), q)?;
        if nip.truncated {
            log::warn!("PLS extraction stopped at {} of {q} components", nip.weights.ncols());
        }
        Ok(Self {
            weights: nip.weights,
            loadings: nip.loadings,
            scores: nip.scores,
            outcome_coefficients: nip.coefficients,
            centering,
            residual_features: nip.residual_features,
            requested: q,
            truncated: nip.truncated,
        })
    }

    pub fn q(&self) -> usize {
        self.weights.ncols()
    }

    pub fn p(&self) -> usize {
        self.weights.nrows()
    }

    /// Scores of new rows given on the original feature scale. Applies each
    /// weight in turn and deflates with the stored loadings, exactly as
    /// during fitting.
    pub fn project(&self, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = self.centering.apply(x_new)?;
        let mut out = DMatrix::zeros(x.nrows(), self.q());
        for j in 0..self.q() {
            let c = &x * self.weights.column(j);
            x.ger(-1.0, &c, &self.loadings.column(j), 1.0);
            out.set_column(j, &c);
        }
        Ok(out)
    }

    /// Coefficients on the centered (and, if enabled, scaled) features:
    /// `W (V'W)^-1 b`.
    pub fn centered_coefficients(&self) -> Result<DVector<f64>> {
        let vw = self.loadings.tr_mul(&self.weights);
        let inner = vw.lu().solve(&self.outcome_coefficients).ok_or(Error::Singular)?;
        Ok(&self.weights * inner)
    }

    /// `(intercept, coefficients)` on the original feature scale.
    pub fn original_coefficients(&self) -> Result<(f64, DVector<f64>)> {
        let mut beta = self.centered_coefficients()?;
        if self.centering.scaled {
            for (b, s) in beta.iter_mut().zip(&self.centering.std_devs) {
                *b /= s;
            }
        }
        let intercept = self.centering.outcome_mean
            - beta.iter().zip(&self.centering.feature_means).map(|(b, m)| b * m).sum::<f64>();
        Ok((intercept, beta))
    }

    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
        let scores = self.project(x_new)?;
        Ok((scores * &self.outcome_coefficients).add_scalar(self.centering.outcome_mean))
    }
}

/// Sample covariance `S_xx`, cross-covariance `s_xy` and the Krylov
/// sequence `(s_xy, S_xx s_xy, ..., S_xx^(q-1) s_xy)`.
#[derive(Debug, Clone)]
pub struct KrylovBasis {
    /// `p x q`; column `j` is `S_xx` times column `j - 1`.
    pub r: DMatrix<f64>,
    pub s_xx: DMatrix<f64>,
    pub s_xy: DVector<f64>,
}

impl KrylovBasis {
    /// Builds the basis from raw (uncentered) `x` and `y`.
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, q: usize) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 || y.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} >= 2 outcomes"),
                found: format!("{}", y.len()),
            });
        }
        if q == 0 || q > p {
            return Err(Error::Precondition(format!("component count must lie in 1..={p}, found {q}")));
        }
        let means = x.row_mean();
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[j]);
        }
        let yc = y.add_scalar(-y.mean());
        let denom = (n - 1) as f64;
        let s_xx = xc.tr_mul(&xc) / denom;
        let s_xy = xc.tr_mul(&yc) / denom;
        let mut r = DMatrix::zeros(p, q);
        r.set_column(0, &s_xy);
        for j in 1..q {
            let next = &s_xx * r.column(j - 1);
            r.set_column(j, &next);
        }
        Ok(Self { r, s_xx, s_xy })
    }

    pub fn q(&self) -> usize {
        self.r.ncols()
    }

    /// Closed-form coefficients `R (R' S R)^-1 R' s` using the first `q`
    /// Krylov columns.
    ///
    /// The expression depends on `R` only through its column span, so it is
    /// evaluated with an orthonormal basis `Q` of that span (thin QR of the
    /// unit-normed columns). Two conditions are monitored: that of the QR
    /// triangle, which detects a Krylov sequence that stops growing, and that
    /// of `Q' S Q`. Either above [`MAX_KRYLOV_CONDITION`] is rank deficiency.
    pub fn coefficients(&self, q: usize) -> Result<DVector<f64>> {
        if q == 0 || q > self.q() {
            return Err(Error::Precondition(format!("q must lie in 1..={}, found {q}", self.q())));
        }
        let mut r = self.r.columns(0, q).into_owned();
        for mut col in r.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        let qr = r.qr();
        let diag: Vec<f64> = qr.r().diagonal().iter().map(|v| v.abs()).collect();
        let (dmin, dmax) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
        let basis_condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        if !(basis_condition <= MAX_KRYLOV_CONDITION) {
            return Err(Error::RankDeficient {
                q,
                condition: basis_condition,
            });
        }
        let basis = qr.q();
        let inner = basis.tr_mul(&(&self.s_xx * &basis));
        let inner = (&inner + inner.transpose()) * 0.5;
        let eig = inner.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_KRYLOV_CONDITION) {
            return Err(Error::RankDeficient { q, condition });
        }
        let rhs = basis.tr_mul(&self.s_xy);
        let sol = inner
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(Error::RankDeficient { q, condition })?;
        Ok(basis * sol)
    }
}

/// Convenience wrapper: closed-form coefficients for `q` components.
pub fn krylov_coefficients(basis: &KrylovBasis, q: usize) -> Result<DVector<f64>> {
    basis.coefficients(q)
}

/// Cross-validated prediction error per component count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    /// `rmsep[q - 1]` is the root mean squared prediction error with `q`
    /// components.
    pub rmsep: Vec<f64>,
    pub selected: usize,
}

/// Relative tolerance of the stabilization rule.
pub const STABILIZATION_TOLERANCE: f64 = 0.01;

/// Smallest `q` whose RMSEP lies within [`STABILIZATION_TOLERANCE`] (relative)
/// of the minimum.
pub fn stabilized_count(rmsep: &[f64]) -> usize {
    let min = rmsep.iter().copied().fold(f64::INFINITY, f64::min);
    rmsep
        .iter()
        .position(|&r| r - min <= STABILIZATION_TOLERANCE * min)
        .map(|i| i + 1)
        .unwrap_or(1)
}

/// K-fold cross-validation over `1..=max_q` components.
pub fn select_components_cv(dataset: &Dataset, folds: usize, max_q: usize, seed: u64, scale: bool) -> Result<CvCurve> {
    let (n, p) = (dataset.n(), dataset.p());
    if folds < 2 || n < folds {
        return Err(Error::Precondition(format!("need 2 <= folds <= n, found folds = {folds}, n = {n}")));
    }
    if max_q == 0 || max_q > p {
        return Err(Error::Precondition(format!("max_q must lie in 1..={p}, found {max_q}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut sse = vec![0.0; max_q];
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let train_set = dataset.subset(&train)?;
        let (centered, stats) = center(&train_set, scale)?;
        let nip = match fit_nipals(centered.features(), centered.outcome(), max_q) {
            Ok(nip) => Some(nip),
            Err(Error::ResidualExhausted { .. }) => None,
            Err(e) => return Err(e),
        };
        let x_test = stats.apply(&dataset.features().select_rows(&test))?;
        let y_test: Vec<f64> = test.iter().map(|&i| dataset.outcome()[i]).collect();
        // Accumulate predictions component by component via sequential projection.
        let mut pred = DVector::from_element(test.len(), stats.outcome_mean);
        let mut x = x_test;
        let achieved = nip.as_ref().map_or(0, |m| m.weights.ncols());
        for q in 0..max_q {
            if q < achieved {
                let nip = nip.as_ref().unwrap();
                let c = &x * nip.weights.column(q);
                x.ger(-1.0, &c, &nip.loadings.column(q), 1.0);
                pred.axpy(nip.coefficients[q], &c, 1.0);
            }
            sse[q] += pred.iter().zip(&y_test).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    let rmsep: Vec<f64> = sse.iter().map(|s| (s / n as f64).sqrt()).collect();
    let selected = stabilized_count(&rmsep);
    Ok(CvCurve { rmsep, selected })
}

/// OLS regression of one component's scores on the original features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRegression {
    pub intercept: f64,
    pub intercept_se: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub r_squared: f64,
}

impl From<OlsInference> for ComponentRegression {
    fn from(o: OlsInference) -> Self {
        Self {
            intercept: o.fit.intercept,
            intercept_se: o.intercept_se,
            coefficients: o.fit.coefficients,
            std_errors: o.std_errors,
            r_squared: o.r_squared,
        }
    }
}

/// How each original feature enters each target component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadingReport {
    pub feature_names: Vec<String>,
    pub components: Vec<ComponentRegression>,
}

impl LoadingReport {
    /// Feature indices ordered by decreasing absolute coefficient on
    /// `component`; equal magnitudes keep feature order.
    pub fn dominant_features(&self, component: usize) -> Vec<usize> {
        let coefs = &self.components[component].coefficients;
        let mut idx: Vec<usize> = (0..coefs.len()).collect();
        idx.sort_by(|&a, &b| coefs[b].abs().total_cmp(&coefs[a].abs()));
        idx
    }

    /// Rows are features (then the constant and R²), columns are
    /// `cK_coef, cK_se` per component.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["feature".to_string()];
        for k in 1..=self.components.len() {
            header.push(format!("c{k}_coef"));
            header.push(format!("c{k}_se"));
        }
        w.write_record(&header)?;
        for (j, name) in self.feature_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            for c in &self.components {
                row.push(c.coefficients[j].to_string());
                row.push(c.std_errors[j].to_string());
            }
            w.write_record(&row)?;
        }
        let mut row = vec!["constant".to_string()];
        for c in &self.components {
            row.push(c.intercept.to_string());
            row.push(c.intercept_se.to_string());
        }
        w.write_record(&row)?;
        let mut row = vec!["r_squared".to_string()];
        for c in &self.components {
            row.push(c.r_squared.to_string());
            row.push(String::new());
        }
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::io("loadings.csv", e))?;
        Ok(())
    }
}

/// Regresses every training score column on the original features.
pub fn loading_report(model: &PlsModel, dataset: &Dataset) -> Result<LoadingReport> {
    if model.scores.nrows() != dataset.n() || model.p() != dataset.p() {
        return Err(Error::Shape {
            expected: format!("{} x {} training data", model.scores.nrows(), model.p()),
            found: format!("{} x {}", dataset.n(), dataset.p()),
        });
    }
    let components = (0..model.q())
        .map(|k| ols_with_inference(dataset.features(), &model.scores.column(k).into_owned()).map(Into::into))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadingReport {
        feature_names: dataset.feature_names().to_vec(),
        components,
    })
}
