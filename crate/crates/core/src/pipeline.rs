//! End-to-end estimation: component selection, PLS projection, forest
//! fitting, effect inference and the comparison tables.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    default_lambda_grid, lasso_cv, lasso_fit, ols_fit, regression_tree_importance, CartParams, ImportanceReport, LassoCv, LinearFit,
};
use crate::data::Dataset;
use crate::error::Result;
use crate::forest::{CausalForest, EffectEstimate, ForestConfig};
use crate::pls::{loading_report, select_components_cv, CvCurve, LoadingReport, PlsModel};
use crate::report::{build_vigintile_report, VigintileReport};
use crate::simulation::{generate, replication_seeds, Design, SimulatedDataset, SimulationSpec};

/// Settings for Forest-PLS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestPlsConfig {
    /// Fixed component count; `None` selects it by cross-validation.
    pub components: Option<usize>,
    /// Largest count tried by cross-validation (defaults to all features).
    pub max_components: Option<usize>,
    pub folds: usize,
    /// Divide centered features by their standard deviation.
    pub scale: bool,
    pub cv_seed: u64,
    pub forest: ForestConfig,
}

impl Default for ForestPlsConfig {
    fn default() -> Self {
        Self {
            components: None,
            max_components: None,
            folds: 5,
            scale: false,
            cv_seed: 0,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestPlsFit {
    pub cv: Option<CvCurve>,
    pub model: PlsModel,
    /// Training scores, one row per observation.
    pub scores: nalgebra::DMatrix<f64>,
    pub forest: CausalForest,
}

/// Chooses the component count, extracts components and grows the forest
/// on the scores.
pub fn fit_forest_pls(dataset: &Dataset, config: &ForestPlsConfig) -> Result<ForestPlsFit> {
    let (q, cv) = match config.components {
        Some(q) => (q, None),
        None => {
            let max_q = config.max_components.unwrap_or(dataset.p()).min(dataset.p());
            let cv = select_components_cv(dataset, config.folds, max_q, config.cv_seed, config.scale)
                .map_err(|e| e.at("component selection"))?;
            (cv.selected, Some(cv))
        }
    };
    let model = PlsModel::fit(dataset, q, config.scale).map_err(|e| e.at("PLS fit"))?;
    let scores = model.scores.clone();
    let forest = CausalForest::build(&scores, dataset.outcome().as_slice(), dataset.policy(), &config.forest)
        .map_err(|e| e.at("forest"))?;
    Ok(ForestPlsFit { cv, model, scores, forest })
}

/// A causal forest grown directly on the features.
pub fn fit_causal_forest(dataset: &Dataset, config: &ForestConfig) -> Result<CausalForest> {
    CausalForest::build(dataset.features(), dataset.outcome().as_slice(), dataset.policy(), config).map_err(|e| e.at("forest"))
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub fit: ForestPlsFit,
    /// Effect estimates at every observation, in row order.
    pub estimates: Vec<EffectEstimate>,
    pub loadings: LoadingReport,
    /// One report per component.
    pub vigintiles: Vec<VigintileReport>,
}

/// Forest-PLS with inference at every observation, loading regressions and
/// vigintile reports.
pub fn analyze(dataset: &Dataset, config: &ForestPlsConfig) -> Result<Analysis> {
    let fit = fit_forest_pls(dataset, config)?;
    let estimates = fit.forest.estimate_rows(&fit.scores);
    let loadings = loading_report(&fit.model, dataset).map_err(|e| e.at("loading regressions"))?;
    let effects: Vec<f64> = estimates.iter().map(|e| e.point).collect();
    let vigintiles = (0..fit.scores.ncols())
        .map(|k| {
            let s: Vec<f64> = fit.scores.column(k).iter().copied().collect();
            build_vigintile_report(&s, &effects, k + 1)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("vigintile report"))?;
    Ok(Analysis {
        fit,
        estimates,
        loadings,
        vigintiles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub design: Design,
    pub n: usize,
    pub seed: u64,
    pub model: ForestPlsConfig,
    /// Penalty of the fixed-lambda LASSO row.
    pub fixed_lambda: f64,
    pub lasso_grid_len: usize,
    pub lasso_folds: usize,
}

impl CompareConfig {
    pub fn new(design: Design, n: usize, seed: u64) -> Self {
        Self {
            design,
            n,
            seed,
            model: ForestPlsConfig::default(),
            fixed_lambda: 2.605,
            lasso_grid_len: 100,
            lasso_folds: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub simulated: SimulatedDataset,
    pub components: usize,
    pub forest_pls_effects: Vec<f64>,
    pub causal_forest_effects: Vec<f64>,
    /// Forest-PLS first, then the plain causal forest.
    pub importance: Vec<ImportanceReport>,
    pub ols: LinearFit,
    pub lasso_cv: LassoCv,
    pub lasso_fixed: LinearFit,
}

/// Fits both forests on one draw, attributes their estimated effects to
/// the features, and fits least squares and LASSO outcome regressions.
pub fn compare(config: &CompareConfig) -> Result<Comparison> {
    let (data_seed, fit_seed) = replication_seeds(config.seed, 0);
    let simulated = generate(&SimulationSpec {
        design: config.design,
        n: config.n,
        seed: data_seed,
    })?;
    let data = &simulated.dataset;
    let mut model = config.model.clone();
    model.forest = model.forest.for_sample_size(config.n);
    model.forest.seed = fit_seed;
    model.cv_seed = fit_seed;
    let fit = fit_forest_pls(data, &model)?;
    let forest_pls_effects = fit.forest.predict_rows(&fit.scores);
    let plain = fit_causal_forest(data, &model.forest)?;
    let causal_forest_effects = plain.predict_rows(data.features());
    let names = data.feature_names();
    let importance = [("forest-pls", &forest_pls_effects), ("causal-forest", &causal_forest_effects)]
        .into_iter()
        .map(|(tag, eff)| regression_tree_importance(data.features(), eff, names, tag, CartParams::default()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("variable importance"))?;
    let (x, y): (_, &DVector<f64>) = (data.features(), data.outcome());
    let ols = ols_fit(x, y).map_err(|e| e.at("least squares"))?;
    let grid = default_lambda_grid(x, y, config.lasso_grid_len, 1e-3)?;
    let lasso_cv = lasso_cv(x, y, config.lasso_folds, &grid, fit_seed).map_err(|e| e.at("LASSO cross-validation"))?;
    let lasso_fixed = lasso_fit(x, y, config.fixed_lambda).map_err(|e| e.at("LASSO"))?;
    Ok(Comparison {
        components: fit.model.q(),
        simulated,
        forest_pls_effects,
        causal_forest_effects,
        importance,
        ols,
        lasso_cv,
        lasso_fixed,
    })
}
