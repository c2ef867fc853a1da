//! Monte Carlo designs, kernel density summaries and the replication runner.
//!
//! Every design draws four independent unit-variance Gaussian features with
//! means `(-1, 1, 2, 0)` and attaches the per-unit effect `tau_i` computed
//! from those features. Designs with a continuous policy intensity are
//! binarized at the sample median before estimation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::pipeline::{fit_causal_forest, fit_forest_pls, ForestPlsConfig};
use crate::stats;

/// Feature means shared by all designs.
pub const FEATURE_MEANS: [f64; 4] = [-1.0, 1.0, 2.0, 0.0];

/// Points in every density grid.
pub const GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Randomized trial: `Y = 100 X1 + 100 X2 + P (X3 + 0.1 X4 + 0.2 X3 X4) + e`.
    Rct,
    /// Endogenous intensity with a latent confounder:
    /// `P = Z1 - Z2 + 0.5 U + e1`, `Y = 0.5 P X1 - 3 U + e2`.
    Iv,
    /// As [`Design::Rct`] with effect `X3 X1`.
    Noconf,
    /// Continuous intensity `D = X1 - X2 + 2 X3 + e` and
    /// `Y = 100 X1 + 100 X2 - 100 X3 + 3 D X1 + e`.
    Nbd,
    /// Randomized trial with constant effect one:
    /// `Y = X1 + X2 + P + e`.
    Constant,
}

impl Design {
    pub const ALL: [Design; 5] = [Design::Rct, Design::Iv, Design::Noconf, Design::Nbd, Design::Constant];

    pub fn name(&self) -> &'static str {
        match self {
            Design::Rct => "rct",
            Design::Iv => "iv",
            Design::Noconf => "noconf",
            Design::Nbd => "nbd",
            Design::Constant => "constant",
        }
    }

    /// The per-unit effect implied by a feature row `x = (X1, X2, X3, X4)`.
    pub fn effect(&self, x: &[f64]) -> f64 {
        match self {
            Design::Rct => x[2] + 0.1 * x[3] + 0.2 * x[2] * x[3],
            Design::Iv => 0.5 * x[0],
            Design::Noconf => x[2] * x[0],
            Design::Nbd => 3.0 * x[0],
            Design::Constant => 1.0,
        }
    }

    /// Whether the policy is a continuous intensity binarized at its median.
    pub fn binarized(&self) -> bool {
        matches!(self, Design::Iv | Design::Nbd)
    }
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown design `{s}` (expected rct, iv, noconf, nbd or constant)")))
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub design: Design,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub true_effects: Vec<f64>,
    pub design: Design,
    /// Continuous policy intensity before binarization, when the design has one.
    pub intensity: Option<Vec<f64>>,
}

impl SimulatedDataset {
    /// Recomputes every `tau_i` from the stored features.
    pub fn recomputed_effects(&self) -> Vec<f64> {
        let x = self.dataset.features();
        (0..x.nrows())
            .map(|i| self.design.effect(&[x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]]))
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn draw_features(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, 4);
    for i in 0..n {
        for (j, m) in FEATURE_MEANS.iter().enumerate() {
            x[(i, j)] = m + normal(rng);
        }
    }
    x
}

/// `true` above the sample median.
pub fn binarize_at_median(values: &[f64]) -> Vec<bool> {
    let m = stats::median(values);
    values.iter().map(|&v| v > m).collect()
}

/// Draws one dataset. Identical specs give bit-identical output.
pub fn generate(spec: &SimulationSpec) -> Result<SimulatedDataset> {
    let SimulationSpec { design, n, seed } = *spec;
    if n < 20 {
        return Err(Error::Precondition(format!("simulations need n >= 20, found {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = draw_features(n, &mut rng);
    let row = |i: usize| [x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]];
    let tau: Vec<f64> = (0..n).map(|i| design.effect(&row(i))).collect();
    let mut y = DVector::zeros(n);
    let (policy, intensity) = match design {
        Design::Rct | Design::Noconf | Design::Constant => {
            let p: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            for i in 0..n {
                let [x1, x2, _, _] = row(i);
                let base = if design == Design::Constant { x1 + x2 } else { 100.0 * x1 + 100.0 * x2 };
                y[i] = base + if p[i] { tau[i] } else { 0.0 } + normal(&mut rng);
            }
            (p, None)
        }
        Design::Iv => {
            let mut intensity = Vec::with_capacity(n);
            for i in 0..n {
                let (z1, z2, u, e1, e2) = (normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng));
                let p = z1 - z2 + 0.5 * u + e1;
                y[i] = 0.5 * p * x[(i, 0)] - 3.0 * u + e2;
                intensity.push(p);
            }
            (binarize_at_median(&intensity), Some(intensity))
        }
        Design::Nbd => {
            let mut intensity = Vec::with_capacity(n);
            for i in 0..n {
                let [x1, x2, x3, _] = row(i);
                let d = x1 - x2 + 2.0 * x3 + normal(&mut rng);
                y[i] = 100.0 * x1 + 100.0 * x2 - 100.0 * x3 + 3.0 * d * x1 + normal(&mut rng);
                intensity.push(d);
            }
            (binarize_at_median(&intensity), Some(intensity))
        }
    };
    let dataset = Dataset::from_parts(x, y, policy)?;
    Ok(SimulatedDataset {
        dataset,
        true_effects: tau,
        design,
        intensity,
    })
}

pub fn gen_rct(n: usize, seed: u64) -> Result<SimulatedDataset> {
    generate(&SimulationSpec { design: Design::Rct, n, seed })
}

pub fn gen_iv(n: usize, seed: u64) -> Result<SimulatedDataset> {
    generate(&SimulationSpec { design: Design::Iv, n, seed })
}

pub fn gen_appx_noconf(n: usize, seed: u64) -> Result<SimulatedDataset> {
    generate(&SimulationSpec { design: Design::Noconf, n, seed })
}

pub fn gen_appx_nbd(n: usize, seed: u64) -> Result<SimulatedDataset> {
    generate(&SimulationSpec { design: Design::Nbd, n, seed })
}

pub fn gen_constant(n: usize, seed: u64) -> Result<SimulatedDataset> {
    generate(&SimulationSpec { design: Design::Constant, n, seed })
}

/// Mean and variance of `tau` and of the policy intensity from `draws`
/// brute-force feature draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMoments {
    pub draws: usize,
    pub effect_mean: f64,
    pub effect_variance: f64,
    pub intensity_mean: Option<f64>,
}

pub fn oracle_moments(design: Design, draws: usize, seed: u64) -> Result<OracleMoments> {
    let sim = generate(&SimulationSpec { design, n: draws, seed })?;
    Ok(OracleMoments {
        draws,
        effect_mean: stats::mean(&sim.true_effects),
        effect_variance: stats::variance(&sim.true_effects),
        intensity_mean: sim.intensity.as_deref().map(stats::mean),
    })
}

/// Silverman's rule `1.06 sd n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("density needs at least two finite values".into()));
    }
    let sd = stats::std_dev(values);
    if !(sd > 0.0) {
        return Err(Error::PointMass);
    }
    Ok(1.06 * sd * (values.len() as f64).powf(-0.2))
}

/// Gaussian kernel density of `values` evaluated on `grid`.
pub fn kde(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    Ok(kde_with_bandwidth(values, grid, silverman_bandwidth(values)?))
}

pub fn kde_with_bandwidth(values: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * h);
    grid.par_iter()
        .map(|&g| norm * values.iter().map(|&v| stats::normal_pdf((g - v) / h)).sum::<f64>())
        .collect()
}

/// Silverman bandwidth of each sample. A point-mass sample borrows the
/// largest bandwidth of the others, or `0.01 max(1, |v|)` when all samples
/// are point masses.
pub fn bandwidths(samples: &[&[f64]]) -> Result<Vec<f64>> {
    let own = samples
        .iter()
        .map(|s| match silverman_bandwidth(s) {
            Ok(h) => Ok(Some(h)),
            Err(Error::PointMass) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let widest = own.iter().flatten().copied().fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h))));
    let scale = samples.iter().flat_map(|s| s.iter()).fold(1.0_f64, |m, v| m.max(v.abs()));
    Ok(own.into_iter().map(|h| h.or(widest).unwrap_or(0.01 * scale)).collect())
}

/// `len` equally spaced points from `min - 3h` to `max + 3h`, where the
/// range and the largest bandwidth are taken over all `samples`.
pub fn density_grid(samples: &[&[f64]], len: usize) -> Result<Vec<f64>> {
    let h = bandwidths(samples)?.into_iter().fold(0.0, f64::max);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in samples.iter().flat_map(|s| s.iter()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (len - 1) as f64;
    Ok((0..len).map(|i| a + step * i as f64).collect())
}

/// Trapezoid `L1` distance between two densities on a shared grid.
pub fn l1_distance(grid: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let diff: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a - b).abs()).collect();
    stats::trapezoid(grid, &diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Causal forest grown on PLS components.
    ForestPls,
    /// Causal forest grown on the raw features.
    CausalForest,
    /// Returns the true effects; a reference for the harness itself.
    Oracle,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ForestPls => "forest-pls",
            Estimator::CausalForest => "causal-forest",
            Estimator::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Estimator::ForestPls, Estimator::CausalForest, Estimator::Oracle]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown estimator `{s}` (expected forest-pls, causal-forest or oracle)")))
    }
}

/// Settings shared by every replication of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub design: Design,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// PLS settings; the forest settings inside are shared by both forest
    /// estimators. The forest seed is replaced per replication.
    pub model: ForestPlsConfig,
}

impl RunConfig {
    pub fn new(design: Design, n: usize, replications: usize, seed: u64, estimator: Estimator) -> Self {
        Self {
            design,
            n,
            replications,
            seed,
            estimator,
            model: ForestPlsConfig::default(),
        }
    }
}

/// Seed for stream `stream` of master seed `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Per-replication seeds: data depend only on the master seed and the
/// replication index, so different estimators see identical draws.
pub fn replication_seeds(master: u64, replication: usize) -> (u64, u64) {
    let base = 2 * replication as u64;
    (derive_seed(master, base), derive_seed(master, base + 1))
}

/// Effects estimated at every sample point of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub simulated: SimulatedDataset,
    pub estimated: Vec<f64>,
    /// Components used by Forest-PLS.
    pub components: Option<usize>,
}

/// Generates the data of replication `r` and estimates effects at all
/// sample points.
pub fn run_one(config: &RunConfig, replication: usize) -> Result<ReplicationOutcome> {
    let (data_seed, fit_seed) = replication_seeds(config.seed, replication);
    let simulated = generate(&SimulationSpec {
        design: config.design,
        n: config.n,
        seed: data_seed,
    })?;
    let mut model = config.model.clone();
    model.forest = model.forest.for_sample_size(config.n);
    model.forest.seed = fit_seed;
    model.cv_seed = fit_seed;
    let (estimated, components) = match config.estimator {
        Estimator::Oracle => (simulated.true_effects.clone(), None),
        Estimator::ForestPls => {
            let fit = fit_forest_pls(&simulated.dataset, &model)?;
            (fit.forest.predict_rows(&fit.scores), Some(fit.model.q()))
        }
        Estimator::CausalForest => {
            let forest = fit_causal_forest(&simulated.dataset, &model.forest)?;
            (forest.predict_rows(simulated.dataset.features()), None)
        }
    };
    Ok(ReplicationOutcome {
        simulated,
        estimated,
        components,
    })
}

/// Per-replication summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub replication: usize,
    pub seed: u64,
    pub true_mean: f64,
    pub true_variance: f64,
    pub est_mean: f64,
    pub est_variance: f64,
    /// `L1` distance between the two densities on this replication's grid.
    pub l1_distance: f64,
    pub components: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub design: Design,
    pub n: usize,
    pub estimator: Estimator,
    pub replications: usize,
    pub seed: u64,
    /// The policy was binarized at its median before estimation.
    pub binarized_policy: bool,
    pub grid: Vec<f64>,
    pub density_true: Vec<f64>,
    pub density_est: Vec<f64>,
    pub moments: Vec<Moments>,
}

impl ReplicationSummary {
    pub fn mean_true(&self) -> f64 {
        stats::mean(&self.moments.iter().map(|m| m.true_mean).collect::<Vec<_>>())
    }

    pub fn mean_estimated(&self) -> f64 {
        stats::mean(&self.moments.iter().map(|m| m.est_mean).collect::<Vec<_>>())
    }

    /// Standard error of [`ReplicationSummary::mean_estimated`] across
    /// replications.
    pub fn mean_estimated_se(&self) -> f64 {
        let v: Vec<f64> = self.moments.iter().map(|m| m.est_mean).collect();
        stats::std_dev(&v) / (v.len() as f64).sqrt()
    }

    pub fn mean_l1_distance(&self) -> f64 {
        stats::mean(&self.moments.iter().map(|m| m.l1_distance).collect::<Vec<_>>())
    }

    /// Writes one CSV row per replication.
    pub fn write_moments_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replication", "seed", "true_mean", "true_variance", "est_mean", "est_variance", "l1_distance", "components"])?;
        for m in &self.moments {
            w.write_record([
                m.replication.to_string(),
                m.seed.to_string(),
                m.true_mean.to_string(),
                m.true_variance.to_string(),
                m.est_mean.to_string(),
                m.est_variance.to_string(),
                m.l1_distance.to_string(),
                m.components.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("moments.csv", e))?;
        Ok(())
    }
}

/// Runs all replications (concurrently), then summarizes densities on a
/// grid shared by every replication.
pub fn run_replications(config: &RunConfig) -> Result<ReplicationSummary> {
    if config.replications == 0 {
        return Err(Error::Precondition("at least one replication is required".into()));
    }
    let wrap = |r: usize, e: Error| Error::Replication {
        replication: r,
        seed: replication_seeds(config.seed, r).0,
        source: Box::new(e),
    };
    let outcomes = (0..config.replications)
        .into_par_iter()
        .map(|r| run_one(config, r).map_err(|e| wrap(r, e)))
        .collect::<Result<Vec<_>>>()?;
    let mut samples: Vec<&[f64]> = Vec::with_capacity(2 * outcomes.len());
    for o in &outcomes {
        samples.push(&o.simulated.true_effects);
        samples.push(&o.estimated);
    }
    let grid = density_grid(&samples, GRID_POINTS).map_err(|e| wrap(0, e))?;
    let pooled = bandwidths(&samples).map_err(|e| wrap(0, e))?;
    if samples.iter().any(|s| matches!(silverman_bandwidth(s), Err(Error::PointMass))) {
        log::warn!("some effect samples are point masses; their densities use a borrowed bandwidth");
    }
    let per_rep = outcomes
        .par_iter()
        .enumerate()
        .map(|(r, o)| {
            let (t, e) = (&o.simulated.true_effects[..], &o.estimated[..]);
            let dt = kde_with_bandwidth(t, &grid, pooled[2 * r]);
            let de = kde_with_bandwidth(e, &grid, pooled[2 * r + 1]);
            let own = density_grid(&[t, e], GRID_POINTS)?;
            let h = bandwidths(&[t, e])?;
            let l1 = l1_distance(&own, &kde_with_bandwidth(t, &own, h[0]), &kde_with_bandwidth(e, &own, h[1]));
            let moments = Moments {
                replication: r,
                seed: replication_seeds(config.seed, r).0,
                true_mean: stats::mean(&o.simulated.true_effects),
                true_variance: stats::variance(&o.simulated.true_effects),
                est_mean: stats::mean(&o.estimated),
                est_variance: stats::variance(&o.estimated),
                l1_distance: l1,
                components: o.components,
            };
            Ok((dt, de, moments))
        })
        .enumerate()
        .map(|(r, res): (usize, Result<_>)| res.map_err(|e| wrap(r, e)))
        .collect::<Result<Vec<_>>>()?;
    let reps = per_rep.len() as f64;
    let mut density_true = vec![0.0; grid.len()];
    let mut density_est = vec![0.0; grid.len()];
    let mut moments = Vec::with_capacity(per_rep.len());
    for (dt, de, m) in per_rep {
        for k in 0..grid.len() {
            density_true[k] += dt[k] / reps;
            density_est[k] += de[k] / reps;
        }
        moments.push(m);
    }
    Ok(ReplicationSummary {
        design: config.design,
        n: config.n,
        estimator: config.estimator,
        replications: config.replications,
        seed: config.seed,
        binarized_policy: config.design.binarized(),
        grid,
        density_true,
        density_est,
        moments,
    })
}

/// Forest settings with the small-sample shrink applied.
pub fn default_forest_for(n: usize) -> ForestConfig {
    ForestConfig::default().for_sample_size(n)
}
