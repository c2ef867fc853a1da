//! `fpls`: batch command line for simulations, dataset analysis and
//! estimator comparisons.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 estimation error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use forest_pls::baselines::{write_importance_csv, write_linear_fits_csv};
use forest_pls::data::{load_csv, FeatureSelection, Schema};
use forest_pls::forest::{ForestConfig, SubsampleSize};
use forest_pls::pipeline::{analyze, compare, CompareConfig, ForestPlsConfig};
use forest_pls::report::write_effects_csv;
use forest_pls::simulation::{run_replications, Design, Estimator, RunConfig};
use forest_pls::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "fpls", version, about = "Forest-PLS heterogeneous policy effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Monte Carlo replications of a design and summarize effect densities.
    Simulate(CommonArgs),
    /// Fit Forest-PLS to a dataset and write effect and vigintile reports.
    Analyze(CommonArgs),
    /// Compare Forest-PLS, a plain causal forest, least squares and LASSO on one draw.
    Compare(CommonArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Design: rct, iv, noconf, nbd or constant.
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// forest-pls, causal-forest or oracle.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    trees: Option<usize>,
    /// Subsample exponent: each tree sees ceil(n^beta) rows.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    min_arm: Option<usize>,
    /// Number of PLS components; 0 selects by cross-validation.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    ci_level: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Scale centered features to unit variance before PLS.
    #[arg(long)]
    scale: Option<bool>,
    /// Input table for `analyze`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Built-in column mapping (`penn`).
    #[arg(long)]
    preset: Option<String>,
    /// JSON column mapping for a generic table.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Outcome column of a generic table.
    #[arg(long)]
    outcome: Option<String>,
    /// Policy column of a generic table.
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated feature columns, or `rest`.
    #[arg(long)]
    features: Option<String>,
    /// `column=value` row filter; repeatable.
    #[arg(long)]
    filter: Vec<String>,
    /// Policy value marking treated units.
    #[arg(long)]
    treated_value: Option<f64>,
    /// Fixed LASSO penalty for `compare`.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings accepted in a `--config` file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    design: Option<String>,
    n: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    estimator: Option<String>,
    trees: Option<usize>,
    beta: Option<f64>,
    alpha: Option<f64>,
    k: Option<usize>,
    pi: Option<f64>,
    min_arm: Option<usize>,
    components: Option<usize>,
    ci_level: Option<f64>,
    folds: Option<usize>,
    scale: Option<bool>,
    data: Option<PathBuf>,
    preset: Option<String>,
    schema: Option<PathBuf>,
    outcome: Option<String>,
    policy: Option<String>,
    features: Option<FeatureSelection>,
    filter: Option<Vec<String>>,
    treated_value: Option<f64>,
    lambda: Option<f64>,
    out: Option<PathBuf>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

fn parse_features(text: &str) -> FeatureSelection {
    if text.trim() == "rest" {
        FeatureSelection::default()
    } else {
        FeatureSelection::Names(text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
    }
}

/// Flags merged over the optional config file.
fn merge(args: CommonArgs) -> Result<FileConfig, Error> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<FileConfig>(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    Ok(FileConfig {
        design: args.design.or(file.design),
        n: args.n.or(file.n),
        reps: args.reps.or(file.reps),
        seed: args.seed.or(file.seed),
        estimator: args.estimator.or(file.estimator),
        trees: args.trees.or(file.trees),
        beta: args.beta.or(file.beta),
        alpha: args.alpha.or(file.alpha),
        k: args.k.or(file.k),
        pi: args.pi.or(file.pi),
        min_arm: args.min_arm.or(file.min_arm),
        components: args.components.or(file.components),
        ci_level: args.ci_level.or(file.ci_level),
        folds: args.folds.or(file.folds),
        scale: args.scale.or(file.scale),
        data: args.data.or(file.data),
        preset: args.preset.or(file.preset),
        schema: args.schema.or(file.schema),
        outcome: args.outcome.or(file.outcome),
        policy: args.policy.or(file.policy),
        features: args.features.map(|f| parse_features(&f)).or(file.features),
        filter: if args.filter.is_empty() { file.filter } else { Some(args.filter) },
        treated_value: args.treated_value.or(file.treated_value),
        lambda: args.lambda.or(file.lambda),
        out: args.out.or(file.out),
    })
}

fn model_config(c: &FileConfig, default_scale: bool) -> Result<ForestPlsConfig, Error> {
    let defaults = ForestConfig::default();
    let mut tree = defaults.tree;
    tree.alpha = c.alpha.unwrap_or(tree.alpha);
    tree.k = c.k.unwrap_or(tree.k);
    tree.pi = c.pi.unwrap_or(tree.pi);
    tree.min_arm = c.min_arm.unwrap_or(tree.min_arm);
    let forest = ForestConfig {
        trees: c.trees.unwrap_or(defaults.trees),
        subsample: SubsampleSize::Power(c.beta.unwrap_or(0.8)),
        tree,
        seed: c.seed.unwrap_or(0),
        ci_level: c.ci_level.unwrap_or(defaults.ci_level),
        ..defaults
    };
    forest.validate()?;
    if let SubsampleSize::Power(beta) = forest.subsample {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(config_error(format!("--beta must lie in (0, 1], found {beta}")));
        }
    }
    let folds = c.folds.unwrap_or(5);
    if folds < 2 {
        return Err(config_error(format!("--folds must be at least 2, found {folds}")));
    }
    Ok(ForestPlsConfig {
        components: c.components.filter(|&q| q > 0),
        folds,
        scale: c.scale.unwrap_or(default_scale),
        cv_seed: c.seed.unwrap_or(0),
        forest,
        ..ForestPlsConfig::default()
    })
}

fn require_out(c: &FileConfig) -> Result<PathBuf, Error> {
    let out = c.out.clone().ok_or_else(|| config_error("--out is required"))?;
    fs::create_dir_all(&out).map_err(|e| config_error(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn design_of(c: &FileConfig) -> Result<Design, Error> {
    c.design.as_deref().unwrap_or("rct").parse()
}

fn sample_size(c: &FileConfig, default: usize) -> Result<usize, Error> {
    let n = c.n.unwrap_or(default);
    if n < 20 {
        return Err(config_error(format!("--n must be at least 20, found {n}")));
    }
    Ok(n)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Error> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn simulate(c: FileConfig) -> Result<(), Error> {
    let design = design_of(&c)?;
    let n = sample_size(&c, 500)?;
    let reps = c.reps.unwrap_or(50);
    if reps == 0 {
        return Err(config_error("--reps must be at least 1"));
    }
    let estimator: Estimator = c.estimator.as_deref().unwrap_or("forest-pls").parse()?;
    let mut run = RunConfig::new(design, n, reps, c.seed.unwrap_or(0), estimator);
    run.model = model_config(&c, false)?;
    let out = require_out(&c)?;
    if design.binarized() {
        log::warn!("design {design} has a continuous policy; it is binarized at the sample median before estimation");
    }
    let summary = run_replications(&run)?;
    write_json(&out.join("summary.json"), &summary)?;
    summary.write_moments_csv(create(&out.join("moments.csv"))?)?;
    println!(
        "{design} n={n} {}: mean true effect {:.4}, mean estimated {:.4} (se {:.4}), mean L1 distance {:.4}",
        estimator.name(),
        summary.mean_true(),
        summary.mean_estimated(),
        summary.mean_estimated_se(),
        summary.mean_l1_distance()
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    n: usize,
    p: usize,
    n_treated: usize,
    components: usize,
    cv_rmsep: Option<Vec<f64>>,
    trees: usize,
    subsample_size: usize,
    clamped_variances: usize,
    warnings: Vec<String>,
    first_vigintile_spread: Vec<Option<f64>>,
    last_vigintile_spread: Vec<Option<f64>>,
}

fn schema_of(c: &FileConfig) -> Result<Schema, Error> {
    let columns = c.outcome.is_some() || c.policy.is_some() || c.features.is_some() || c.filter.is_some() || c.treated_value.is_some();
    match (c.preset.as_deref(), &c.schema, columns) {
        (Some("penn"), None, false) => Ok(Schema::penn()),
        (Some(other), None, false) => Err(config_error(format!("unknown preset `{other}` (expected penn)"))),
        (None, Some(path), false) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
        }
        (None, None, true) => Ok(Schema {
            outcome: c.outcome.clone().ok_or_else(|| config_error("--outcome is required with column flags"))?,
            policy: c.policy.clone().ok_or_else(|| config_error("--policy is required with column flags"))?,
            features: c.features.clone().unwrap_or_default(),
            filter: c.filter.clone().unwrap_or_default(),
            treated_value: c.treated_value,
            outcome_transform: Default::default(),
            delimiter: Default::default(),
        }),
        (None, None, false) => Err(config_error("analyze needs --preset penn, --schema or --outcome/--policy")),
        _ => Err(config_error("give only one of --preset, --schema or column flags")),
    }
}

fn analyze_cmd(c: FileConfig) -> Result<(), Error> {
    let data = c.data.clone().ok_or_else(|| config_error("analyze needs --data"))?;
    let schema = schema_of(&c)?;
    let model = model_config(&c, true)?;
    let out = require_out(&c)?;
    let loaded = load_csv(&data, &schema).map_err(|e| e.at("data ingestion"))?;
    let warnings: Vec<String> = loaded.warnings.iter().map(|w| format!("{w:?}")).collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let dataset = loaded.dataset;
    let analysis = analyze(&dataset, &model)?;
    let fit = &analysis.fit;
    let rows: Vec<usize> = (0..dataset.n()).collect();
    write_effects_csv(create(&out.join("effects.csv"))?, &rows, &fit.scores, &analysis.estimates)?;
    for rep in &analysis.vigintiles {
        rep.write_csv(create(&out.join(format!("vigintiles_c{}.csv", rep.component_index)))?)?;
    }
    analysis.loadings.write_csv(create(&out.join("loadings.csv"))?)?;
    let summary = AnalysisSummary {
        n: dataset.n(),
        p: dataset.p(),
        n_treated: dataset.n_treated(),
        components: fit.model.q(),
        cv_rmsep: fit.cv.as_ref().map(|cv| cv.rmsep.clone()),
        trees: fit.forest.trees.len(),
        subsample_size: fit.forest.subsample_size,
        clamped_variances: analysis.estimates.iter().filter(|e| e.clamped).count(),
        warnings,
        first_vigintile_spread: analysis.vigintiles.iter().map(|r| r.first_spread()).collect(),
        last_vigintile_spread: analysis.vigintiles.iter().map(|r| r.last_spread()).collect(),
    };
    write_json(&out.join("analysis.json"), &summary)?;
    println!(
        "n={} components={} mean effect {:.4}",
        dataset.n(),
        fit.model.q(),
        analysis.estimates.iter().map(|e| e.point).sum::<f64>() / dataset.n() as f64
    );
    Ok(())
}

fn compare_cmd(c: FileConfig) -> Result<(), Error> {
    let design = design_of(&c)?;
    let n = sample_size(&c, 5000)?;
    let mut config = CompareConfig::new(design, n, c.seed.unwrap_or(0));
    config.model = model_config(&c, false)?;
    if let Some(lambda) = c.lambda {
        if !(lambda >= 0.0) {
            return Err(config_error(format!("--lambda must be non-negative, found {lambda}")));
        }
        config.fixed_lambda = lambda;
    }
    let out = require_out(&c)?;
    let cmp = compare(&config)?;
    write_importance_csv(create(&out.join("varimp.csv"))?, &cmp.importance)?;
    let names = cmp.simulated.dataset.feature_names();
    write_linear_fits_csv(
        create(&out.join("lasso.csv"))?,
        &[("ols", &cmp.ols), ("lasso-cv", &cmp.lasso_cv.fit), ("lasso-fixed", &cmp.lasso_fixed)],
        names,
    )?;
    println!(
        "{design} n={n}: Forest-PLS used {} component(s); LASSO cross-validated lambda {:.4}",
        cmp.components, cmp.lasso_cv.lambda
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Estimation => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(value) = std::env::var("FPLS_THREADS") {
        let threads: usize = value
            .parse()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| config_error(format!("FPLS_THREADS must be a positive integer, found `{value}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| config_error(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(args) => merge(args).and_then(simulate),
        Command::Analyze(args) => merge(args).and_then(analyze_cmd),
        Command::Compare(args) => merge(args).and_then(compare_cmd),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Replication { seed, .. } = &e {
                eprintln!("failing replication seed: {seed}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
