//! Command-line front end: `fit`, `predict`, `simulate` and `diagnose`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::diagnostics;
use crate::ecm;
use crate::error::{Error, Result};
use crate::io::files::{write_results, write_seeds, write_timing, MODEL_FORMAT, MODEL_VERSION};
use crate::io::{load_dataset, read_table, LoadedData, ModelFile, RunConfig, SimFile, Standardization};
use crate::model::{marginal_screen, validate_dataset, DataSet};
use crate::predict;
use crate::sim;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hprobe", version, about = "Sparse regression with a log-linear variance model")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// One-column CSV with the outcome.
    #[arg(long)]
    y: PathBuf,
    /// CSV of candidate predictors.
    #[arg(long)]
    x: PathBuf,
    /// CSV of the mean design; intercept only when omitted.
    #[arg(long)]
    v_mean: Option<PathBuf>,
    /// CSV of the variance design; defaults to the mean design.
    #[arg(long)]
    v_var: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write it as JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// JSON estimator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Center and scale each predictor column before fitting.
        #[arg(long)]
        standardize: bool,
        /// Keep only the given number of predictors most correlated with y.
        #[arg(long)]
        screen: Option<usize>,
    },
    /// Prediction intervals for new rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV holding every column the model was fitted on, by name.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a simulation experiment.
    Simulate {
        /// JSON experiment settings.
        #[arg(long)]
        config: PathBuf,
        /// Directory for results.csv, seeds.csv and timing.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Log-squared residuals against a candidate variance covariate.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Column name in x, the mean design or the variance design.
        #[arg(long)]
        candidate: String,
        /// Output CSV of (candidate, log-squared residual) pairs.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_NUMERICAL;
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit { data, config, out, seed, standardize, screen } => {
            fit_command(&data, config.as_deref(), &out, seed, standardize, screen)
        }
        Command::Predict { model, data, level, out } => predict_command(&model, &data, level, out.as_deref()),
        Command::Simulate { config, out, seed } => simulate_command(&config, &out, seed),
        Command::Diagnose { model, data, candidate, out } => diagnose_command(&model, &data, &candidate, &out),
    }
}

fn load(args: &DataArgs) -> Result<LoadedData> {
    load_dataset(&args.y, &args.x, args.v_mean.as_deref(), args.v_var.as_deref())
}

fn with_x(data: &DataSet, x: DMatrix<f64>) -> Result<DataSet> {
    let mut raw = data.clone().into_raw();
    raw.x = x;
    Ok(validate_dataset(raw)?.data)
}

/// Applies a model's screening and standardization to freshly loaded data.
fn preprocess(model: &ModelFile, data: &DataSet) -> Result<DataSet> {
    let mut data = match &model.screened {
        Some(cols) => data.select_columns(cols)?,
        None => data.clone(),
    };
    if let Some(s) = &model.standardization {
        data = with_x(&data, s.apply(data.x())?)?;
    }
    if data.p() != model.fit.state.beta.len() {
        return Err(Error::Dimension(format!(
            "model has {} predictors, data has {}",
            model.fit.state.beta.len(),
            data.p()
        )));
    }
    Ok(data)
}

fn fit_command(
    args: &DataArgs,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    standardize: bool,
    screen: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.fit.seed = s;
    }
    let loaded = load(args)?;
    let mut data = loaded.validated.data.clone();
    let mut x_columns = loaded.x_names.clone();
    let screened = match screen {
        Some(m) => {
            let cols = marginal_screen(&data, m)?;
            data = data.select_columns(&cols)?;
            x_columns = cols.iter().map(|&k| loaded.x_names[k].clone()).collect();
            Some(cols)
        }
        None => None,
    };
    let standardization = if standardize {
        let s = Standardization::from_columns(data.x());
        data = with_x(&data, s.apply(data.x())?)?;
        Some(s)
    } else {
        None
    };
    let fit = ecm::fit(&data, &cfg.fit, &cfg.prior)?;
    if !fit.converged {
        log::warn!("fit stopped at the iteration cap without converging");
    }

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "k,name,beta,p")?;
    for k in fit.selected(0.5) {
        writeln!(w, "{k},{},{},{}", x_columns[k], fit.state.beta[k], fit.state.p_incl[k])?;
    }
    let model = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        x_columns,
        v_mean_columns: loaded.v_mean_names,
        v_var_columns: loaded.v_var_names,
        mean_intercept_injected: loaded.validated.mean_intercept_injected,
        var_intercept_injected: loaded.validated.var_intercept_injected,
        screened,
        standardization,
        fit_config: cfg.fit,
        prior: cfg.prior,
        fit,
    };
    model.write(out)
}

fn design(table: &crate::io::Table, names: &[String], intercept: bool) -> Result<DMatrix<f64>> {
    let m = table.select(names)?;
    Ok(if intercept { m.insert_column(0, 1.0) } else { m })
}

fn predict_command(model_path: &Path, data: &Path, level: f64, out: Option<&Path>) -> Result<()> {
    let model = ModelFile::read(model_path)?;
    let table = read_table(data)?;
    let mut x = table.select(&model.x_columns)?;
    if let Some(s) = &model.standardization {
        x = s.apply(&x)?;
    }
    let v_mean = design(&table, &model.v_mean_columns, model.mean_intercept_injected)?;
    let v_var = design(&table, &model.v_var_columns, model.var_intercept_injected)?;
    let intervals = predict::predict_batch(&model.fit, &x, &v_mean, &v_var, level)?;

    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Data(format!("csv output: {e}"));
    w.write_record(["y_hat", "lower", "upper", "sigma2_new"]).map_err(csv_err)?;
    for pi in &intervals {
        w.write_record([pi.y_hat, pi.lower, pi.upper, pi.sigma2_new].map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate_command(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = SimFile::read(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let rows = sim::run_experiment(&cfg.sim, &cfg.methods, &cfg.fit, &cfg.prior, cfg.level)?;
    std::fs::create_dir_all(out)?;
    write_results(std::fs::File::create(out.join("results.csv"))?, &rows)?;
    write_seeds(std::fs::File::create(out.join("seeds.csv"))?, &rows)?;
    write_timing(std::fs::File::create(out.join("timing.csv"))?, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} fits failed; see the error column", rows.len());
    }
    Ok(())
}

/// Raw values of a named column from any of the loaded inputs.
fn candidate_column(loaded: &LoadedData, name: &str) -> Result<Vec<f64>> {
    let data = &loaded.validated.data;
    let lookup = |names: &[String], m: &DMatrix<f64>, offset: usize| {
        names
            .iter()
            .position(|h| h == name)
            .map(|k| m.column(k + offset).iter().copied().collect::<Vec<_>>())
    };
    let mean_offset = usize::from(loaded.validated.mean_intercept_injected);
    let var_offset = usize::from(loaded.validated.var_intercept_injected);
    lookup(&loaded.x_names, data.x(), 0)
        .or_else(|| lookup(&loaded.v_mean_names, data.v_mean(), mean_offset))
        .or_else(|| lookup(&loaded.v_var_names, data.v_var(), var_offset))
        .ok_or_else(|| Error::Data(format!("no input column named '{name}'")))
}

fn diagnose_command(model_path: &Path, args: &DataArgs, candidate: &str, out: &Path) -> Result<()> {
    let model = ModelFile::read(model_path)?;
    let loaded = load(args)?;
    let data = preprocess(&model, &loaded.validated.data)?;
    let values = candidate_column(&loaded, candidate)?;

    let mut fit = model.fit.clone();
    fit.state.w0 = ecm::e_step_moments(data.x(), &fit.state.beta, &fit.state.p_incl)?.w;
    let lsr = diagnostics::log_squared_residuals(&fit, &data);
    let groups = diagnostics::quartile_groups(&values)?;
    let test = diagnostics::brown_forsythe(&lsr, &groups)?;

    let mut w = csv::Writer::from_writer(std::fs::File::create(out)?);
    let csv_err = |e: csv::Error| Error::Data(format!("csv output: {e}"));
    w.write_record(["row", candidate, "log_sq_residual", "group"]).map_err(csv_err)?;
    for (i, ((v, r), g)) in values.iter().zip(&lsr).zip(&groups).enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string(), r.to_string(), g.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    let groups_used = groups.iter().max().map_or(0, |g| g + 1);
    println!(
        "brown_forsythe candidate={candidate} groups={groups_used} statistic={} p_value={}",
        test.statistic, test.p_value
    );
    Ok(())
}
