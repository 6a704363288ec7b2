//! Domain types shared across the estimator and input validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated regression data set.
///
/// `x` holds the sparse-candidate predictors, `v_mean` the non-sparse mean
/// design and `v_var` the variance design. Both `v_mean` and `v_var` carry an
/// all-ones first column.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    y: DVector<f64>,
    x: DMatrix<f64>,
    v_mean: DMatrix<f64>,
    v_var: DMatrix<f64>,
}

impl DataSet {
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn v_mean(&self) -> &DMatrix<f64> {
        &self.v_mean
    }

    pub fn v_var(&self) -> &DMatrix<f64> {
        &self.v_var
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Returns a copy whose variance design is the intercept column alone.
    pub fn with_intercept_only_variance(&self) -> DataSet {
        DataSet {
            y: self.y.clone(),
            x: self.x.clone(),
            v_mean: self.v_mean.clone(),
            v_var: DMatrix::from_element(self.n(), 1, 1.0),
        }
    }

    /// Keeps only the listed columns of `x`, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<DataSet> {
        if columns.is_empty() {
            return Err(Error::InvalidArgument("empty column selection".into()));
        }
        if let Some(&bad) = columns.iter().find(|&&k| k >= self.p()) {
            return Err(Error::Dimension(format!(
                "column {bad} out of range for p = {}",
                self.p()
            )));
        }
        Ok(DataSet {
            y: self.y.clone(),
            x: self.x.select_columns(columns),
            v_mean: self.v_mean.clone(),
            v_var: self.v_var.clone(),
        })
    }

    pub fn into_raw(self) -> RawData {
        RawData {
            y: self.y,
            x: self.x,
            v_mean: self.v_mean,
            v_var: Some(self.v_var),
        }
    }
}

/// Unvalidated arrays as read from disk or produced by a generator.
#[derive(Debug, Clone)]
pub struct RawData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// May have zero columns; an intercept is injected when missing.
    pub v_mean: DMatrix<f64>,
    /// Defaults to `v_mean` when absent.
    pub v_var: Option<DMatrix<f64>>,
}

/// Output of [`validate_dataset`].
#[derive(Debug, Clone)]
pub struct Validated {
    pub data: DataSet,
    pub mean_intercept_injected: bool,
    pub var_intercept_injected: bool,
}

fn check_finite(what: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for k in 0..m.ncols() {
            if !m[(i, k)].is_finite() {
                return Err(Error::NonFinite { what, row: i, col: k });
            }
        }
    }
    Ok(())
}

fn has_intercept(m: &DMatrix<f64>) -> bool {
    m.ncols() > 0 && m.column(0).iter().all(|&v| v == 1.0)
}

fn with_intercept(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if has_intercept(&m) {
        (m, false)
    } else {
        (m.insert_column(0, 1.0), true)
    }
}

/// Checks dimensions and finiteness and injects missing intercept columns.
pub fn validate_dataset(raw: RawData) -> Result<Validated> {
    let n = raw.y.len();
    if n < 2 {
        return Err(Error::TooFewObservations(n));
    }
    let v_var = raw.v_var.unwrap_or_else(|| raw.v_mean.clone());
    for (name, rows) in [
        ("x", raw.x.nrows()),
        ("v_mean", raw.v_mean.nrows()),
        ("v_var", v_var.nrows()),
    ] {
        if rows != n {
            return Err(Error::Dimension(format!(
                "{name} has {rows} rows but y has {n}"
            )));
        }
    }
    if raw.x.ncols() == 0 {
        return Err(Error::Dimension("x has no columns (p >= 1 required)".into()));
    }
    for (i, v) in raw.y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "y", row: i, col: 0 });
        }
    }
    check_finite("x", &raw.x)?;
    check_finite("v_mean", &raw.v_mean)?;
    check_finite("v_var", &v_var)?;

    let (v_mean, mean_intercept_injected) = with_intercept(raw.v_mean);
    let (v_var, var_intercept_injected) = with_intercept(v_var);
    Ok(Validated {
        data: DataSet {
            y: raw.y,
            x: raw.x,
            v_mean,
            v_var,
        },
        mean_intercept_injected,
        var_intercept_injected,
    })
}

/// Indices (ascending) of the `m` columns of `x` with the largest absolute
/// Pearson correlation with `y`. Ties go to the lower index and zero-variance
/// columns rank last.
pub fn marginal_screen(data: &DataSet, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidArgument("screen size m must be >= 1".into()));
    }
    let p = data.p();
    if m >= p {
        return Ok((0..p).collect());
    }
    let y = data.y();
    let n = y.len() as f64;
    let y_mean = y.mean();
    let y_ss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();

    let mut scored: Vec<(usize, Option<f64>)> = (0..p)
        .map(|k| {
            let col = data.x().column(k);
            let x_mean = col.sum() / n;
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            for (xi, yi) in col.iter().zip(y.iter()) {
                let dx = xi - x_mean;
                sxx += dx * dx;
                sxy += dx * (yi - y_mean);
            }
            if sxx <= 0.0 {
                (k, None)
            } else if y_ss <= 0.0 {
                (k, Some(0.0))
            } else {
                (k, Some((sxy / (sxx * y_ss).sqrt()).abs()))
            }
        })
        .collect();

    scored.sort_by(|a, b| match (a.1, b.1) {
        (Some(ra), Some(rb)) => rb.total_cmp(&ra).then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    let mut keep: Vec<usize> = scored.into_iter().take(m).map(|(k, _)| k).collect();
    keep.sort_unstable();
    Ok(keep)
}

/// Hyperparameters of the multivariate log-gamma prior on the variance
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub c: f64,
    /// Zero gives a flat prior.
    pub sigma_omega_inv: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            c: 1000.0,
            sigma_omega_inv: 0.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c must be > 0, got {}", self.c)));
        }
        if !(self.sigma_omega_inv >= 0.0 && self.sigma_omega_inv.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_omega_inv must be >= 0, got {}",
                self.sigma_omega_inv
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Quantile level of the chi-square(1) stopping threshold.
    pub convergence_alpha: f64,
    /// Storey lambda.
    pub eb_lambda: f64,
    /// Lower clamp for the null proportion; `None` means 1/p.
    pub pi0_floor: Option<f64>,
    /// Forces an intercept-only variance design (the homoscedastic baseline).
    pub homoscedastic: bool,
    /// Running-average damping of the coefficient updates. Disabling it takes
    /// every CM-step estimate as is.
    pub damping: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 1000,
            convergence_alpha: 0.1,
            eb_lambda: 0.1,
            pi0_floor: None,
            homoscedastic: false,
            damping: true,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.convergence_alpha) {
            return Err(Error::Config(format!(
                "convergence_alpha must lie in (0,1), got {}",
                self.convergence_alpha
            )));
        }
        if !open_unit(self.eb_lambda) {
            return Err(Error::Config(format!(
                "eb_lambda must lie in (0,1), got {}",
                self.eb_lambda
            )));
        }
        if let Some(floor) = self.pi0_floor {
            if !(floor > 0.0 && floor <= 1.0) {
                return Err(Error::Config(format!(
                    "pi0_floor must lie in (0,1], got {floor}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_pi0_floor(&self, p: usize) -> f64 {
        self.pi0_floor.unwrap_or(1.0 / p as f64)
    }
}

/// All per-iteration quantities of the ECM loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    /// Slab coefficients, conditional on inclusion.
    pub beta: Vec<f64>,
    /// Posterior variances of the slab coefficients.
    pub s2: Vec<f64>,
    /// Posterior inclusion probabilities.
    pub p_incl: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha0: f64,
    pub omega: Vec<f64>,
    /// E[X(gamma*beta)] per observation.
    pub w0: Vec<f64>,
    /// Var[X(gamma*beta)] per observation.
    pub w0_var: Vec<f64>,
    pub t: usize,
}

/// Per-fit flags surfaced next to the estimates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// The loop stopped because every inclusion probability was zero.
    pub null_model: bool,
    /// Raw inclusion probabilities outside [0,1] in the final E-step.
    pub clamped_below: usize,
    pub clamped_above: usize,
    /// The kernel bandwidth fell back to 1 at least once.
    pub kde_bandwidth_fallback: bool,
    /// Some fitted variance hit the [1e-300, 1e300] clamp.
    pub sigma2_clamped: bool,
    /// Intercept-only variance design was forced.
    pub homoscedastic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    #[serde(with = "crate::io::float")]
    pub cc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state: FitState,
    /// Posterior covariance of (phi, alpha0), row-major, (v+1) x (v+1).
    pub psi: Vec<Vec<f64>>,
    /// exp(-V_var omega) per observation.
    pub sigma2: Vec<f64>,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let d = self.psi.len();
        DMatrix::from_fn(d, d, |i, j| self.psi[i][j])
    }

    /// Fitted mean V phi + alpha0 W0 on the training rows.
    pub fn fitted_values(&self, data: &DataSet) -> Vec<f64> {
        let phi = DVector::from_column_slice(&self.state.phi);
        let vphi = data.v_mean() * phi;
        vphi.iter()
            .zip(&self.state.w0)
            .map(|(a, w)| a + self.state.alpha0 * w)
            .collect()
    }

    pub fn selected(&self, threshold: f64) -> Vec<usize> {
        self.state
            .p_incl
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > threshold)
            .map(|(k, _)| k)
            .collect()
    }
}
