//! Point predictions and heteroscedastic prediction intervals.
//!
//! For a new row with sparse predictors `x`, mean design `v` and variance
//! design `v_var`:
//!
//! ```text
//! y_hat   = v' phi + alpha0 * x'(p * beta)
//! V_sp    = sum_k x_k^2 (p_k S2_k + beta_k^2 p_k (1 - p_k))
//! var_par = z' Psi z + V_sp (Var(alpha0) + alpha0^2),   z = (v, x'(p * beta))
//! sigma2  = exp(-v_var' omega)
//! ```
//!
//! and the interval is `y_hat +- z_{(1+level)/2} sqrt(var_par + sigma2)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{FitDiagnostics, FitResult, FitState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub y_hat: f64,
    pub var_parametric: f64,
    pub sigma2_new: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl PredictionInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!(
            "{what} has {got} entries, the fit expects {want}"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x'(p * beta)`.
fn sparse_part(state: &FitState, x_row: &[f64]) -> f64 {
    x_row
        .iter()
        .zip(state.p_incl.iter().zip(&state.beta))
        .map(|(x, (p, b))| x * p * b)
        .sum()
}

pub fn predict_point(fit: &FitResult, x_row: &[f64], v_row: &[f64]) -> Result<f64> {
    let s = &fit.state;
    check_len("x row", x_row.len(), s.beta.len())?;
    check_len("mean design row", v_row.len(), s.phi.len())?;
    Ok(dot(v_row, &s.phi) + s.alpha0 * sparse_part(s, x_row))
}

/// `(var_parametric, sigma2_new)`. A homoscedastic fit ignores `v_var_row`.
pub fn predictive_variance(
    fit: &FitResult,
    x_row: &[f64],
    v_row: &[f64],
    v_var_row: &[f64],
) -> Result<(f64, f64)> {
    let s = &fit.state;
    check_len("x row", x_row.len(), s.beta.len())?;
    check_len("mean design row", v_row.len(), s.phi.len())?;
    let d = s.phi.len() + 1;
    if fit.psi.len() != d || fit.psi.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension(format!(
            "psi must be {d} x {d} for {} mean columns",
            s.phi.len()
        )));
    }

    let mut z = v_row.to_vec();
    z.push(sparse_part(s, x_row));
    let quad: f64 = (0..d)
        .map(|i| z[i] * dot(&fit.psi[i], &z))
        .sum();
    let v_sparse: f64 = x_row
        .iter()
        .zip(s.p_incl.iter().zip(s.beta.iter().zip(&s.s2)))
        .map(|(x, (p, (b, s2)))| x * x * (p * s2 + b * b * p * (1.0 - p)))
        .sum();
    let var_alpha = fit.psi[d - 1][d - 1];
    let var_parametric = (quad + v_sparse * (var_alpha + s.alpha0 * s.alpha0)).max(0.0);

    let eta = if fit.diagnostics.homoscedastic {
        s.omega[0]
    } else {
        check_len("variance design row", v_var_row.len(), s.omega.len())?;
        dot(v_var_row, &s.omega)
    };
    let sigma2_new = (-eta).exp().clamp(crate::variance::SIGMA2_MIN, crate::variance::SIGMA2_MAX);
    Ok((var_parametric, sigma2_new))
}

/// Two-sided standard normal critical value for `level`.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level must lie in (0,1), got {level}"
        )));
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(std.inverse_cdf(0.5 * (1.0 + level)))
}

pub fn prediction_interval(
    fit: &FitResult,
    x_row: &[f64],
    v_row: &[f64],
    v_var_row: &[f64],
    level: f64,
) -> Result<PredictionInterval> {
    let z = critical_value(level)?;
    let y_hat = predict_point(fit, x_row, v_row)?;
    let (var_parametric, sigma2_new) = predictive_variance(fit, x_row, v_row, v_var_row)?;
    let half = z * (var_parametric + sigma2_new).sqrt();
    Ok(PredictionInterval {
        y_hat,
        var_parametric,
        sigma2_new,
        lower: y_hat - half,
        upper: y_hat + half,
        level,
    })
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Intervals for every row of the new design matrices, in row order.
pub fn predict_batch(
    fit: &FitResult,
    x: &DMatrix<f64>,
    v_mean: &DMatrix<f64>,
    v_var: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<PredictionInterval>> {
    let m = x.nrows();
    if v_mean.nrows() != m || v_var.nrows() != m {
        return Err(Error::Dimension(format!(
            "new data has {m} rows in x, {} in v_mean, {} in v_var",
            v_mean.nrows(),
            v_var.nrows()
        )));
    }
    (0..m)
        .into_par_iter()
        .map(|i| prediction_interval(fit, &row(x, i), &row(v_mean, i), &row(v_var, i), level))
        .collect()
}

/// A fit carrying known parameters: `p` is the inclusion indicator, `S2` and
/// `Psi` are zero. Intervals from it reflect the noise variance alone.
pub fn fit_from_parameters(gamma: &[bool], beta: &[f64], phi: &[f64], omega: &[f64]) -> Result<FitResult> {
    check_len("gamma", gamma.len(), beta.len())?;
    if phi.is_empty() || omega.is_empty() {
        return Err(Error::Dimension("phi and omega need at least one entry".into()));
    }
    let d = phi.len() + 1;
    Ok(FitResult {
        state: FitState {
            beta: beta.to_vec(),
            s2: vec![0.0; beta.len()],
            p_incl: gamma.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect(),
            phi: phi.to_vec(),
            alpha0: 1.0,
            omega: omega.to_vec(),
            w0: Vec::new(),
            w0_var: Vec::new(),
            t: 0,
        },
        psi: vec![vec![0.0; d]; d],
        sigma2: Vec::new(),
        converged: true,
        trace: Vec::new(),
        diagnostics: FitDiagnostics::default(),
    })
}
