//! Partitioned, parameter-expanded ECM loop.
//!
//! One iteration runs, in order:
//!
//! 1. the overall CM-step for `(phi, alpha0)` on `Z0 = (V, W0)`, then the
//!    variance coefficients `omega` given the updated mean;
//! 2. one coordinate CM-step per predictor on `Z_k = (X_k, W_k)`, where `W_k`
//!    is the fitted contribution of everything except predictor `k`;
//! 3. the E-step: running-average damping of `(beta, S2)`, empirical Bayes
//!    inclusion probabilities and the moments of `W0 = X (gamma * beta)`;
//! 4. the convergence check on the change in `W0`.
//!
//! The coordinate steps only read the state frozen at the previous E-step, so
//! they run in parallel; each one sums sequentially, so results do not depend
//! on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::eb;
use crate::error::{Error, Result};
use crate::model::{DataSet, FitConfig, FitDiagnostics, FitResult, FitState, PriorConfig, TracePoint};
use crate::variance::{self, MlgPosterior};

/// A column of `E[W]` with its elementwise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub w: Vec<f64>,
    pub w_var: Vec<f64>,
}

impl MomentPair {
    pub fn zeros(n: usize) -> Self {
        MomentPair {
            w: vec![0.0; n],
            w_var: vec![0.0; n],
        }
    }

    /// `max_i E[W_i^2]`.
    pub fn max_second_moment(&self) -> f64 {
        self.w
            .iter()
            .zip(&self.w_var)
            .map(|(w, v)| v + w * w)
            .fold(0.0, f64::max)
    }
}

/// Below this `max E[W^2]` the W column is treated as identically zero.
pub const DEGENERATE_W: f64 = 1e-12;

/// Reciprocal condition number under which a normal matrix counts as singular.
pub const MIN_RCOND: f64 = 1e-14;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// First two moments of `X (gamma * beta)` over independent
/// `gamma_k ~ Bernoulli(p_k)`.
pub fn e_step_moments(x: &DMatrix<f64>, beta: &[f64], p_incl: &[f64]) -> Result<MomentPair> {
    check_len("beta", beta.len(), x.ncols())?;
    check_len("p_incl", p_incl.len(), x.ncols())?;
    Ok(moments_from_columns(x.as_slice(), None, x.nrows(), beta, p_incl))
}

/// Same as [`e_step_moments`], optionally reusing a precomputed `X∘X`.
fn moments_from_columns(
    x: &[f64],
    x_sq: Option<&[f64]>,
    n: usize,
    beta: &[f64],
    p_incl: &[f64],
) -> MomentPair {
    let mut out = MomentPair::zeros(n);
    for (k, (&b, &p)) in beta.iter().zip(p_incl).enumerate() {
        let mean_coef = b * p;
        let var_coef = b * b * p * (1.0 - p);
        if mean_coef == 0.0 && var_coef == 0.0 {
            continue;
        }
        let col = &x[k * n..(k + 1) * n];
        for i in 0..n {
            out.w[i] += col[i] * mean_coef;
        }
        if var_coef != 0.0 {
            match x_sq {
                Some(sq) => {
                    let col_sq = &sq[k * n..(k + 1) * n];
                    for i in 0..n {
                        out.w_var[i] += col_sq[i] * var_coef;
                    }
                }
                None => {
                    for i in 0..n {
                        out.w_var[i] += col[i] * col[i] * var_coef;
                    }
                }
            }
        }
    }
    out
}

/// Moments of `W_k = V phi + alpha0 * X_{-k}(gamma * beta)_{-k}` obtained by
/// removing predictor `k` from the overall moments.
pub fn leave_one_out_moments(
    w0: &MomentPair,
    x_k: &[f64],
    beta_k: f64,
    p_k: f64,
    v_phi_fitted: &[f64],
    alpha0: f64,
) -> MomentPair {
    let mean_coef = beta_k * p_k;
    let var_coef = beta_k * beta_k * p_k * (1.0 - p_k);
    let a2 = alpha0 * alpha0;
    let w = w0
        .w
        .iter()
        .zip(x_k)
        .zip(v_phi_fitted)
        .map(|((w, x), vp)| vp + alpha0 * (w - x * mean_coef))
        .collect();
    let w_var = w0
        .w_var
        .iter()
        .zip(x_k)
        .map(|(v, x)| a2 * (v - x * x * var_coef).max(0.0))
        .collect();
    MomentPair { w, w_var }
}

/// Estimates from one coordinate CM-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateStep {
    pub beta: f64,
    pub alpha: f64,
    /// Sandwich variance of `beta`.
    pub s2: f64,
    /// The W column was numerically zero and `alpha` was fixed at 1.
    pub degenerate: bool,
}

fn rcond_sym(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.amax();
    if max == 0.0 {
        return 0.0;
    }
    eig.min().max(0.0) / max
}

/// MAP of `(beta_k, alpha_k)` under `E[Y | W_k] = X_k beta_k + W_k alpha_k`
/// with precision weights `sigma2_inv`, plus the sandwich variance of
/// `beta_k`. The normal matrix uses `E[W^2]`, the middle factor of the
/// sandwich uses `E[W]^2`.
pub fn cm_step_coordinate(
    x_k: &[f64],
    wk: &MomentPair,
    sigma2_inv: &[f64],
    y: &[f64],
) -> Result<CoordinateStep> {
    let n = y.len();
    check_len("x_k", x_k.len(), n)?;
    check_len("w_k", wk.w.len(), n)?;
    check_len("w_k variance", wk.w_var.len(), n)?;
    check_len("sigma2_inv", sigma2_inv.len(), n)?;

    let mut xx = 0.0;
    let mut xw = 0.0;
    let mut ww2 = 0.0;
    let mut wvar = 0.0;
    let mut xy = 0.0;
    let mut wy = 0.0;
    let mut max_w2 = 0.0f64;
    for i in 0..n {
        let s = sigma2_inv[i];
        let x = x_k[i];
        let w = wk.w[i];
        let second = wk.w_var[i] + w * w;
        max_w2 = max_w2.max(second);
        xx += x * x * s;
        xw += x * w * s;
        ww2 += second * s;
        wvar += wk.w_var[i] * s;
        xy += x * y[i] * s;
        wy += w * y[i] * s;
    }

    if !(xx > 0.0) {
        return Err(Error::Singular {
            context: "coordinate step (zero predictor column)".into(),
            rcond: 0.0,
        });
    }
    if max_w2 < DEGENERATE_W {
        return Ok(CoordinateStep {
            beta: xy / xx,
            alpha: 1.0,
            s2: 1.0 / xx,
            degenerate: true,
        });
    }

    let a = DMatrix::from_row_slice(2, 2, &[xx, xw, xw, ww2]);
    let rcond = rcond_sym(&a);
    if rcond < MIN_RCOND {
        return Err(Error::Singular {
            context: "coordinate step".into(),
            rcond,
        });
    }
    let det = xx * ww2 - xw * xw;
    let inv = [[ww2 / det, -xw / det], [-xw / det, xx / det]];
    let beta = inv[0][0] * xy + inv[0][1] * wy;
    let alpha = inv[1][0] * xy + inv[1][1] * wy;
    // B = A - diag(0, sum w_var / sigma2); (A^-1 B A^-1)_11 = inv_11 - inv_12^2 * wvar
    let s2 = inv[0][0] - inv[0][1] * inv[0][1] * wvar;
    Ok(CoordinateStep {
        beta,
        alpha,
        s2,
        degenerate: false,
    })
}

/// Estimates from the overall CM-step.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallStep {
    pub phi: Vec<f64>,
    pub alpha0: f64,
    /// Sandwich covariance of `(phi, alpha0)`.
    pub psi: DMatrix<f64>,
    pub degenerate: bool,
}

/// MAP of `(phi, alpha0)` under `E[Y | W0] = V phi + alpha0 W0` and the
/// sandwich covariance `A^-1 B A^-1`.
pub fn cm_step_overall(
    v_mean: &DMatrix<f64>,
    w0: &MomentPair,
    sigma2_inv: &[f64],
    y: &[f64],
) -> Result<OverallStep> {
    let n = y.len();
    let v = v_mean.ncols();
    check_len("v_mean rows", v_mean.nrows(), n)?;
    check_len("w0", w0.w.len(), n)?;
    check_len("w0 variance", w0.w_var.len(), n)?;
    check_len("sigma2_inv", sigma2_inv.len(), n)?;

    let degenerate = w0.max_second_moment() < DEGENERATE_W;
    let d = if degenerate { v } else { v + 1 };
    let z = |i: usize, j: usize| if j < v { v_mean[(i, j)] } else { w0.w[i] };

    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut wvar = 0.0;
    for i in 0..n {
        let s = sigma2_inv[i];
        for j in 0..d {
            let zj = z(i, j) * s;
            rhs[j] += zj * y[i];
            for l in 0..=j {
                a[(j, l)] += zj * z(i, l);
            }
        }
        if !degenerate {
            a[(v, v)] += w0.w_var[i] * s;
            wvar += w0.w_var[i] * s;
        }
    }
    for j in 0..d {
        for l in 0..j {
            a[(l, j)] = a[(j, l)];
        }
    }

    let rcond = rcond_sym(&a);
    let chol = match a.clone().cholesky() {
        Some(c) if rcond >= MIN_RCOND => c,
        _ => {
            return Err(Error::Singular {
                context: "overall step".into(),
                rcond,
            })
        }
    };
    let coef = chol.solve(&rhs);
    let a_inv = chol.inverse();
    let mut b = a;
    if !degenerate {
        b[(v, v)] -= wvar;
    }
    let sandwich = &a_inv * b * &a_inv;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;

    let mut psi = DMatrix::zeros(v + 1, v + 1);
    psi.view_mut((0, 0), (d, d)).copy_from(&sandwich);
    let phi = coef.rows(0, v).iter().copied().collect();
    let alpha0 = if degenerate { 1.0 } else { coef[v] };
    Ok(OverallStep {
        phi,
        alpha0,
        psi,
        degenerate,
    })
}

/// Damped update with learning rate `q = 1/(t+1)`: a convex combination of the
/// coefficients and a harmonic (precision-weighted) combination of variances.
pub fn apply_learning_rate(
    prev_beta: &[f64],
    new_beta: &[f64],
    prev_s2: &[f64],
    new_s2: &[f64],
    t: usize,
) -> (Vec<f64>, Vec<f64>) {
    let q = 1.0 / (t as f64 + 1.0);
    let beta = prev_beta
        .iter()
        .zip(new_beta)
        .map(|(b0, b1)| (1.0 - q) * b0 + q * b1)
        .collect();
    let s2 = prev_s2
        .iter()
        .zip(new_s2)
        .map(|(s0, s1)| 1.0 / ((1.0 - q) / s0 + q / s1))
        .collect();
    (beta, s2)
}

/// Chi-square(1) quantile at `alpha`.
pub fn convergence_threshold(alpha: f64) -> f64 {
    ChiSquared::new(1.0)
        .expect("one degree of freedom")
        .inverse_cdf(alpha)
}

/// `CC = log(n) * max_i (dW_i)^2 / Var(W_i)`; rows with zero variance are
/// skipped unless `W_i` moved, which makes `CC` infinite.
pub fn convergence_check(
    w0_new: &[f64],
    w0_old: &[f64],
    w0_var_new: &[f64],
    n: usize,
    alpha: f64,
) -> (f64, bool) {
    let mut worst = 0.0f64;
    for ((a, b), v) in w0_new.iter().zip(w0_old).zip(w0_var_new) {
        let d2 = (a - b) * (a - b);
        if *v > 0.0 {
            worst = worst.max(d2 / v);
        } else if d2 > 0.0 {
            worst = f64::INFINITY;
        }
    }
    let cc = (n as f64).ln() * worst;
    (cc, cc < convergence_threshold(alpha))
}

fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Expected squared residual per observation, over the inclusion indicators:
/// `(y - V phi - alpha0 W0)^2 + alpha0^2 Var(W0)`.
pub fn expected_sq_residuals(y: &[f64], v_phi: &[f64], alpha0: f64, w0: &MomentPair) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let r = y[i] - v_phi[i] - alpha0 * w0.w[i];
            r * r + alpha0 * alpha0 * w0.w_var[i]
        })
        .collect()
}

fn invert_all(sigma2: &[f64]) -> Vec<f64> {
    sigma2.iter().map(|s| 1.0 / s).collect()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

fn psi_rows(psi: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..psi.nrows())
        .map(|i| psi.row(i).iter().copied().collect())
        .collect()
}

/// Fits the model by MAP estimation.
///
/// Starts from `beta = 0`, `p = 0` (so `W0 = 0`) and an intercept-only
/// variance at the sample variance of `y`. Stops when the convergence
/// statistic drops below the chi-square threshold, when every inclusion
/// probability is zero (reported as a null model), or at the iteration cap.
pub fn fit(data: &DataSet, cfg: &FitConfig, prior: &PriorConfig) -> Result<FitResult> {
    cfg.validate()?;
    prior.validate()?;
    let forced;
    let data = if cfg.homoscedastic {
        forced = data.with_intercept_only_variance();
        &forced
    } else {
        data
    };

    let n = data.n();
    let p = data.p();
    let x = data.x().as_slice();
    let x_sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let y = data.y().as_slice();
    let v_mean = data.v_mean();
    let v_var = data.v_var();
    let pi0_floor = cfg.resolved_pi0_floor(p);
    let omega_tol = 1e-8 * n as f64;

    let mut beta = vec![0.0; p];
    let mut s2 = vec![1.0; p];
    let mut p_incl = vec![0.0; p];
    let mut w0 = MomentPair::zeros(n);
    let mut omega = DVector::<f64>::zeros(v_var.ncols());
    let s2_y = sample_variance(y);
    if s2_y > 0.0 {
        omega[0] = -s2_y.ln();
    }
    let (mut sigma2, mut sigma2_clamped) = variance::sigma2_from_omega(&omega, v_var)?;

    let mut diag = FitDiagnostics {
        homoscedastic: cfg.homoscedastic,
        ..FitDiagnostics::default()
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut t = 0;

    while t < cfg.max_iterations {
        t += 1;
        let step = (|| -> Result<bool> {
            // overall CM-step, then the variance model
            let overall = cm_step_overall(v_mean, &w0, &invert_all(&sigma2), y)?;
            let v_phi = mat_vec(v_mean, &overall.phi);
            let sq = expected_sq_residuals(y, &v_phi, overall.alpha0, &w0);
            let post = MlgPosterior::new(v_var, &sq, prior)?;
            let om = variance::omega_map(&omega, &post, omega_tol)?;
            omega = om.omega;
            let (s, clamped) = variance::sigma2_from_omega(&omega, v_var)?;
            sigma2 = s;
            sigma2_clamped |= clamped;
            let sigma2_inv = invert_all(&sigma2);

            // coordinate CM-steps against the frozen E-step state
            let alpha0 = overall.alpha0;
            let steps = (0..p)
                .into_par_iter()
                .map(|k| {
                    let x_k = &x[k * n..(k + 1) * n];
                    let wk = leave_one_out_moments(&w0, x_k, beta[k], p_incl[k], &v_phi, alpha0);
                    cm_step_coordinate(x_k, &wk, &sigma2_inv, y)
                })
                .collect::<Result<Vec<_>>>()?;
            let beta_hat: Vec<f64> = steps.iter().map(|s| s.beta).collect();
            let s2_hat: Vec<f64> = steps.iter().map(|s| s.s2).collect();
            if let Some(k) = s2_hat.iter().position(|&v| !(v > 0.0)) {
                return Err(Error::Singular {
                    context: format!("non-positive posterior variance for predictor {k}"),
                    rcond: 0.0,
                });
            }

            // E-step
            if t == 1 || !cfg.damping {
                beta = beta_hat;
                s2 = s2_hat;
            } else {
                // q = 1/t keeps a running average of the CM-step estimates
                (beta, s2) = apply_learning_rate(&beta, &beta_hat, &s2, &s2_hat, t - 1);
            }
            let eb = eb::empirical_bayes(&beta, &s2, cfg.eb_lambda, pi0_floor)?;
            diag.kde_bandwidth_fallback |= eb.kde.fallback;
            diag.clamped_below = eb.probs.clamped_below;
            diag.clamped_above = eb.probs.clamped_above;
            p_incl = eb.probs.p;
            let w0_new = moments_from_columns(x, Some(&x_sq), n, &beta, &p_incl);

            let (cc, done) =
                convergence_check(&w0_new.w, &w0.w, &w0_new.w_var, n, cfg.convergence_alpha);
            trace.push(TracePoint { t, cc });
            w0 = w0_new;
            Ok(done)
        })()
        .map_err(|e| e.at_iteration(t))?;

        if p_incl.iter().all(|&v| v == 0.0) {
            diag.null_model = true;
            converged = true;
            break;
        }
        if step {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("no convergence after {} iterations", cfg.max_iterations);
    }

    // refresh (phi, alpha0, psi) against the final moments and variances
    let final_step = cm_step_overall(v_mean, &w0, &invert_all(&sigma2), y)
        .map_err(|e| e.at_iteration(t))?;
    diag.sigma2_clamped = sigma2_clamped;

    Ok(FitResult {
        state: FitState {
            beta,
            s2,
            p_incl,
            phi: final_step.phi,
            alpha0: final_step.alpha0,
            omega: omega.iter().copied().collect(),
            w0: w0.w,
            w0_var: w0.w_var,
            t,
        },
        psi: psi_rows(&final_step.psi),
        sigma2,
        converged,
        trace,
        diagnostics: diag,
    })
}
