//! Log-linear variance model.
//!
//! Observation variances follow `sigma2_i = exp(-V_i' omega)`. Given expected
//! squared residuals `r2_i`, the conditional posterior of `omega` has the
//! multivariate log-gamma form
//!
//! ```text
//! log f(omega) = c' H omega - kappa' exp(H omega) + const
//! ```
//!
//! with `H = [V_var ; c^{-1/2} sigma_omega^{-1} I]`, `c = (1/2 .. 1/2, c .. c)` and
//! `kappa = (r2/2, c .. c)`. The density is concave in `omega`, so its mode is
//! found with a dense BFGS iteration on the negated log density.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::PriorConfig;

/// Linear predictors beyond this bound are clipped before exponentiation.
pub const EXP_CLIP: f64 = 700.0;

pub const SIGMA2_MIN: f64 = 1e-300;
pub const SIGMA2_MAX: f64 = 1e300;

pub const DEFAULT_MAX_ITER: usize = 200;

/// Parameters of the MLG-form posterior of the variance coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MlgPosterior {
    h: DMatrix<f64>,
    c_vec: DVector<f64>,
    kappa: DVector<f64>,
    n_data: usize,
}

impl MlgPosterior {
    /// Builds the posterior from the variance design and the expected squared
    /// residual of each observation.
    pub fn new(v_var: &DMatrix<f64>, sq_resid: &[f64], prior: &PriorConfig) -> Result<Self> {
        prior.validate()?;
        let n = v_var.nrows();
        let d = v_var.ncols();
        if sq_resid.len() != n {
            return Err(Error::Dimension(format!(
                "{} squared residuals for {n} design rows",
                sq_resid.len()
            )));
        }
        let scale = prior.sigma_omega_inv / prior.c.sqrt();
        let mut h = DMatrix::zeros(n + d, d);
        h.view_mut((0, 0), (n, d)).copy_from(v_var);
        for j in 0..d {
            h[(n + j, j)] = scale;
        }
        let c_vec = DVector::from_fn(n + d, |i, _| if i < n { 0.5 } else { prior.c });
        let kappa = DVector::from_fn(n + d, |i, _| {
            if i < n {
                0.5 * sq_resid[i]
            } else {
                prior.c
            }
        });
        Self::from_parts(h, c_vec, kappa, n)
    }

    /// Assembles a posterior from explicit blocks. The first `n_data` rows are
    /// the likelihood rows, the rest prior rows.
    pub fn from_parts(
        h: DMatrix<f64>,
        c_vec: DVector<f64>,
        kappa: DVector<f64>,
        n_data: usize,
    ) -> Result<Self> {
        let rows = h.nrows();
        if c_vec.len() != rows || kappa.len() != rows || n_data > rows {
            return Err(Error::Dimension(format!(
                "H has {rows} rows, c has {}, kappa has {}, n_data = {n_data}",
                c_vec.len(),
                kappa.len()
            )));
        }
        if let Some(i) = kappa.iter().position(|&k| !(k >= 0.0) || !k.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kappa[{i}] = {} must be finite and non-negative",
                kappa[i]
            )));
        }
        if let Some(i) = (0..n_data).find(|&i| c_vec[i] != 0.5) {
            return Err(Error::InvalidArgument(format!(
                "likelihood row {i} has c = {} (must be 1/2)",
                c_vec[i]
            )));
        }
        Ok(MlgPosterior {
            h,
            c_vec,
            kappa,
            n_data,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn c_vec(&self) -> &DVector<f64> {
        &self.c_vec
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    fn check_dim(&self, omega: &DVector<f64>) -> Result<()> {
        if omega.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "omega has length {}, design has {} columns",
                omega.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Value and gradient with clipped exponentials. Returns the first row
    /// whose linear predictor exceeded the clip, if any.
    fn evaluate(&self, omega: &DVector<f64>) -> (f64, DVector<f64>, Option<usize>) {
        let (value, grad, overflow, _) = self.evaluate_scaled(omega);
        (value, grad, overflow)
    }

    /// Also returns the sum of absolute terms, which bounds the rounding
    /// error of the value.
    fn evaluate_scaled(&self, omega: &DVector<f64>) -> (f64, DVector<f64>, Option<usize>, f64) {
        let eta = &self.h * omega;
        let mut value = 0.0;
        let mut scale = 0.0;
        let mut weights = DVector::zeros(eta.len());
        let mut overflow = None;
        for (i, &e) in eta.iter().enumerate() {
            if e > EXP_CLIP && overflow.is_none() {
                overflow = Some(i);
            }
            let ex = e.clamp(-EXP_CLIP, EXP_CLIP).exp();
            value += self.c_vec[i] * e - self.kappa[i] * ex;
            scale += (self.c_vec[i] * e).abs() + self.kappa[i] * ex;
            if i >= self.n_data {
                // prior block normalized to vanish at omega = 0
                value += self.kappa[i];
                scale += self.kappa[i];
            }
            weights[i] = self.c_vec[i] - self.kappa[i] * ex;
        }
        let grad = self.h.tr_mul(&weights);
        (value, grad, overflow, scale)
    }
}

/// Log of the unnormalized posterior density of `omega`.
pub fn mlg_log_density(omega: &DVector<f64>, post: &MlgPosterior) -> Result<f64> {
    post.check_dim(omega)?;
    let (value, _, overflow) = post.evaluate(omega);
    match overflow {
        Some(row) => Err(Error::Overflow { row }),
        None => Ok(value),
    }
}

/// Analytic gradient `H'(c - kappa * exp(H omega))`.
pub fn mlg_gradient(omega: &DVector<f64>, post: &MlgPosterior) -> Result<DVector<f64>> {
    post.check_dim(omega)?;
    let (_, grad, overflow) = post.evaluate(omega);
    match overflow {
        Some(row) => Err(Error::Overflow { row }),
        None => Ok(grad),
    }
}

/// Result of [`omega_map`].
#[derive(Debug, Clone)]
pub struct OmegaFit {
    pub omega: DVector<f64>,
    pub iterations: usize,
    /// Infinity norm of the gradient at `omega`.
    pub grad_norm: f64,
    /// BFGS approximation of the inverse Hessian of `-log f`.
    pub inverse_hessian: DMatrix<f64>,
    /// A clipped exponential was met during the line search.
    pub clipped: bool,
}

impl OmegaFit {
    /// Approximate Hessian of `log f` at the mode (negative definite when the
    /// BFGS approximation is positive definite).
    pub fn hessian_approx(&self) -> Option<DMatrix<f64>> {
        self.inverse_hessian.clone().try_inverse().map(|m| -m)
    }
}

/// Posterior mode of `omega`, started from `init`, to `|grad|_inf <= tol`.
pub fn omega_map(init: &DVector<f64>, post: &MlgPosterior, tol: f64) -> Result<OmegaFit> {
    omega_map_with_cap(init, post, tol, DEFAULT_MAX_ITER)
}

pub fn omega_map_with_cap(
    init: &DVector<f64>,
    post: &MlgPosterior,
    tol: f64,
    max_iter: usize,
) -> Result<OmegaFit> {
    post.check_dim(init)?;
    let d = post.dim();
    let mut x = init.clone();
    // minimize F = -log f
    let (f0, g0, overflow) = post.evaluate(&x);
    if let Some(row) = overflow {
        return Err(Error::Overflow { row });
    }
    if !f0.is_finite() {
        return Err(Error::InvalidArgument(
            "log density is not finite at the initial value".into(),
        ));
    }
    let mut f = -f0;
    let mut g = -g0;
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut fresh = true;
    let mut clipped = false;
    let mut iterations = 0;

    while g.amax() > tol {
        if iterations == max_iter {
            return Err(Error::IterationCap {
                iterations,
                grad_norm: g.amax(),
                last: x.iter().copied().collect(),
            });
        }
        iterations += 1;

        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(d, d);
            fresh = true;
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        if fresh {
            let big = dir.amax();
            if big > 1.0 {
                dir /= big;
                slope /= big;
            }
        }

        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..80 {
            let trial = &x + step * &dir;
            if trial == x {
                break;
            }
            let (fv, gv, over, scale) = post.evaluate_scaled(&trial);
            if over.is_some() {
                clipped = true;
                step *= 0.5;
                continue;
            }
            let f_new = -fv;
            let g_new = -gv;
            let armijo = f_new <= f + 1e-4 * step * slope;
            // once the decrease is below rounding, accept any gradient reduction
            let flat = (f_new - f).abs() <= 1e-13 * (1.0 + scale) && g_new.amax() < g.amax();
            if f_new.is_finite() && (armijo || flat) {
                accepted = Some((trial, f_new, g_new));
                break;
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if !fresh {
                hinv = DMatrix::identity(d, d);
                fresh = true;
                continue;
            }
            return Err(Error::IterationCap {
                iterations,
                grad_norm: g.amax(),
                last: x.iter().copied().collect(),
            });
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                hinv = DMatrix::identity(d, d) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            hinv -= rho * (&s * hy.transpose() + &hy * s.transpose());
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose());
            fresh = false;
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    // hard overflow check at the returned point
    let (_, _, overflow) = post.evaluate(&x);
    if let Some(row) = overflow {
        return Err(Error::Overflow { row });
    }
    Ok(OmegaFit {
        grad_norm: g.amax(),
        omega: x,
        iterations,
        inverse_hessian: hinv,
        clipped,
    })
}

/// Per-observation variances `exp(-V_var omega)`, clamped to
/// `[SIGMA2_MIN, SIGMA2_MAX]`. The flag reports whether clamping occurred.
pub fn sigma2_from_omega(omega: &DVector<f64>, v_var: &DMatrix<f64>) -> Result<(Vec<f64>, bool)> {
    if omega.len() != v_var.ncols() {
        return Err(Error::Dimension(format!(
            "omega has length {}, variance design has {} columns",
            omega.len(),
            v_var.ncols()
        )));
    }
    let eta = v_var * omega;
    let mut clamped = false;
    let out = eta
        .iter()
        .map(|&e| {
            let s = (-e).exp();
            if !(SIGMA2_MIN..=SIGMA2_MAX).contains(&s) {
                clamped = true;
            }
            s.clamp(SIGMA2_MIN, SIGMA2_MAX)
        })
        .collect();
    Ok((out, clamped))
}
