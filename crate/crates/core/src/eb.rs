//! Plug-in empirical Bayes estimates of the inclusion probabilities.
//!
//! Each coefficient yields a statistic `T_k = beta_k / S_k`. Nulls follow a
//! standard normal; the marginal density of all statistics is estimated with a
//! Gaussian kernel, and the null proportion with Storey's tail count. Then
//! `p_k = 1 - pi0 * phi(T_k) / f_hat(T_k)`, clamped to [0, 1].

use rayon::prelude::*;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn test_statistics(beta: &[f64], s2: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != s2.len() {
        return Err(Error::Dimension(format!(
            "beta has length {}, s2 has length {}",
            beta.len(),
            s2.len()
        )));
    }
    beta.iter()
        .zip(s2)
        .enumerate()
        .map(|(k, (&b, &s))| {
            if s > 0.0 {
                Ok(b / s.sqrt())
            } else {
                Err(Error::InvalidArgument(format!(
                    "posterior variance s2[{k}] = {s} must be positive"
                )))
            }
        })
        .collect()
}

/// `2 (1 - Phi(|t|))`, computed through `erfc` to keep precision in the tails.
pub fn two_sided_pvalues(t_stats: &[f64]) -> Vec<f64> {
    t_stats
        .iter()
        .map(|t| libm::erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
        .collect()
}

/// Storey's estimate of the null proportion, clamped to `[pi0_floor, 1]`.
pub fn storey_pi0(pvalues: &[f64], lambda: f64, pi0_floor: f64) -> Result<f64> {
    if pvalues.is_empty() {
        return Err(Error::InvalidArgument("no p-values".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in (0,1), got {lambda}"
        )));
    }
    let tail = pvalues.iter().filter(|&&p| p >= lambda).count() as f64;
    let raw = tail / (pvalues.len() as f64 * (1.0 - lambda));
    Ok(raw.clamp(pi0_floor, 1.0))
}

/// Gaussian kernel density estimate over a fixed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKde {
    sample: Vec<f64>,
    bandwidth: f64,
    /// The sample had no spread and the bandwidth fell back to 1.
    pub fallback: bool,
}

fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`; uses `sd` alone when the IQR is 0.
/// `None` when the sample has no spread.
pub fn silverman_bandwidth(sample: &[f64]) -> Option<f64> {
    let n = sample.len();
    if n < 2 {
        return None;
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return None;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_type7(&sorted, 0.75) - quantile_type7(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Some(0.9 * spread * (n as f64).powf(-0.2))
}

impl GaussianKde {
    pub fn new(sample: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if sample.is_empty() {
            return Err(Error::InvalidArgument("empty KDE sample".into()));
        }
        Ok(GaussianKde {
            sample,
            bandwidth,
            fallback: false,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .sample
            .iter()
            .map(|&s| std_normal_pdf((x - s) / h))
            .sum();
        sum / (self.sample.len() as f64 * h)
    }

    pub fn density_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.par_iter().map(|&x| self.density(x)).collect()
    }
}

/// Fits the KDE with the Silverman-type bandwidth.
pub fn gaussian_kde_fit(t_stats: &[f64]) -> Result<GaussianKde> {
    if t_stats.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "KDE needs at least 2 statistics, got {}",
            t_stats.len()
        )));
    }
    match silverman_bandwidth(t_stats) {
        Some(h) => GaussianKde::new(t_stats.to_vec(), h),
        None => {
            log::warn!("test statistics have no spread; KDE bandwidth set to 1");
            let mut kde = GaussianKde::new(t_stats.to_vec(), 1.0)?;
            kde.fallback = true;
            Ok(kde)
        }
    }
}

/// Inclusion probabilities with counts of raw values below 0 and above 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionProbs {
    pub p: Vec<f64>,
    pub clamped_below: usize,
    pub clamped_above: usize,
}

pub fn inclusion_probs(t_stats: &[f64], pi0_hat: f64, kde: &GaussianKde) -> InclusionProbs {
    let f_hat = kde.density_many(t_stats);
    inclusion_probs_from_density(t_stats, pi0_hat, &f_hat)
}

pub fn inclusion_probs_from_density(t_stats: &[f64], pi0_hat: f64, f_hat: &[f64]) -> InclusionProbs {
    let mut clamped_below = 0;
    let mut clamped_above = 0;
    let p = t_stats
        .iter()
        .zip(f_hat)
        .map(|(&t, &f)| {
            let raw = 1.0 - pi0_hat * std_normal_pdf(t) / f;
            if raw < 0.0 || raw.is_nan() {
                clamped_below += 1;
                0.0
            } else if raw > 1.0 {
                clamped_above += 1;
                1.0
            } else {
                raw
            }
        })
        .collect();
    InclusionProbs {
        p,
        clamped_below,
        clamped_above,
    }
}

/// Everything the E-step computes on its way to the inclusion probabilities.
#[derive(Debug, Clone)]
pub struct EbState {
    pub t_stats: Vec<f64>,
    pub pvalues: Vec<f64>,
    pub pi0_hat: f64,
    pub kde: GaussianKde,
    pub probs: InclusionProbs,
}

pub fn empirical_bayes(beta: &[f64], s2: &[f64], lambda: f64, pi0_floor: f64) -> Result<EbState> {
    let t_stats = test_statistics(beta, s2)?;
    let pvalues = two_sided_pvalues(&t_stats);
    let pi0_hat = storey_pi0(&pvalues, lambda, pi0_floor)?;
    let kde = gaussian_kde_fit(&t_stats)?;
    let probs = inclusion_probs(&t_stats, pi0_hat, &kde);
    Ok(EbState {
        t_stats,
        pvalues,
        pi0_hat,
        kde,
        probs,
    })
}
