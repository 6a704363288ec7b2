//! Synthetic benchmark: spatially correlated predictors on a square grid,
//! clustered sparse signals, and noise whose log-variance is linear in a
//! mixed continuous/binary design.
//!
//! Each replicate draws from its own ChaCha stream seeded from the master
//! seed and the replicate index, so results do not depend on scheduling.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_dataset, FitConfig, FitResult, PriorConfig, RawData};
use crate::predict;

/// Variance of the shared per-row shift added to every predictor.
pub const ROW_SHIFT_VAR: f64 = 0.75;
const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Log-linear variance on the full variance design.
    Hprobe,
    /// Constant-variance baseline.
    Probe,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Hprobe => "hprobe",
            Method::Probe => "probe",
        }
    }
}

fn default_length_scale() -> f64 {
    20.0
}

fn default_replicates() -> usize {
    1
}

fn default_kind() -> PredictorKind {
    PredictorKind::Binary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Number of predictors; must be a perfect square.
    pub p: usize,
    /// Columns of the variance design including the intercept; odd.
    pub v: usize,
    pub seed: u64,
    pub pi_true: f64,
    pub eta_beta: f64,
    pub snr: f64,
    #[serde(default = "default_kind")]
    pub predictor_kind: PredictorKind,
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    #[serde(default = "default_replicates")]
    pub replicate_count: usize,
    /// Generate noise from the intercept alone; the fitted designs are unchanged.
    #[serde(default)]
    pub constant_noise: bool,
}

impl SimConfig {
    pub fn side(&self) -> usize {
        (self.p as f64).sqrt().round() as usize
    }

    pub fn signal_count(&self) -> usize {
        (self.p as f64 * self.pi_true).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.side();
        if self.p == 0 || side * side != self.p {
            return Err(Error::Config(format!("p = {} is not a perfect square", self.p)));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n must be >= 2, got {}", self.n)));
        }
        if self.v == 0 || self.v % 2 == 0 {
            return Err(Error::Config(format!(
                "v = {} must be odd: an intercept plus equal numbers of normal and Bernoulli columns",
                self.v
            )));
        }
        if !(self.pi_true > 0.0 && self.pi_true < 1.0) {
            return Err(Error::Config(format!("pi_true must lie in (0,1), got {}", self.pi_true)));
        }
        if self.signal_count() < 1 {
            return Err(Error::Config(format!(
                "p * pi_true = {} rounds to zero signals",
                self.p as f64 * self.pi_true
            )));
        }
        for (name, val) in [
            ("eta_beta", self.eta_beta),
            ("snr", self.snr),
            ("length_scale", self.length_scale),
        ] {
            if !(val > 0.0 && val.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {val}")));
            }
        }
        if self.replicate_count == 0 {
            return Err(Error::Config("replicate_count must be positive".into()));
        }
        Ok(())
    }
}

/// `exp(-||d_k - d_k'||^2 / l^2)` over a `side x side` grid, points in
/// row-major order.
pub fn grid_covariance(side: usize, length_scale: f64) -> DMatrix<f64> {
    let p = side * side;
    let coord = |k: usize| ((k / side) as f64, (k % side) as f64);
    DMatrix::from_fn(p, p, |a, b| {
        let (ra, ca) = coord(a);
        let (rb, cb) = coord(b);
        let d2 = (ra - rb).powi(2) + (ca - cb).powi(2);
        (-d2 / (length_scale * length_scale)).exp()
    })
}

/// Symmetric square root of the grid covariance, shared by all draws.
#[derive(Debug, Clone)]
pub struct GridSampler {
    /// `root * root = Sigma`.
    root: DMatrix<f64>,
}

impl GridSampler {
    pub fn new(side: usize, length_scale: f64) -> Result<Self> {
        let cov = grid_covariance(side, length_scale);
        let root = symmetric_root(&cov).or_else(|_| {
            log::warn!("grid covariance is not PSD; retrying with diagonal jitter");
            let p = cov.nrows();
            symmetric_root(&(cov + DMatrix::identity(p, p) * JITTER))
        })?;
        Ok(GridSampler { root })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    /// `rows` independent zero-mean draws, one per row.
    pub fn draw<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DMatrix<f64> {
        let z = DMatrix::from_fn(rows, self.dim(), |_, _| StandardNormal.sample(rng));
        z * &self.root
    }
}

fn symmetric_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let min = eig.eigenvalues.min();
    if min < 0.0 {
        return Err(Error::Factorization(format!(
            "covariance has eigenvalue {min:.3e} < 0"
        )));
    }
    let sqrt = eig.eigenvalues.map(f64::sqrt);
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
    let root = scaled * eig.eigenvectors.transpose();
    Ok((&root + root.transpose()) * 0.5)
}

pub fn generate_predictors<R: Rng + ?Sized>(
    cfg: &SimConfig,
    sampler: &GridSampler,
    rows: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut x = sampler.draw(rows, rng);
    let shift = Normal::new(0.0, ROW_SHIFT_VAR.sqrt()).expect("positive sd");
    for i in 0..rows {
        let a: f64 = shift.sample(rng);
        x.row_mut(i).add_scalar_mut(a);
    }
    if cfg.predictor_kind == PredictorKind::Binary {
        x.apply(|v| *v = if *v < 0.0 { 1.0 } else { 0.0 });
    }
    x
}

/// Inclusion indicators and slab values of the generating model.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub gamma: Vec<bool>,
    pub beta: Vec<f64>,
}

impl Truth {
    pub fn effects(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.beta)
            .map(|(&g, &b)| if g { b } else { 0.0 })
            .collect()
    }
}

/// The `round(p * pi)` largest sites of one correlated field are the signals
/// (ties to the lower index); every slab is `U(0, 2 eta)`.
pub fn generate_truth<R: Rng + ?Sized>(cfg: &SimConfig, sampler: &GridSampler, rng: &mut R) -> Truth {
    let field = sampler.draw(1, rng);
    let mut order: Vec<usize> = (0..cfg.p).collect();
    order.sort_by(|&a, &b| field[(0, b)].total_cmp(&field[(0, a)]).then(a.cmp(&b)));
    let mut gamma = vec![false; cfg.p];
    for &k in order.iter().take(cfg.signal_count()) {
        gamma[k] = true;
    }
    let slab = Uniform::new(0.0, 2.0 * cfg.eta_beta).expect("positive width");
    let beta = (0..cfg.p).map(|_| slab.sample(rng)).collect();
    Truth { gamma, beta }
}

/// Intercept, then alternating standard normal and Bernoulli(1/2) columns.
pub fn generate_variance_design<R: Rng + ?Sized>(rows: usize, v: usize, rng: &mut R) -> DMatrix<f64> {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut m = DMatrix::from_element(rows, v, 1.0);
    for i in 0..rows {
        for j in 1..v {
            m[(i, j)] = if j % 2 == 1 {
                StandardNormal.sample(rng)
            } else if coin.sample(rng) {
                1.0
            } else {
                0.0
            };
        }
    }
    m
}

fn signal(x: &DMatrix<f64>, truth: &Truth) -> DVector<f64> {
    x * DVector::from_vec(truth.effects())
}

fn sample_variance(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.mean();
    v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Common `omega_bar` with `s2_W / mean_i exp(-omega_bar * sum_j V_ij) = snr`,
/// where `s2_W` is the sample variance of `X (gamma * beta)`: the signal
/// variance over the average noise variance.
///
/// The ratio is log-concave in `omega_bar`; the root is taken on the branch
/// where it increases, so a larger `omega_bar` means less noise.
pub fn calibrate_omega_bar(
    x: &DMatrix<f64>,
    truth: &Truth,
    v_var: &DMatrix<f64>,
    target_snr: f64,
) -> Result<f64> {
    if !(target_snr > 0.0) {
        return Err(Error::InvalidArgument(format!("target SNR must be positive, got {target_snr}")));
    }
    let s2w = sample_variance(&signal(x, truth));
    if !(s2w > 0.0) {
        return Err(Error::InvalidArgument("signal X(gamma*beta) has zero variance".into()));
    }
    let sums: Vec<f64> = v_var.row_iter().map(|r| r.sum()).collect();
    let n = sums.len() as f64;
    let level = s2w / target_snr;
    // in u = -omega_bar: mean_i exp(u a_i) = s2_W / snr, convex in u
    let g = |u: f64| sums.iter().map(|a| (u * a).exp()).sum::<f64>() / n - level;
    let dg = |u: f64| sums.iter().map(|a| a * (u * a).exp()).sum::<f64>() / n;
    increasing_root(g, dg).map(|u| -u)
}

/// Root of a convex `g` on the branch where `dg > 0`.
fn increasing_root(g: impl Fn(f64) -> f64, dg: impl Fn(f64) -> f64) -> Result<f64> {
    const MAX_EXPAND: usize = 60;
    let bisect = |mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64| {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };

    // left end of the increasing branch, or a point on it with g <= 0
    let mut lo = 0.0;
    if dg(lo) <= 0.0 {
        let mut step = 1.0;
        let mut hi = lo + step;
        let mut k = 0;
        while dg(hi) <= 0.0 {
            k += 1;
            if k > MAX_EXPAND {
                return Err(Error::Bracket("objective never starts increasing".into()));
            }
            lo = hi;
            step *= 2.0;
            hi += step;
        }
        lo = bisect(lo, hi, &dg);
    } else if g(lo) > 0.0 {
        let mut step = 1.0;
        let mut k = 0;
        loop {
            let next = lo - step;
            if dg(next) <= 0.0 {
                lo = bisect(next, lo, &dg);
                break;
            }
            lo = next;
            if g(lo) <= 0.0 {
                break;
            }
            k += 1;
            if k > MAX_EXPAND {
                return Err(Error::Bracket("target below the reachable range".into()));
            }
            step *= 2.0;
        }
    }
    if g(lo) > 0.0 {
        return Err(Error::Bracket(format!(
            "target SNR is not reachable (closest miss {:.3e})",
            g(lo)
        )));
    }
    if g(lo) == 0.0 {
        return Ok(lo);
    }
    let mut step = 1.0;
    let mut hi = lo + step;
    let mut k = 0;
    while g(hi) < 0.0 {
        k += 1;
        if k > MAX_EXPAND {
            return Err(Error::Bracket("target above the reachable range".into()));
        }
        lo = hi;
        step *= 2.0;
        hi += step;
    }
    Ok(bisect(lo, hi, &g))
}

/// `y = X (gamma * beta) + e`, `e_i ~ N(0, exp(-omega_bar * sum_j V_ij))`.
pub fn generate_outcome<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    truth: &Truth,
    v_var: &DMatrix<f64>,
    omega_bar: f64,
    rng: &mut R,
) -> DVector<f64> {
    let mut y = signal(x, truth);
    for (i, row) in v_var.row_iter().enumerate() {
        let sd = (-omega_bar * row.sum()).exp().sqrt();
        let e: f64 = StandardNormal.sample(rng);
        y[i] += sd * e;
    }
    y
}

/// One simulated sample with its noiseless mean.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub x: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub y: DVector<f64>,
    pub signal: DVector<f64>,
}

fn draw_sample<R: Rng + ?Sized>(
    cfg: &SimConfig,
    sampler: &GridSampler,
    truth: &Truth,
    omega_bar: Option<f64>,
    rng: &mut R,
) -> Result<(SimSample, f64)> {
    let x = generate_predictors(cfg, sampler, cfg.n, rng);
    let v = generate_variance_design(cfg.n, cfg.v, rng);
    let noise_design = if cfg.constant_noise {
        v.columns(0, 1).into_owned()
    } else {
        v.clone()
    };
    let omega_bar = match omega_bar {
        Some(w) => w,
        None => calibrate_omega_bar(&x, truth, &noise_design, cfg.snr)?,
    };
    let y = generate_outcome(&x, truth, &noise_design, omega_bar, rng);
    let signal = signal(&x, truth);
    Ok((SimSample { x, v, y, signal }, omega_bar))
}

/// Scores of one fitted method on one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Median absolute error.
    pub mad: f64,
    pub tpr: f64,
    pub fdr: f64,
    pub ecp: f64,
    pub mean_pi_length: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// `(TPR, FDR)` of the selection `p > 0.5`. FDR is 0 when nothing is selected.
pub fn selection_rates(p_incl: &[f64], gamma: &[bool]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (&p, &g) in p_incl.iter().zip(gamma) {
        if p > 0.5 {
            if g {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let positives = gamma.iter().filter(|&&g| g).count();
    let tpr = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
    let fdr = if tp + fp == 0 { 0.0 } else { fp as f64 / (tp + fp) as f64 };
    (tpr, fdr)
}

pub fn compute_metrics(fit: &FitResult, truth: &Truth, test: &SimSample, level: f64) -> Result<Metrics> {
    let intervals = predict::predict_batch(fit, &test.x, &test.v, &test.v, level)?;
    let m = intervals.len() as f64;
    let errors: Vec<f64> = intervals
        .iter()
        .zip(test.signal.iter())
        .map(|(pi, s)| pi.y_hat - s)
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / m).sqrt();
    let mad = median(errors.iter().map(|e| e.abs()).collect());
    let covered = intervals
        .iter()
        .zip(test.y.iter())
        .filter(|(pi, &y)| pi.contains(y))
        .count();
    let mean_pi_length = intervals.iter().map(|pi| pi.width()).sum::<f64>() / m;
    let (tpr, fdr) = selection_rates(&fit.state.p_incl, &truth.gamma);
    Ok(Metrics {
        rmse,
        mad,
        tpr,
        fdr,
        ecp: covered as f64 / m,
        mean_pi_length,
    })
}

/// One (replicate, method) row of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    /// `None` when the fit failed; see `error`.
    pub metrics: Option<Metrics>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
    pub runtime_seconds: f64,
}

/// Seed of replicate `index`, by one splitmix64 step.
pub fn replicate_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generating parameters and samples of one replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub truth: Truth,
    pub omega_bar: f64,
    pub train: SimSample,
    pub test: SimSample,
}

pub fn generate_replicate(cfg: &SimConfig, sampler: &GridSampler, seed: u64) -> Result<Replicate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = generate_truth(cfg, sampler, &mut rng);
    let (train, omega_bar) = draw_sample(cfg, sampler, &truth, None, &mut rng)?;
    let (test, _) = draw_sample(cfg, sampler, &truth, Some(omega_bar), &mut rng)?;
    Ok(Replicate {
        truth,
        omega_bar,
        train,
        test,
    })
}

fn fit_method(
    method: Method,
    rep: &Replicate,
    fit_cfg: &FitConfig,
    prior: &PriorConfig,
) -> Result<FitResult> {
    let raw = RawData {
        y: rep.train.y.clone(),
        x: rep.train.x.clone(),
        v_mean: rep.train.v.clone(),
        v_var: None,
    };
    let data = validate_dataset(raw)?.data;
    let cfg = FitConfig {
        homoscedastic: method == Method::Probe,
        ..*fit_cfg
    };
    crate::ecm::fit(&data, &cfg, prior)
}

fn score(
    replicate: usize,
    seed: u64,
    method: Method,
    rep: &Result<Replicate>,
    fit_cfg: &FitConfig,
    prior: &PriorConfig,
    level: f64,
) -> ExperimentResult {
    let start = Instant::now();
    let outcome = rep.as_ref().map_err(|e| e.to_string()).and_then(|rep| {
        let fit = fit_method(method, rep, fit_cfg, prior).map_err(|e| e.to_string())?;
        let metrics = compute_metrics(&fit, &rep.truth, &rep.test, level).map_err(|e| e.to_string())?;
        Ok((fit, metrics))
    });
    let runtime_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((fit, metrics)) => ExperimentResult {
            replicate,
            seed,
            method,
            metrics: Some(metrics),
            converged: fit.converged,
            iterations: fit.state.t,
            error: None,
            runtime_seconds,
        },
        Err(e) => {
            log::warn!("replicate {replicate}, {}: {e}", method.label());
            ExperimentResult {
                replicate,
                seed,
                method,
                metrics: None,
                converged: false,
                iterations: 0,
                error: Some(e),
                runtime_seconds,
            }
        }
    }
}

/// Runs every replicate in parallel and fits each method to it. Rows come
/// back ordered by replicate, then by the order of `methods`.
pub fn run_experiment(
    cfg: &SimConfig,
    methods: &[Method],
    fit_cfg: &FitConfig,
    prior: &PriorConfig,
    level: f64,
) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    fit_cfg.validate()?;
    prior.validate()?;
    predict::critical_value(level)?;
    let sampler = GridSampler::new(cfg.side(), cfg.length_scale)?;
    let rows = (0..cfg.replicate_count)
        .into_par_iter()
        .flat_map_iter(|r| {
            let seed = replicate_seed(cfg.seed, r);
            let rep = generate_replicate(cfg, &sampler, seed);
            methods
                .iter()
                .map(|&m| score(r, seed, m, &rep, fit_cfg, prior, level))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(rows)
}
