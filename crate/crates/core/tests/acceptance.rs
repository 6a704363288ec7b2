//! Acceptance criteria. Each test prints one PASS/FAIL line; run with
//! `cargo test --release --test acceptance -- --nocapture` to see them.

use std::sync::OnceLock;
use std::time::Instant;

use hprobe::ecm::{cm_step_coordinate, cm_step_overall, e_step_moments, MomentPair};
use hprobe::model::{validate_dataset, FitConfig, PriorConfig, RawData};
use hprobe::predict::{critical_value, fit_from_parameters, predict_batch, prediction_interval};
use hprobe::sim::{run_experiment, ExperimentResult, Method, PredictorKind, SimConfig};
use hprobe::variance::{mlg_gradient, mlg_log_density, omega_map, MlgPosterior};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, pass: bool, detail: &str) {
    println!("criterion {id:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// (Z' S Z)^-1 Z' S y with S = diag(w), by dense LU.
fn gls(z: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let s = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let zt = z.transpose();
    (&zt * &s * z).lu().solve(&(&zt * &s * DVector::from_column_slice(y))).unwrap()
}

#[test]
fn c01_cm_steps_match_gls() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(5..=50);
        let v = rng.random_range(1..=4);
        let w_inv: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let xk: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let w = MomentPair { w: (0..n).map(|_| normal(&mut rng)).collect(), w_var: vec![0.0; n] };

        let step = cm_step_coordinate(&xk, &w, &w_inv, &y).unwrap();
        let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { xk[i] } else { w.w[i] });
        let o = gls(&z, &w_inv, &y);
        worst = worst.max((step.beta - o[0]).abs()).max((step.alpha - o[1]).abs());

        let vm = DMatrix::from_fn(n, v, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let overall = cm_step_overall(&vm, &w, &w_inv, &y).unwrap();
        let z0 = DMatrix::from_fn(n, v + 1, |i, j| if j < v { vm[(i, j)] } else { w.w[i] });
        let o = gls(&z0, &w_inv, &y);
        for j in 0..v {
            worst = worst.max((overall.phi[j] - o[j]).abs());
        }
        worst = worst.max((overall.alpha0 - o[v]).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    report(1, pass, &format!("200 instances, max abs error {worst:.2e} (<= 1e-10), {secs:.2} s (< 10 s)"));
    assert!(pass);
}

#[test]
fn c02_moments_match_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for p in 1..=12usize {
        for _ in 0..3 {
            let n = 6;
            let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
            let beta: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
            let pr: Vec<f64> = (0..p)
                .map(|k| match k % 4 {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random_range(0.0..1.0),
                })
                .collect();
            let m = e_step_moments(&x, &beta, &pr).unwrap();
            for i in 0..n {
                let mut mean = 0.0;
                let mut second = 0.0;
                for mask in 0u32..(1 << p) {
                    let mut prob = 1.0;
                    let mut val = 0.0;
                    for k in 0..p {
                        if mask >> k & 1 == 1 {
                            prob *= pr[k];
                            val += x[(i, k)] * beta[k];
                        } else {
                            prob *= 1.0 - pr[k];
                        }
                    }
                    mean += prob * val;
                    second += prob * val * val;
                }
                let var = second - mean * mean;
                worst = worst.max((m.w[i] - mean).abs()).max((m.w_var[i] - var).abs());
            }
            instances += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && secs < 30.0;
    report(2, pass, &format!("{instances} instances (p <= 12), max abs error {worst:.2e} (<= 1e-12), {secs:.2} s (< 30 s)"));
    assert!(pass);
}

#[test]
fn c03_omega_optimizer() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let flat = PriorConfig::default();

    let mut closed_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=200);
        let sq: Vec<f64> = (0..n).map(|_| normal(&mut rng).powi(2) * rng.random_range(0.1..10.0) + 1e-6).collect();
        let post = MlgPosterior::new(&DMatrix::from_element(n, 1, 1.0), &sq, &flat).unwrap();
        let fit = omega_map(&DVector::zeros(1), &post, 1e-9).unwrap();
        let rss: f64 = sq.iter().sum();
        closed_err = closed_err.max((fit.omega[0] - (n as f64 / rss).ln()).abs());
    }

    let mut fd_err = 0.0f64;
    let mut terminal = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(20..=200);
        let d = rng.random_range(2..=5);
        let vv = DMatrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let sq: Vec<f64> = (0..n)
            .map(|i| {
                let eta: f64 = (0..d).map(|j| vv[(i, j)] * truth[j]).sum();
                (-eta).exp() * normal(&mut rng).powi(2) + 1e-8
            })
            .collect();
        let post = MlgPosterior::new(&vv, &sq, &flat).unwrap();

        let at = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let g = mlg_gradient(&at, &post).unwrap();
        for j in 0..d {
            let h = 1e-5;
            let mut up = at.clone();
            up[j] += h;
            let mut dn = at.clone();
            dn[j] -= h;
            let fd = (mlg_log_density(&up, &post).unwrap() - mlg_log_density(&dn, &post).unwrap()) / (2.0 * h);
            fd_err = fd_err.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }

        let fit = omega_map(&DVector::zeros(d), &post, 1e-6).unwrap();
        terminal = terminal.max(mlg_gradient(&fit.omega, &post).unwrap().amax());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = closed_err <= 1e-6 && fd_err <= 1e-5 && terminal <= 1e-6 && secs < 20.0;
    report(
        3,
        pass,
        &format!(
            "closed form error {closed_err:.2e} (<= 1e-6), gradient vs central differences {fd_err:.2e} \
             (<= 1e-5 relative, floor 1), terminal |grad|_inf {terminal:.2e} (<= 1e-6), {secs:.2} s (< 20 s)"
        ),
    );
    assert!(pass);
}

const REPLICATES: usize = 100;
const PAIRED: usize = 50;

fn experiment_config() -> SimConfig {
    SimConfig {
        n: 400,
        p: 400,
        v: 3,
        seed: 2024,
        pi_true: 0.05,
        eta_beta: 0.8,
        snr: 2.0,
        predictor_kind: PredictorKind::Binary,
        length_scale: 20.0,
        replicate_count: REPLICATES,
        constant_noise: false,
    }
}

/// One shared run of the simulation setting used by criteria 4 to 6.
fn experiment() -> &'static (Vec<ExperimentResult>, f64) {
    static RUN: OnceLock<(Vec<ExperimentResult>, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let rows = run_experiment(
            &experiment_config(),
            &[Method::Hprobe, Method::Probe],
            &FitConfig::default(),
            &PriorConfig::default(),
            0.95,
        )
        .unwrap();
        (rows, start.elapsed().as_secs_f64())
    })
}

fn rows_for(method: Method, limit: usize) -> Vec<&'static ExperimentResult> {
    experiment().0.iter().filter(|r| r.method == method && r.replicate < limit).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c04_coverage() {
    let rows = rows_for(Method::Hprobe, REPLICATES);
    let failed = rows.iter().filter(|r| r.metrics.is_none()).count();
    let ecp = mean(rows.iter().filter_map(|r| r.metrics).map(|m| m.ecp));
    let secs = experiment().1;
    let pass = failed == 0 && rows.len() == REPLICATES && (0.92..=0.97).contains(&ecp) && secs < 900.0;
    report(
        4,
        pass,
        &format!("mean ECP {ecp:.4} over {} replicates in [0.92, 0.97], {failed} failed fits, experiment {secs:.1} s (< 900 s)", rows.len()),
    );
    assert!(pass);
}

/// Two-sided exact binomial(n, 1/2) p-value of `k` successes.
fn sign_test(k: usize, n: usize) -> f64 {
    let tail = k.max(n - k);
    let mut ln_choose = vec![0.0f64; n + 1];
    for j in 1..=n {
        ln_choose[j] = ln_choose[j - 1] + ((n - j + 1) as f64).ln() - (j as f64).ln();
    }
    let upper: f64 = (tail..=n).map(|j| (ln_choose[j] - n as f64 * 2f64.ln()).exp()).sum();
    (2.0 * upper).min(1.0)
}

fn paired() -> Vec<(hprobe::sim::Metrics, hprobe::sim::Metrics)> {
    let h = rows_for(Method::Hprobe, PAIRED);
    let p = rows_for(Method::Probe, PAIRED);
    h.iter()
        .zip(&p)
        .filter_map(|(a, b)| {
            assert_eq!(a.replicate, b.replicate);
            Some((a.metrics?, b.metrics?))
        })
        .collect()
}

#[test]
fn c05_rmse_advantage() {
    let pairs = paired();
    let rmse_h = mean(pairs.iter().map(|(a, _)| a.rmse));
    let rmse_p = mean(pairs.iter().map(|(_, b)| b.rmse));
    let wins = pairs.iter().filter(|(a, b)| a.rmse < b.rmse).count();
    let losses = pairs.iter().filter(|(a, b)| a.rmse > b.rmse).count();
    let pv = sign_test(wins, wins + losses);
    let pass = pairs.len() == PAIRED && rmse_h < rmse_p && wins > losses && pv < 0.05;
    report(
        5,
        pass,
        &format!(
            "mean RMSE hprobe {rmse_h:.4} vs probe {rmse_p:.4} over {} pairs, wins {wins}/{}, sign test p = {pv:.2e} (< 0.05)",
            pairs.len(),
            wins + losses
        ),
    );
    assert!(pass);
}

#[test]
fn c06_selection() {
    let pairs = paired();
    let tpr_h = mean(pairs.iter().map(|(a, _)| a.tpr));
    let tpr_p = mean(pairs.iter().map(|(_, b)| b.tpr));
    let fdr_h = mean(pairs.iter().map(|(a, _)| a.fdr));
    let pass = pairs.len() == PAIRED && tpr_h >= tpr_p - 0.02 && fdr_h <= 0.30;
    report(
        6,
        pass,
        &format!(
            "hprobe TPR {tpr_h:.4} vs probe {tpr_p:.4} (>= probe - 0.02), hprobe FDR {fdr_h:.4} (<= 0.30), {} replicates",
            pairs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c07_injected_truth_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let gamma = [true, false, true, true, false];
    let beta = [1.5, 0.7, -2.0, 0.4, 3.0];
    let phi = [0.3, -1.0, 0.5];
    let omega = [0.2, 0.8, -0.5];
    let fit = fit_from_parameters(&gamma, &beta, &phi, &omega).unwrap();
    let draws = 100_000;
    let levels = [0.8, 0.9, 0.95];
    let mut hits = [0usize; 3];
    for _ in 0..draws {
        let x: Vec<f64> = (0..5).map(|_| normal(&mut rng)).collect();
        let v = [1.0, normal(&mut rng), rng.random_range(-1.0..1.0)];
        let mean: f64 = (0..5).filter(|&k| gamma[k]).map(|k| x[k] * beta[k]).sum::<f64>()
            + (0..3).map(|j| v[j] * phi[j]).sum::<f64>();
        let sd = (-(0..3).map(|j| v[j] * omega[j]).sum::<f64>()).exp().sqrt();
        let y = mean + sd * normal(&mut rng);
        for (h, &level) in hits.iter_mut().zip(&levels) {
            if prediction_interval(&fit, &x, &v, &v, level).unwrap().contains(y) {
                *h += 1;
            }
        }
    }
    let cover: Vec<f64> = hits.iter().map(|&h| h as f64 / draws as f64).collect();
    let pass = cover.iter().zip(&levels).all(|(c, l)| (c - l).abs() <= 0.005);
    report(
        7,
        pass,
        &format!(
            "coverage {:.4}/{:.4}/{:.4} at levels 0.80/0.90/0.95 over {draws} draws (within 0.005)",
            cover[0], cover[1], cover[2]
        ),
    );
    assert!(pass);
}

#[test]
fn c08_homoscedastic_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (n, p) = (300, 20);
    let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
    let vm = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let vv = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * vm[(i, 1)] + 2.0 * x[(i, 2)] - 1.5 * x[(i, 7)] + 0.8 * normal(&mut rng));
    let data = validate_dataset(RawData { y, x, v_mean: vm, v_var: Some(vv) }).unwrap().data;
    let cfg = FitConfig { homoscedastic: true, ..FitConfig::default() };
    let fit = hprobe::fit(&data, &cfg, &PriorConfig::default()).unwrap();
    let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let sigma_spread = spread(&fit.sigma2);

    let m = 50;
    let xt = DMatrix::from_fn(m, p, |_, _| normal(&mut rng));
    let vmt = DMatrix::from_fn(m, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let vvt = DMatrix::from_fn(m, 3, |_, j| if j == 0 { 1.0 } else { 5.0 * normal(&mut rng) });
    let pis = predict_batch(&fit, &xt, &vmt, &vvt, 0.95).unwrap();
    let s_new: Vec<f64> = pis.iter().map(|pi| pi.sigma2_new).collect();
    let new_spread = spread(&s_new);
    let z = critical_value(0.95).unwrap();
    let common = fit.sigma2[0];
    let width_err = pis
        .iter()
        .map(|pi| (pi.width() - 2.0 * z * (pi.var_parametric + common).sqrt()).abs())
        .fold(0.0, f64::max);
    let pass = sigma_spread <= 1e-12 && new_spread <= 1e-12 && (s_new[0] - common).abs() <= 1e-12 && width_err <= 1e-12;
    report(
        8,
        pass,
        &format!(
            "training sigma2 spread {sigma_spread:.1e}, test sigma2 spread {new_spread:.1e} (<= 1e-12), \
             width vs 2z*sqrt(var_parametric + sigma2) max error {width_err:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn c09_simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        r#"{"n": 100, "p": 25, "v": 3, "seed": 99, "pi_true": 0.2, "eta_beta": 0.8,
            "snr": 0.5, "replicate_count": 4}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_hprobe"))
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out.join("results.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    let pass = a == b && !a.is_empty();
    report(9, pass, &format!("two simulate runs, {} bytes each, identical: {}", a.len(), a == b));
    assert!(pass);
}

#[test]
fn c10_real_data_not_reproduced() {
    println!("criterion 10 INFO: the real-data results depend on a dataset that is not available; nothing to check");
}
