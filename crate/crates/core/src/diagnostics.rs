//! Residual checks for the variance model.

use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::model::{DataSet, FitResult};

pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// `log(r_i^2 + floor)` for the training residuals `y - V phi - alpha0 W0`.
pub fn log_squared_residuals(fit: &FitResult, data: &DataSet) -> Vec<f64> {
    let fitted = fit.fitted_values(data);
    data.y()
        .iter()
        .zip(&fitted)
        .map(|(y, f)| {
            let r = y - f;
            (r * r + RESIDUAL_FLOOR).ln()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// One-way ANOVA on absolute deviations from the group medians.
///
/// Labels may be arbitrary; they are compacted internally. Zero within-group
/// spread with nonzero between-group spread gives an infinite statistic.
pub fn brown_forsythe(values: &[f64], groups: &[usize]) -> Result<TestResult> {
    if values.len() != groups.len() {
        return Err(Error::Dimension(format!(
            "{} values but {} group labels",
            values.len(),
            groups.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("value {i} is not finite")));
    }
    let mut labels: Vec<usize> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("at least two groups are required".into()));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for (&v, g) in values.iter().zip(groups) {
        let slot = labels.binary_search(g).expect("label present");
        members[slot].push(v);
    }
    if let Some(small) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "group {} has fewer than two members",
            labels[small]
        )));
    }

    let deviations: Vec<Vec<f64>> = members
        .into_iter()
        .map(|mut m| {
            m.sort_by(f64::total_cmp);
            let med = median(&m);
            m.iter().map(|v| (v - med).abs()).collect()
        })
        .collect();
    let n: usize = deviations.iter().map(Vec::len).sum();
    let k = deviations.len();
    let grand = deviations.iter().flatten().sum::<f64>() / n as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for d in &deviations {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        between += d.len() as f64 * (mean - grand).powi(2);
        within += d.iter().map(|z| (z - mean).powi(2)).sum::<f64>();
    }
    let df1 = (k - 1) as f64;
    let df2 = (n - k) as f64;
    let scale = deviations.iter().flatten().map(|z| z * z).sum::<f64>();
    if within <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Ok(if between <= 1e-14 * scale {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult { statistic: f64::INFINITY, p_value: 0.0 }
        });
    }
    let statistic = (between / df1) / (within / df2);
    let dist = FisherSnedecor::new(df1, df2).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(TestResult { statistic, p_value: dist.sf(statistic) })
}

/// Group labels 0..k from quartile cut points of a continuous variable.
///
/// Ties at a cut point fall into the lower bin; empty bins are dropped so a
/// variable with few distinct values yields fewer than four groups.
pub fn quartile_groups(values: &[f64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to group".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("value {i} is not finite")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let h = (sorted.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let cuts = [quantile(0.25), quantile(0.5), quantile(0.75)];
    let raw: Vec<usize> = values
        .iter()
        .map(|v| cuts.iter().filter(|&&c| c < *v).count())
        .collect();
    let mut present = raw.clone();
    present.sort_unstable();
    present.dedup();
    Ok(raw
        .iter()
        .map(|r| present.binary_search(r).expect("label present"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::fit_from_parameters;
    use crate::model::{validate_dataset, RawData};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_column_data(y: Vec<f64>) -> DataSet {
        let n = y.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let v = DMatrix::from_element(n, 1, 1.0);
        validate_dataset(RawData { y: DVector::from_vec(y), x, v_mean: v, v_var: None })
            .unwrap()
            .data
    }

    #[test]
    fn exact_fit_hits_the_floor() {
        let data = two_column_data(vec![1.0, 3.0, 5.0]);
        let mut fit = fit_from_parameters(&[true], &[2.0], &[1.0], &[0.0]).unwrap();
        fit.state.w0 = vec![0.0, 2.0, 4.0];
        for v in log_squared_residuals(&fit, &data) {
            assert_relative_eq!(v, RESIDUAL_FLOOR.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn residuals_by_hand() {
        let e = std::f64::consts::E;
        let data = two_column_data(vec![1.0, e]);
        let mut fit = fit_from_parameters(&[false], &[0.0], &[0.0], &[0.0]).unwrap();
        fit.state.w0 = vec![0.0, 0.0];
        let out = log_squared_residuals(&fit, &data);
        assert_eq!(out.len(), 2);
        assert_relative_eq!(out[0], (1.0 + RESIDUAL_FLOOR).ln(), epsilon = 1e-15);
        assert_relative_eq!(out[1], 2.0 + (1.0 + RESIDUAL_FLOOR / (e * e)).ln(), epsilon = 1e-15);
    }

    #[test]
    fn identical_groups_give_zero() {
        let v = [1.0, 4.0, 2.0, 7.0, 7.0, 2.0, 4.0, 1.0];
        let g = [0, 0, 0, 0, 1, 1, 1, 1];
        let r = brown_forsythe(&v, &g).unwrap();
        assert_relative_eq!(r.statistic, 0.0, epsilon = 1e-12);
        assert_relative_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spread_difference_is_detected() {
        let v = [0.0, 0.0, 0.0, 0.0, -10.0, 10.0, -10.0, 10.0];
        let g = [0, 0, 0, 0, 1, 1, 1, 1];
        let r = brown_forsythe(&v, &g).unwrap();
        assert!(r.statistic > 1e6);
        assert!(r.p_value < 1e-3);
    }

    /// Textbook ANOVA on median deviations, written out separately.
    fn oracle(values: &[f64], groups: &[usize]) -> (f64, f64) {
        let k = groups.iter().max().unwrap() + 1;
        let mut z = vec![0.0; values.len()];
        let mut means = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for g in 0..k {
            let mut m: Vec<f64> = values.iter().zip(groups).filter(|(_, &h)| h == g).map(|(v, _)| *v).collect();
            m.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if m.len() % 2 == 1 { m[m.len() / 2] } else { (m[m.len() / 2 - 1] + m[m.len() / 2]) / 2.0 };
            for i in 0..values.len() {
                if groups[i] == g {
                    z[i] = (values[i] - med).abs();
                    means[g] += z[i];
                    counts[g] += 1;
                }
            }
            means[g] /= counts[g] as f64;
        }
        let n = values.len() as f64;
        let grand = z.iter().sum::<f64>() / n;
        let ssb: f64 = (0..k).map(|g| counts[g] as f64 * (means[g] - grand).powi(2)).sum();
        let ssw: f64 = z.iter().zip(groups).map(|(zi, &g)| (zi - means[g]).powi(2)).sum();
        let f = (ssb / (k as f64 - 1.0)) / (ssw / (n - k as f64));
        let p = FisherSnedecor::new(k as f64 - 1.0, n - k as f64).unwrap().sf(f);
        (f, p)
    }

    #[test]
    fn agrees_with_oracle() {
        let v = [2.1, 3.5, 0.2, 1.9, 8.0, -4.2, 6.6, 0.0, 1.0, 1.5, 1.2];
        let g = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        let r = brown_forsythe(&v, &g).unwrap();
        let (f, p) = oracle(&v, &g);
        assert_relative_eq!(r.statistic, f, max_relative = 1e-12);
        assert_relative_eq!(r.p_value, p, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_groupings_fail() {
        assert!(brown_forsythe(&[1.0, 2.0, 3.0], &[0, 0, 0]).is_err());
        assert!(brown_forsythe(&[1.0, 2.0, 3.0], &[0, 0, 1]).is_err());
        assert!(brown_forsythe(&[1.0, 2.0], &[0]).is_err());
    }

    #[test]
    fn null_pvalues_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups: Vec<usize> = (0..100).map(|i| i / 25).collect();
        let mut pv: Vec<f64> = (0..2000)
            .map(|_| {
                let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
                brown_forsythe(&v, &groups).unwrap().p_value
            })
            .collect();
        pv.sort_by(f64::total_cmp);
        let m = pv.len() as f64;
        let ks = pv
            .iter()
            .enumerate()
            .map(|(i, &u)| ((i as f64 + 1.0) / m - u).max(u - i as f64 / m))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS distance {ks}");
    }

    #[test]
    fn quartiles_split_evenly() {
        let v: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(quartile_groups(&v).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let b = [0.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(quartile_groups(&b).unwrap(), vec![0, 1, 0, 1, 1]);
    }

    proptest! {
        #[test]
        fn location_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let g: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let a = brown_forsythe(&v, &g).unwrap();
            let b = brown_forsythe(&shifted, &g).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() <= 1e-6 * (1.0 + a.statistic.abs()));
        }
    }
}
