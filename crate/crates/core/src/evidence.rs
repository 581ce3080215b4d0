//! Marginal-likelihood estimation from posterior log-likelihood draws and
//! the induced partition posterior probabilities.
//!
//! Four estimators are computed from the same draws: the harmonic mean
//! (HM), the delta-mixture importance-sampling fixed point (IS1..IS9), and
//! the Monte Carlo information-criterion approximations AICM and BICM.
//! Everything runs strictly in log space; the raw-likelihood forms
//! underflow at realistic sample sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{logsumexp, mean, population_variance, sample_variance};

/// Which estimator produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EvidenceMethod {
    HarmonicMean,
    /// delta in (0,1): fraction of proposal mass taken from the prior.
    ImportanceSampling { delta: f64 },
    Aicm,
    Bicm,
}

impl std::fmt::Display for EvidenceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvidenceMethod::HarmonicMean => write!(f, "HM"),
            EvidenceMethod::ImportanceSampling { delta } => {
                write!(f, "IS{}", (delta * 10.0).round() as i64)
            }
            EvidenceMethod::Aicm => write!(f, "AICM"),
            EvidenceMethod::Bicm => write!(f, "BICM"),
        }
    }
}

/// Divisor convention for the log-likelihood sample variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceConvention {
    /// T - 1 (the default).
    Unbiased,
    /// T.
    Population,
}

/// One log marginal-likelihood estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogMLEstimate {
    pub partition_id: usize,
    pub method: EvidenceMethod,
    pub value: f64,
    /// Fixed-point iterations (importance sampling only).
    pub iterations: usize,
    /// False when the fixed point failed to converge; the last iterate is
    /// still reported.
    pub converged: bool,
}

/// Normalized posterior probabilities over the candidate partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionWeights {
    pub probabilities: Vec<f64>,
    pub method: EvidenceMethod,
}

/// Harmonic-mean estimator: log T - logsumexp(-loglik).
pub fn harmonic_mean_logml(loglik: &[f64]) -> f64 {
    assert!(loglik.len() >= 2, "need at least two draws");
    let t = loglik.len() as f64;
    let negated: Vec<f64> = loglik.iter().map(|l| -l).collect();
    t.ln() - logsumexp(&negated)
}

/// Delta-mixture importance-sampling estimator: the solution x of
///
///   x = [dT/(1-d) + sum_t L_t / (d x + (1-d) L_t)]
///       / [dT/(x(1-d)) + sum_t 1 / (d x + (1-d) L_t)]
///
/// solved in log space by damped fixed-point iteration (damping 0.5),
/// started from the harmonic-mean value. Returns (log x, iterations,
/// converged); non-convergence is flagged, not fatal.
pub fn newton_raftery_logml(
    loglik: &[f64],
    delta: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, usize, bool) {
    assert!(loglik.len() >= 2, "need at least two draws");
    assert!(delta > 0.0 && delta < 1.0, "delta must be in (0,1)");
    let t = loglik.len() as f64;
    let log_pseudo = (delta * t / (1.0 - delta)).ln();
    let log_delta = delta.ln();
    let log_1md = (1.0 - delta).ln();

    let mut y = harmonic_mean_logml(loglik);
    for iter in 1..=max_iter {
        // A_t = log(d x + (1-d) L_t)
        let num_terms: Vec<f64> = loglik
            .iter()
            .map(|&l| l - logsumexp(&[log_delta + y, log_1md + l]))
            .collect();
        let den_terms: Vec<f64> = loglik
            .iter()
            .map(|&l| -logsumexp(&[log_delta + y, log_1md + l]))
            .collect();
        let log_num = logsumexp(&[log_pseudo, logsumexp(&num_terms)]);
        let log_den = logsumexp(&[log_pseudo - y, logsumexp(&den_terms)]);
        let y_new = log_num - log_den;
        if (y_new - y).abs() <= tol * (1.0 + y.abs()) {
            return (y_new, iter, true);
        }
        y += 0.5 * (y_new - y);
    }
    (y, max_iter, false)
}

/// AICM: 2 (mean - variance) of the log-likelihood draws.
pub fn aicm_logml(loglik: &[f64]) -> f64 {
    aicm_logml_with(loglik, VarianceConvention::Unbiased)
}

pub fn aicm_logml_with(loglik: &[f64], convention: VarianceConvention) -> f64 {
    assert!(loglik.len() >= 2, "need at least two draws");
    2.0 * (mean(loglik) - variance_by(loglik, convention))
}

/// BICM: mean - variance * (log n - 1), with n the data sample size.
pub fn bicm_logml(loglik: &[f64], n: usize) -> f64 {
    bicm_logml_with(loglik, n, VarianceConvention::Unbiased)
}

pub fn bicm_logml_with(loglik: &[f64], n: usize, convention: VarianceConvention) -> f64 {
    assert!(loglik.len() >= 2, "need at least two draws");
    assert!(n >= 1);
    mean(loglik) - variance_by(loglik, convention) * ((n as f64).ln() - 1.0)
}

fn variance_by(xs: &[f64], convention: VarianceConvention) -> f64 {
    match convention {
        VarianceConvention::Unbiased => sample_variance(xs),
        VarianceConvention::Population => population_variance(xs),
    }
}

/// Softmax of the log marginal likelihoods: the uniform prior over
/// partitions cancels.
pub fn partition_posterior(log_ml: &[f64], method: EvidenceMethod) -> Result<PartitionWeights> {
    for (i, &v) in log_ml.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteEvidence { partition_id: i });
        }
    }
    let lse = logsumexp(log_ml);
    Ok(PartitionWeights {
        probabilities: log_ml.iter().map(|&v| (v - lse).exp()).collect(),
        method,
    })
}

/// Scale a vector of log marginal likelihoods to zero mean and unit
/// variance across partitions (the usual cross-estimator comparison plot).
pub fn scale_estimates(values: &[f64]) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let m = mean(values);
    let sd = sample_variance(values).sqrt();
    if sd == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - m) / sd).collect()
}

/// The default per-partition estimate menu: HM, IS1..IS9, AICM, BICM.
pub fn evidence_table(
    loglik_by_partition: &[(usize, &[f64])],
    n_obs: usize,
    deltas: &[f64],
    nr_tol: f64,
    nr_max_iter: usize,
) -> Vec<LogMLEstimate> {
    let mut table = Vec::new();
    for &(pid, loglik) in loglik_by_partition {
        table.push(LogMLEstimate {
            partition_id: pid,
            method: EvidenceMethod::HarmonicMean,
            value: harmonic_mean_logml(loglik),
            iterations: 0,
            converged: true,
        });
        for &delta in deltas {
            let (value, iterations, converged) =
                newton_raftery_logml(loglik, delta, nr_tol, nr_max_iter);
            table.push(LogMLEstimate {
                partition_id: pid,
                method: EvidenceMethod::ImportanceSampling { delta },
                value,
                iterations,
                converged,
            });
        }
        table.push(LogMLEstimate {
            partition_id: pid,
            method: EvidenceMethod::Aicm,
            value: aicm_logml(loglik),
            iterations: 0,
            converged: true,
        });
        table.push(LogMLEstimate {
            partition_id: pid,
            method: EvidenceMethod::Bicm,
            value: bicm_logml(loglik, n_obs),
            iterations: 0,
            converged: true,
        });
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn harmonic_mean_of_constant_is_constant() {
        let ll = vec![-100.0; 50];
        assert_relative_eq!(harmonic_mean_logml(&ll), -100.0, epsilon = 1e-12);
    }

    #[test]
    fn harmonic_mean_two_values_by_hand() {
        // L = {1, 3}: HM = 2 / (1 + 1/3) = 1.5
        let ll = vec![0.0, 3.0f64.ln()];
        assert_relative_eq!(harmonic_mean_logml(&ll), 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn harmonic_mean_never_exceeds_logsumexp_bound() {
        let mut rng = RngSeed::new(1).rng();
        for _ in 0..20 {
            let ll: Vec<f64> = (0..100).map(|_| -500.0 + 30.0 * rng.random::<f64>()).collect();
            let bound = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                + (ll.len() as f64).ln();
            assert!(harmonic_mean_logml(&ll) <= bound + 1e-10);
        }
    }

    #[test]
    fn newton_raftery_constant_for_every_delta() {
        let ll = vec![-321.75; 40];
        for i in 1..=9 {
            let delta = i as f64 / 10.0;
            let (v, _, converged) = newton_raftery_logml(&ll, delta, 1e-8, 1000);
            assert!(converged);
            assert!(
                (v - (-321.75)).abs() < 1e-10,
                "delta {delta}: got {v}"
            );
        }
    }

    #[test]
    fn newton_raftery_delta_family_is_finite_and_ordered_sanely() {
        let mut rng = RngSeed::new(2).rng();
        let ll: Vec<f64> = (0..500).map(|_| -200.0 + rng.random::<f64>() * 5.0).collect();
        let mut values = Vec::new();
        for i in 1..=9 {
            let (v, _, converged) = newton_raftery_logml(&ll, i as f64 / 10.0, 1e-8, 1000);
            assert!(converged);
            assert!(v.is_finite());
            values.push(v);
        }
        // All the family members live between the draw extremes.
        let lo = ll.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in values {
            assert!(v > lo - 1.0 && v < hi + (ll.len() as f64).ln());
        }
    }

    #[test]
    fn aicm_direct_formula() {
        // {-12, -10, -8}: mean -10, sample variance 4 -> 2(-10 - 4) = -28.
        let ll = vec![-12.0, -10.0, -8.0];
        assert_relative_eq!(aicm_logml(&ll), 2.0 * (-10.0 - 4.0), epsilon = 1e-12);
        // Constant draws: 2 * mean.
        let c = vec![-7.5; 10];
        assert_relative_eq!(aicm_logml(&c), -15.0, epsilon = 1e-12);
    }

    #[test]
    fn aicm_matches_two_pass_oracle() {
        let mut rng = RngSeed::new(3).rng();
        let ll: Vec<f64> = (0..257).map(|_| -50.0 + rng.random::<f64>() * 9.0).collect();
        let m: f64 = ll.iter().sum::<f64>() / ll.len() as f64;
        let v: f64 = ll.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / (ll.len() - 1) as f64;
        assert_relative_eq!(aicm_logml(&ll), 2.0 * (m - v), epsilon = 1e-10);
    }

    #[test]
    fn bicm_direct_formula() {
        // mean -10, variance 2, n=100: -10 - 2(log 100 - 1) = -17.2103...
        let ll = vec![-11.0, -10.0, -9.0, -10.0];
        let m = mean(&ll);
        let v = sample_variance(&ll);
        assert_relative_eq!(
            bicm_logml(&ll, 100),
            m - v * (100.0f64.ln() - 1.0),
            epsilon = 1e-12
        );
        // Spec-level value check with mean -10, variance 2.
        let direct = -10.0 - 2.0 * (100.0f64.ln() - 1.0);
        assert_relative_eq!(direct, -17.210340371976184, epsilon = 1e-12);
        // Constant draws: mean for any n.
        let c = vec![-4.25; 8];
        assert_relative_eq!(bicm_logml(&c, 17), -4.25, epsilon = 1e-12);
        // n = e makes the variance coefficient vanish: log n = 1.
        let e = std::f64::consts::E;
        let ll2 = vec![-3.0, -1.0, -2.0, -5.0];
        assert_relative_eq!(
            bicm_logml_with(&ll2, e.round() as usize, VarianceConvention::Unbiased),
            mean(&ll2) - sample_variance(&ll2) * ((e.round()).ln() - 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn variance_convention_switch() {
        let ll = vec![-12.0, -10.0, -8.0];
        let unb = aicm_logml_with(&ll, VarianceConvention::Unbiased);
        let pop = aicm_logml_with(&ll, VarianceConvention::Population);
        assert!(pop > unb); // population variance is smaller
    }

    #[test]
    fn partition_posterior_cases() {
        // Equal log-MLs over 8 partitions -> 1/8 each.
        let w = partition_posterior(&[-3.0; 8], EvidenceMethod::HarmonicMean).unwrap();
        for p in &w.probabilities {
            assert_relative_eq!(*p, 0.125, epsilon = 1e-12);
        }
        // {0, -log 3} -> {0.75, 0.25}.
        let w = partition_posterior(&[0.0, -(3.0f64.ln())], EvidenceMethod::HarmonicMean).unwrap();
        assert_relative_eq!(w.probabilities[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(w.probabilities[1], 0.25, epsilon = 1e-12);
        // 50-nat dominance.
        let w = partition_posterior(&[0.0, -50.0], EvidenceMethod::HarmonicMean).unwrap();
        assert!(w.probabilities[0] >= 1.0 - 1e-20);
        // Probabilities sum to one.
        let w = partition_posterior(&[-10.0, -12.0, -9.0], EvidenceMethod::Aicm).unwrap();
        let total: f64 = w.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_posterior_rejects_non_finite() {
        let err = partition_posterior(&[0.0, f64::NAN], EvidenceMethod::HarmonicMean).unwrap_err();
        assert!(matches!(err, Error::NonFiniteEvidence { partition_id: 1 }));
    }

    #[test]
    fn shift_invariance_of_all_estimators() {
        let mut rng = RngSeed::new(4).rng();
        let ll: Vec<f64> = (0..300).map(|_| -80.0 + rng.random::<f64>() * 6.0).collect();
        let shifted: Vec<f64> = ll.iter().map(|l| l + 37.5).collect();

        assert_relative_eq!(
            harmonic_mean_logml(&shifted),
            harmonic_mean_logml(&ll) + 37.5,
            epsilon = 1e-9
        );
        let (a, _, _) = newton_raftery_logml(&ll, 0.5, 1e-10, 2000);
        let (b, _, _) = newton_raftery_logml(&shifted, 0.5, 1e-10, 2000);
        assert_relative_eq!(b, a + 37.5, epsilon = 1e-6);
        assert_relative_eq!(aicm_logml(&shifted), aicm_logml(&ll) + 2.0 * 37.5, epsilon = 1e-9);
        // AICM shifts by 2c (both mean terms), BICM by c.
        assert_relative_eq!(
            bicm_logml(&shifted, 50),
            bicm_logml(&ll, 50) + 37.5,
            epsilon = 1e-9
        );

        // The posterior weights ignore a common shift.
        let w1 = partition_posterior(&[-10.0, -12.0], EvidenceMethod::HarmonicMean).unwrap();
        let w2 = partition_posterior(&[-10.0 + 5.0, -12.0 + 5.0], EvidenceMethod::HarmonicMean)
            .unwrap();
        for (a, b) in w1.probabilities.iter().zip(&w2.probabilities) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_permutation_equivariance() {
        let vals = [-5.0, -9.0, -2.0, -4.0];
        let w = partition_posterior(&vals, EvidenceMethod::HarmonicMean).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
        let wp = partition_posterior(&permuted, EvidenceMethod::HarmonicMean).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_relative_eq!(wp.probabilities[i], w.probabilities[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn scaled_estimates_are_standardized() {
        let vals = [-10.0, -12.0, -9.0, -14.0, -11.0];
        let scaled = scale_estimates(&vals);
        assert!((mean(&scaled)).abs() < 1e-12);
        assert_relative_eq!(sample_variance(&scaled), 1.0, epsilon = 1e-12);
    }

    /// Conjugate toy: Z ~ N_n(mu 1, sigma0^2 I) with mu ~ N(0, s^2). The
    /// evidence is analytic, the posterior is Gaussian, and the posterior
    /// draws are exact i.i.d. samples.
    fn conjugate_toy(seed: u64, n: usize, sigma0: f64, s_prior: f64, t: usize) -> (Vec<f64>, f64) {
        let mut rng = RngSeed::new(seed).rng();
        let mu_true = 0.3;
        let z: Vec<f64> = (0..n)
            .map(|_| mu_true + sigma0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let zsum: f64 = z.iter().sum();
        let prec = 1.0 / (s_prior * s_prior) + n as f64 / (sigma0 * sigma0);
        let m_post = (zsum / (sigma0 * sigma0)) / prec;
        let sd_post = prec.powf(-0.5);

        // Analytic evidence via Sherman-Morrison on sigma0^2 I + s^2 J.
        let s2 = s_prior * s_prior;
        let v0 = sigma0 * sigma0;
        let corr = s2 * zsum / v0 / (1.0 + s2 * n as f64 / v0);
        let quad: f64 = z.iter().map(|zi| zi * (zi / v0 - corr / v0)).sum();
        let logdet = (n as f64 - 1.0) * v0.ln() + (v0 + n as f64 * s2).ln();
        let log_ev = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad;

        let loglik: Vec<f64> = (0..t)
            .map(|_| {
                let mu = m_post + sd_post * rng.sample::<f64, _>(StandardNormal);
                -0.5 * n as f64 * (2.0 * std::f64::consts::PI * v0).ln()
                    - z.iter().map(|zi| (zi - mu) * (zi - mu)).sum::<f64>() / (2.0 * v0)
            })
            .collect();
        (loglik, log_ev)
    }

    #[test]
    fn conjugate_evidence_recovered_by_hm_and_is() {
        let (loglik, log_ev) = conjugate_toy(11, 12, 3.0, 0.3, 10_000);
        let hm = harmonic_mean_logml(&loglik);
        assert!(
            (hm - log_ev).abs() < 0.5,
            "HM {hm} vs analytic {log_ev}"
        );
        let (is5, _, converged) = newton_raftery_logml(&loglik, 0.5, 1e-8, 1000);
        assert!(converged);
        assert!(
            (is5 - log_ev).abs() < 0.5,
            "IS5 {is5} vs analytic {log_ev}"
        );
    }

    #[test]
    fn evidence_table_has_full_menu() {
        let mut rng = RngSeed::new(5).rng();
        let ll: Vec<f64> = (0..100).map(|_| -30.0 + rng.random::<f64>()).collect();
        let deltas: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let rows = evidence_table(&[(0, &ll), (1, &ll)], 50, &deltas, 1e-8, 1000);
        // HM + 9 IS + AICM + BICM per partition.
        assert_eq!(rows.len(), 2 * 12);
        assert_eq!(format!("{}", rows[1].method), "IS1");
        assert_eq!(format!("{}", rows[9].method), "IS9");
    }
}
