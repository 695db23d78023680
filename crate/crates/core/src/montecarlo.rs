//! Monte Carlo harness for the simulation design in [`crate::dgp`].
//!
//! Replication `r` draws its panel from seed `base_seed ^ r`, so any subset
//! of replications can run in any order (or in parallel) and
//! [`summarize`] folds the outcomes by replication index.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use libm::sqrt;

use crate::dgp::{generate, SimulatedPanel, SimulationDesign};
use crate::error::{Error, Result};
use crate::inference::{bias_variance, InferenceOptions};
use crate::lsmd::{estimate, EstimatorOptions, WeightMatrix};
use crate::panel::RandomCoeffSpec;
use crate::quadrature::DEFAULT_NODES;
use crate::special::Z_975;

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub products: usize,
    pub markets: usize,
    pub factors_true: usize,
    pub factors_est: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub alpha0: f64,
    pub beta0: f64,
    pub price_floor: f64,
    /// Gauss-Hermite nodes for both data generation and estimation.
    pub nodes: usize,
    pub alpha_bounds: (f64, f64),
    /// Compute standard errors and bias-corrected estimates.
    pub inference: bool,
    /// Summarize the bias-corrected rather than the raw estimates.
    pub bias_correction: bool,
    pub bandwidth: usize,
    pub estimator: EstimatorOptions,
    /// Largest tolerated fraction of failed replications.
    pub max_failure_rate: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            products: 20,
            markets: 20,
            factors_true: 1,
            factors_est: 1,
            reps: 1000,
            base_seed: 20_240_601,
            alpha0: 1.0,
            beta0: -3.0,
            price_floor: 0.2,
            nodes: DEFAULT_NODES,
            alpha_bounds: (0.0, 5.0),
            inference: true,
            bias_correction: false,
            bandwidth: crate::inference::DEFAULT_BANDWIDTH,
            estimator: EstimatorOptions::default(),
            max_failure_rate: 0.01,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        let max = self.products.min(self.markets);
        if self.factors_est >= max || self.factors_true >= max {
            return Err(Error::TooManyFactors {
                factors: self.factors_est.max(self.factors_true),
                max,
            });
        }
        if self.bias_correction && !self.inference {
            return Err(Error::InvalidConfig("bias correction requires inference".into()));
        }
        if self.bandwidth >= self.markets {
            return Err(Error::InvalidConfig("bandwidth must be below T".into()));
        }
        let (lo, hi) = self.alpha_bounds;
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::InvalidConfig("alpha bounds must satisfy 0 <= lo < hi".into()));
        }
        Ok(())
    }

    pub fn design(&self) -> SimulationDesign {
        SimulationDesign {
            products: self.products,
            markets: self.markets,
            factors: self.factors_true,
            alpha0: self.alpha0,
            beta0: self.beta0,
            price_floor: self.price_floor,
            nodes: self.nodes,
        }
    }

    pub fn spec(&self) -> Result<RandomCoeffSpec> {
        RandomCoeffSpec::new(
            alloc::vec![0],
            alloc::vec![self.alpha_bounds],
            crate::quadrature::QuadratureKind::GaussHermite { nodes: self.nodes },
        )
    }
}

pub fn replication_seed(base_seed: u64, rep: usize) -> u64 {
    base_seed ^ rep as u64
}

pub fn generate_dgp(config: &McConfig, rep_seed: u64) -> Result<SimulatedPanel> {
    generate(&config.design(), rep_seed)
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_star: Option<f64>,
    pub beta_star: Option<f64>,
    pub se_alpha: Option<f64>,
    pub se_beta: Option<f64>,
    pub boundary: bool,
    pub evaluations: usize,
    pub truncated: usize,
}

pub fn run_replication(config: &McConfig, rep: usize) -> Result<RepRecord> {
    let seed = replication_seed(config.base_seed, rep);
    let sim = generate_dgp(config, seed)?;
    let spec = config.spec()?;
    let w = WeightMatrix::identity(sim.data.num_instruments());
    let est = estimate(&sim.data, &spec, config.factors_est, &w, &config.estimator)?;
    let mut rec = RepRecord {
        rep,
        seed,
        alpha: est.alpha[0],
        beta: est.beta[0],
        alpha_star: None,
        beta_star: None,
        se_alpha: None,
        se_beta: None,
        boundary: est.boundary,
        evaluations: est.evaluations,
        truncated: sim.truth.truncated,
    };
    if config.inference {
        let opts = InferenceOptions {
            bandwidth: config.bandwidth,
            ..InferenceOptions::default()
        };
        let report = bias_variance(&est, &sim.data, &spec, &config.estimator.inversion, &opts)?;
        rec.alpha_star = Some(report.alpha_star[0]);
        rec.beta_star = Some(report.beta_star[0]);
        rec.se_alpha = Some(report.se[0]);
        rec.se_beta = Some(report.se[1]);
    }
    Ok(rec)
}

/// Bias, dispersion and test performance for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation across replications (divisor `n`).
    pub std: f64,
    pub rmse: f64,
    pub mean_se: Option<f64>,
    /// Rejection rate of the nominal 5% two-sided t-test of the truth.
    pub size: Option<f64>,
}

fn summarize_param(name: &str, truth: f64, est: &[f64], se: Option<&[f64]>) -> ParamSummary {
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let var = est.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mse = est.iter().map(|v| (v - truth) * (v - truth)).sum::<f64>() / n;
    let (mean_se, size) = match se {
        Some(se) => {
            let rejections = est
                .iter()
                .zip(se)
                .filter(|(e, s)| ((*e - truth) / *s).abs() > Z_975)
                .count();
            (Some(se.iter().sum::<f64>() / n), Some(rejections as f64 / n))
        }
        None => (None, None),
    };
    ParamSummary {
        name: name.to_string(),
        truth,
        mean,
        bias: mean - truth,
        std: sqrt(var),
        rmse: sqrt(mse),
        mean_se,
        size,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub config: McConfig,
    /// Raw estimates: `[alpha, beta]`.
    pub raw: [ParamSummary; 2],
    /// Bias-corrected estimates, when inference ran.
    pub corrected: Option<[ParamSummary; 2]>,
    pub records: Vec<RepRecord>,
    pub failures: Vec<(usize, String)>,
}

impl McReport {
    /// The summary selected by the configuration's bias-correction flag.
    pub fn headline(&self) -> &[ParamSummary; 2] {
        match (&self.corrected, self.config.bias_correction) {
            (Some(c), true) => c,
            _ => &self.raw,
        }
    }
}

/// Aggregates replication outcomes in replication order. Fails when more
/// than `max_failure_rate` of the replications failed.
pub fn summarize(config: &McConfig, mut outcomes: Vec<(usize, Result<RepRecord>)>) -> Result<McReport> {
    outcomes.sort_by_key(|(r, _)| *r);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push((rep, format!("{e}"))),
        }
    }
    let total = records.len() + failures.len();
    if records.is_empty() || failures.len() as f64 > config.max_failure_rate * total as f64 {
        return Err(Error::StudyFailed {
            failed: failures.len(),
            reps: total,
        });
    }
    let a: Vec<f64> = records.iter().map(|r| r.alpha).collect();
    let b: Vec<f64> = records.iter().map(|r| r.beta).collect();
    let se: Option<(Vec<f64>, Vec<f64>)> = records
        .iter()
        .map(|r| r.se_alpha.zip(r.se_beta))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().unzip());
    let raw = [
        summarize_param("alpha", config.alpha0, &a, se.as_ref().map(|s| s.0.as_slice())),
        summarize_param("beta", config.beta0, &b, se.as_ref().map(|s| s.1.as_slice())),
    ];
    let corrected = match (&se, records.iter().map(|r| r.alpha_star.zip(r.beta_star)).collect::<Option<Vec<_>>>()) {
        (Some((sa, sb)), Some(stars)) => {
            let (ca, cb): (Vec<f64>, Vec<f64>) = stars.into_iter().unzip();
            Some([
                summarize_param("alpha", config.alpha0, &ca, Some(sa)),
                summarize_param("beta", config.beta0, &cb, Some(sb)),
            ])
        }
        _ => None,
    };
    Ok(McReport {
        config: config.clone(),
        raw,
        corrected,
        records,
        failures,
    })
}

/// Sequential study; the companion crate provides a parallel driver.
pub fn run_study(config: &McConfig) -> Result<McReport> {
    config.validate()?;
    let outcomes = (0..config.reps).map(|r| (r, run_replication(config, r))).collect();
    summarize(config, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> McConfig {
        McConfig {
            products: 8,
            markets: 8,
            reps: 4,
            ..McConfig::default()
        }
    }

    #[test]
    fn rmse_identity_and_order_independence() {
        let cfg = small();
        let outcomes: Vec<_> = (0..cfg.reps).map(|r| (r, run_replication(&cfg, r))).collect();
        let rev: Vec<_> = outcomes.iter().cloned().rev().collect();
        let a = summarize(&cfg, outcomes).unwrap();
        let b = summarize(&cfg, rev).unwrap();
        assert_eq!(a, b);
        for s in a.raw.iter().chain(a.corrected.as_ref().unwrap().iter()) {
            assert!((s.rmse * s.rmse - s.bias * s.bias - s.std * s.std).abs() < 1e-10);
            let size = s.size.unwrap();
            assert!((0.0..=1.0).contains(&size));
        }
    }

    #[test]
    fn too_many_failures_fail_the_study() {
        let cfg = small();
        let mut outcomes: Vec<_> = (0..3).map(|r| (r, run_replication(&cfg, r))).collect();
        outcomes.push((3, Err(Error::NonConvergence("forced".into()))));
        assert!(matches!(summarize(&cfg, outcomes), Err(Error::StudyFailed { failed: 1, reps: 4 })));
    }

    #[test]
    fn config_validation() {
        assert!(McConfig { reps: 0, ..small() }.validate().is_err());
        assert!(McConfig { factors_est: 8, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }
}
