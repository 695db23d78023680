//! Serializable views of estimation, inference and Monte Carlo results.

use std::io::Write;

use blp_ife_core::inference::InferenceReport;
use blp_ife_core::lsmd::{EstimatorOptions, LsmdEstimate};
use blp_ife_core::montecarlo::{McReport, ParamSummary};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn values(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Internal tuning knobs, echoed so every output records how it was made.
pub fn estimator_settings(o: &EstimatorOptions) -> Value {
    json!({
        "inversion": {
            "method": format!("{:?}", o.inversion.method).to_lowercase(),
            "tol": o.inversion.tol,
            "max_iter": o.inversion.max_iter,
        },
        "inner": {
            "starts": o.inner.starts,
            "perturbation": o.inner.perturbation,
            "min_relative_perturbation": o.inner.min_relative_perturbation,
            "seed": o.inner.seed,
            "bfgs_max_iter": o.inner.bfgs.max_iter,
            "bfgs_grad_tol": o.inner.bfgs.grad_tol,
            "collinearity_tol": o.inner.collinearity_tol,
        },
        "outer": {
            "grid_points": o.grid_points,
            "tol": o.outer_tol,
            "max_iter": o.outer_max_iter,
            "restarts": o.restarts,
            "simplex_max_evals": o.simplex_max_evals,
        },
    })
}

/// One row of the parameter table.
#[derive(Debug, Clone, Serialize)]
pub struct Parameter {
    pub name: String,
    pub estimate: f64,
    pub corrected: Option<f64>,
    pub se: Option<f64>,
    pub t_stat: Option<f64>,
}

/// `(alpha, beta)` names: `sigma_<column>` for the taste scales.
pub fn parameter_names(random: &[String], regressors: &[String]) -> Vec<String> {
    random
        .iter()
        .map(|c| format!("sigma_{c}"))
        .chain(regressors.iter().cloned())
        .collect()
}

pub fn parameter_table(names: &[String], est: &LsmdEstimate, inf: Option<&InferenceReport>) -> Vec<Parameter> {
    let raw: Vec<f64> = est.alpha.iter().chain(est.beta.iter()).copied().collect();
    names
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(i, (name, estimate))| Parameter {
            name: name.clone(),
            estimate,
            corrected: inf.map(|r| r.corrected()[i]),
            se: inf.map(|r| r.se[i]),
            t_stat: inf.map(|r| r.t_stats[i]),
        })
        .collect()
}

pub fn estimate_json(est: &LsmdEstimate) -> Value {
    json!({
        "alpha": values(&est.alpha),
        "beta": values(&est.beta),
        "gamma": values(&est.gamma),
        "factors": est.num_factors(),
        "step2_value": est.step2_value,
        "boundary": est.boundary,
        "evaluations": est.evaluations,
        "weight": { "kind": est.weight.kind().name(), "matrix": rows(est.weight.matrix()) },
    })
}

pub fn inference_json(names: &[String], r: &InferenceReport) -> Value {
    json!({
        "parameters": names,
        "bandwidth": r.bandwidth,
        "condition_gwg": r.condition_gwg,
        "estimates": values(&r.estimates()),
        "corrected": values(&r.corrected()),
        "se": values(&r.se),
        "t_stats": values(&r.t_stats),
        "covariance": rows(&r.covariance),
        "bias": {
            "b0": values(&r.bias[0]),
            "b1": values(&r.bias[1]),
            "b2": values(&r.bias[2]),
            "total": values(&r.correction()),
        },
        "bias_vectors": {
            "x": { "b0": values(&r.b_x.b0), "b1": values(&r.b_x.b1), "b2": values(&r.b_x.b2) },
            "z": { "b0": values(&r.b_z.b0), "b1": values(&r.b_z.b1), "b2": values(&r.b_z.b2) },
        },
        "g": rows(&r.g),
        "omega": rows(&r.omega),
        "w_cal": rows(&r.w_cal),
    })
}

pub fn write_json<W: Write>(mut w: W, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io("<json>", e))
}

const SUMMARY_HEADER: [&str; 9] = ["estimator", "parameter", "truth", "mean", "bias", "std", "rmse", "mean_se", "size"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Bias, std and rmse per parameter, plus mean standard error and size of
/// the 5% t-test when inference ran.
pub fn write_summary_csv<W: Write>(w: W, report: &McReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(SUMMARY_HEADER)?;
    let mut emit = |label: &str, s: &ParamSummary| {
        w.write_record([
            label.to_owned(),
            s.name.clone(),
            s.truth.to_string(),
            s.mean.to_string(),
            s.bias.to_string(),
            s.std.to_string(),
            s.rmse.to_string(),
            opt(s.mean_se),
            opt(s.size),
        ])
    };
    for s in &report.raw {
        emit("lsmd", s)?;
    }
    for s in report.corrected.iter().flatten() {
        emit("lsmd-bias-corrected", s)?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

pub fn write_reps_csv<W: Write>(w: W, report: &McReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "rep", "seed", "alpha", "beta", "alpha_star", "beta_star", "se_alpha", "se_beta", "boundary", "evaluations",
        "truncated",
    ])?;
    for r in &report.records {
        w.write_record([
            r.rep.to_string(),
            r.seed.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            opt(r.alpha_star),
            opt(r.beta_star),
            opt(r.se_alpha),
            opt(r.se_beta),
            r.boundary.to_string(),
            r.evaluations.to_string(),
            r.truncated.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<reps csv>", e))
}

fn summary_json(s: &ParamSummary) -> Value {
    json!({
        "parameter": s.name, "truth": s.truth, "mean": s.mean, "bias": s.bias,
        "std": s.std, "rmse": s.rmse, "mean_se": s.mean_se, "size": s.size,
    })
}

pub fn study_json(report: &McReport, settings: Value) -> Value {
    json!({
        "settings": settings,
        "raw": report.raw.iter().map(summary_json).collect::<Vec<_>>(),
        "corrected": report.corrected.as_ref().map(|c| c.iter().map(summary_json).collect::<Vec<_>>()),
        "completed": report.records.len(),
        "failures": report.failures.iter().map(|(rep, msg)| json!({ "rep": rep, "error": msg })).collect::<Vec<_>>(),
        "records": report.records.iter().map(|r| json!({
            "rep": r.rep, "seed": r.seed, "alpha": r.alpha, "beta": r.beta,
            "alpha_star": r.alpha_star, "beta_star": r.beta_star,
            "se_alpha": r.se_alpha, "se_beta": r.se_beta,
            "boundary": r.boundary, "evaluations": r.evaluations, "truncated": r.truncated,
        })).collect::<Vec<_>>(),
    })
}
