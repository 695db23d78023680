//! The four commands. Each one loads or simulates data, calls into the core
//! crate and writes its artifacts under the output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use blp_ife_core::dgp::{generate, generate_bimodal, SimulationDesign};
use blp_ife_core::diagnostics::{linspace, local_minima, objective_profile, Relevance, RelevanceSurface};
use blp_ife_core::elasticities::elasticity_matrix;
use blp_ife_core::factor::inner_ls;
use blp_ife_core::inference::{bias_variance, InferenceOptions, InferenceReport};
use blp_ife_core::lsmd::{
    blp_empirical_weight, estimate_endogenous, estimate_two_stage, Design, EstimatorOptions, LsmdEstimate,
    ShareInversion, WeightMatrix,
};
use blp_ife_core::quadrature::QuadratureKind;
use blp_ife_core::{PanelData, RandomCoeffSpec};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{DiagnoseDesign, RunConfig, WeightChoice};
use crate::error::{Error, Result};
use crate::panel_io::{load_panel_csv, load_square_matrix, write_matrix_csv, Schema};
use crate::report;
use crate::study::{pool, resolve_threads, run_study};

/// What a command produced. `boundary` maps to exit status 2.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub boundary: bool,
    pub warnings: Vec<String>,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.boundary {
            2
        } else {
            0
        }
    }
}

struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        report::write_json(self.file(name)?, value)
    }
}

fn settings(cfg: &RunConfig, opts: &EstimatorOptions) -> Result<Value> {
    let mut v = serde_json::to_value(cfg)?;
    v["estimator"] = report::estimator_settings(opts);
    Ok(v)
}

/// A loaded panel with its random-coefficient specification.
pub struct Prepared {
    pub data: PanelData,
    pub spec: RandomCoeffSpec,
    /// Names of the random-coefficient columns.
    pub random: Vec<String>,
    pub warnings: Vec<String>,
}

fn column(data: &PanelData, name: &str) -> Result<usize> {
    data.regressor_names().iter().position(|n| n == name).ok_or_else(|| {
        Error::Config(format!(
            "'{name}' is not a regressor (regressors: {})",
            data.regressor_names().join(",")
        ))
    })
}

/// Loads `--data` and checks every setting that depends on it before any
/// estimation starts.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no data file: pass --data or set 'data' in the config".into()))?;
    let mut data = load_panel_csv(path, &Schema::from(&cfg.schema))?;
    let random = if cfg.random.is_empty() {
        vec![data.regressor_names()[0].clone()]
    } else {
        cfg.random.clone()
    };
    let rc: Vec<usize> = random.iter().map(|n| column(&data, n)).collect::<Result<_>>()?;
    for name in &cfg.endogenous {
        let k = column(&data, name)?;
        data = data.with_endogenous(k)?;
    }
    if cfg.alpha_bounds.len() != rc.len() {
        return Err(Error::Config(format!(
            "alpha_bounds must give one 'lo,hi' box per random coefficient ({} needed, e.g. --alpha-bounds 0,5)",
            rc.len()
        )));
    }
    let max = data.products().min(data.markets());
    if cfg.factors >= max {
        return Err(blp_ife_core::Error::TooManyFactors {
            factors: cfg.factors,
            max,
        }
        .into());
    }
    if cfg.bandwidth >= data.markets() {
        return Err(Error::Config(format!("bandwidth {} must be below T = {}", cfg.bandwidth, data.markets())));
    }
    let kind = QuadratureKind::default_for(rc.len(), cfg.nodes);
    let spec = RandomCoeffSpec::new(rc, cfg.alpha_bounds.clone(), kind)?;
    let mut warnings = Vec::new();
    if cfg.factors > 0 {
        for k in data.low_rank_regressors() {
            warnings.push(format!(
                "regressor '{}' does not vary across products or across markets; \
                 its coefficient is absorbed by the factors and not identified",
                data.regressor_names()[k]
            ));
        }
    }
    Ok(Prepared {
        data,
        spec,
        random,
        warnings,
    })
}

/// Estimate with the configured weight; `optimal` also returns the
/// identity-weighted first stage.
pub fn fit(cfg: &RunConfig, p: &Prepared, opts: &EstimatorOptions) -> Result<(LsmdEstimate, Option<LsmdEstimate>)> {
    let m = p.data.num_instruments();
    let weight = match &cfg.weight {
        WeightChoice::Optimal => {
            let (first, second) = estimate_two_stage(&p.data, &p.spec, cfg.factors, opts)?;
            return Ok((second, Some(first)));
        }
        WeightChoice::Identity => WeightMatrix::identity(m),
        WeightChoice::BlpEmpirical => blp_empirical_weight(&p.data)?,
        WeightChoice::File(path) => {
            let w = load_square_matrix(path)?;
            if w.nrows() != m {
                return Err(Error::Config(format!(
                    "weight matrix in {} is {}x{} but there are {m} instruments",
                    path.display(),
                    w.nrows(),
                    w.ncols()
                )));
            }
            WeightMatrix::user(w)?
        }
    };
    Ok((estimate_endogenous(&p.data, &p.spec, cfg.factors, &weight, opts)?, None))
}

fn inference(cfg: &RunConfig, p: &Prepared, est: &LsmdEstimate, opts: &EstimatorOptions) -> Result<InferenceReport> {
    let io = InferenceOptions {
        bandwidth: cfg.bandwidth,
        ..InferenceOptions::default()
    };
    Ok(bias_variance(est, &p.data, &p.spec, &opts.inversion, &io)?)
}

fn boundary_warning(est: &LsmdEstimate) -> String {
    format!(
        "estimate on the boundary of the parameter box (alpha = {:?}); widen --alpha-bounds or treat it as a corner solution",
        est.alpha.as_slice()
    )
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<Outcome> {
    let opts = EstimatorOptions::default();
    let p = prepare(cfg)?;
    let mut out = Output::new(&cfg.out)?;
    let (est, first) = fit(cfg, &p, &opts)?;
    let names = report::parameter_names(&p.random, p.data.regressor_names());
    let inf = inference(cfg, &p, &est, &opts);
    let table = report::parameter_table(&names, &est, inf.as_ref().ok());
    let mut warnings = p.warnings.clone();
    if est.boundary {
        warnings.push(boundary_warning(&est));
    }
    let doc = json!({
        "settings": settings(cfg, &opts)?,
        "panel": {
            "products": p.data.products(),
            "markets": p.data.markets(),
            "regressors": p.data.regressor_names(),
            "instruments": p.data.instrument_names(),
            "endogenous": cfg.endogenous,
            "random": p.random,
        },
        "parameters": table,
        "estimate": report::estimate_json(&est),
        "first_stage": first.as_ref().map(report::estimate_json),
        "inference_error": inf.as_ref().err().map(|e| e.to_string()),
        "residual_spectrum": report::values(&est.residual_spectrum),
        "warnings": warnings,
    });
    out.json("estimate.json", &doc)?;
    {
        let mut w = csv::Writer::from_writer(out.file("spectrum.csv")?);
        w.write_record(["index", "eigenvalue", "share"])?;
        let total: f64 = est.residual_spectrum.sum();
        for (i, v) in est.residual_spectrum.iter().enumerate() {
            w.write_record([(i + 1).to_string(), v.to_string(), (v / total).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&cfg.out, e))?;
    }
    if est.num_factors() > 0 {
        let cols: Vec<String> = (1..=est.num_factors()).map(|r| format!("factor_{r}")).collect();
        write_matrix_csv(out.file("loadings.csv")?, "product", p.data.product_labels(), &cols, &est.factors.lambda)?;
        write_matrix_csv(out.file("factors.csv")?, "market", p.data.market_labels(), &cols, &est.factors.f)?;
    }
    let inf = inf?;
    out.json("inference.json", &report::inference_json(&names, &inf))?;

    let mut summary = format!("{:<16} {:>12} {:>12} {:>10}\n", "parameter", "estimate", "corrected", "se");
    for row in &table {
        summary += &format!(
            "{:<16} {:>12.6} {:>12.6} {:>10.6}\n",
            row.name,
            row.estimate,
            row.corrected.unwrap_or(f64::NAN),
            row.se.unwrap_or(f64::NAN)
        );
    }
    Ok(Outcome {
        artifacts: out.written,
        boundary: est.boundary,
        warnings,
        summary,
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let study = cfg.study()?;
    let threads = resolve_threads(cfg.threads)?;
    let report = run_study(&study, threads)?;
    let mut out = Output::new(&cfg.out)?;
    let mut s = settings(cfg, &study.estimator)?;
    s["threads"] = json!(threads);
    report::write_summary_csv(out.file("summary.csv")?, &report)?;
    report::write_reps_csv(out.file("reps.csv")?, &report)?;
    out.json("study.json", &report::study_json(&report, s))?;
    let mut summary = format!(
        "{} replications ({} failed)\n{:<22} {:<6} {:>9} {:>9} {:>9} {:>9} {:>7}\n",
        report.records.len(),
        report.failures.len(),
        "estimator",
        "param",
        "bias",
        "std",
        "rmse",
        "mean se",
        "size"
    );
    let sections = std::iter::once(("lsmd", &report.raw)).chain(report.corrected.as_ref().map(|c| ("lsmd-bias-corrected", c)));
    for (label, rows) in sections {
        for r in rows.iter() {
            summary += &format!(
                "{label:<22} {:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.3}\n",
                r.name,
                r.bias,
                r.std,
                r.rmse,
                r.mean_se.unwrap_or(f64::NAN),
                r.size.unwrap_or(f64::NAN)
            );
        }
    }
    let warnings = report
        .failures
        .iter()
        .map(|(rep, e)| format!("replication {rep} failed: {e}"))
        .collect();
    Ok(Outcome {
        artifacts: out.written,
        boundary: false,
        warnings,
        summary,
    })
}

/// Relevance surface computed row by row on the worker pool; rows are
/// stitched back in grid order.
fn parallel_surface<D: blp_ife_core::lsmd::DeltaMap + Sync + ?Sized>(
    rel: &Relevance<'_, D>,
    alpha0: &[f64],
    alpha_grid: &[f64],
    beta_index: usize,
    beta_grid: &[f64],
    factors: usize,
    threads: usize,
) -> Result<RelevanceSurface> {
    use rayon::prelude::*;
    let parts: Vec<RelevanceSurface> = pool(threads)?.install(|| {
        alpha_grid
            .par_iter()
            .map(|&a| rel.surface(alpha0, &[a], beta_index, beta_grid, factors))
            .collect::<blp_ife_core::Result<_>>()
    })?;
    let (na, nb) = (alpha_grid.len(), beta_grid.len());
    let stitch = |get: fn(&RelevanceSurface) -> &DMatrix<f64>| DMatrix::from_fn(na, nb, |i, k| get(&parts[i])[(0, k)]);
    Ok(RelevanceSurface {
        alpha_grid: alpha_grid.to_vec(),
        beta_grid: beta_grid.to_vec(),
        rho_iv: stitch(|s| &s.rho_iv),
        rho_f: stitch(|s| &s.rho_f),
        delta_rho: stitch(|s| &s.delta_rho),
        factors,
        degenerate: parts.iter().map(|s| s.degenerate).sum(),
    })
}

fn write_surface(out: &mut Output, s: &RelevanceSurface) -> Result<()> {
    let mut w = csv::Writer::from_writer(out.file("surface.csv")?);
    w.write_record(["alpha", "beta", "rho_iv", "rho_f", "delta_rho"])?;
    for row in s.rows() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io("surface.csv", e))
}

fn write_profile(out: &mut Output, grid: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out.file("profile.csv")?);
    w.write_record(["beta", "objective"])?;
    for (b, v) in grid.iter().zip(values) {
        w.write_record([b.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("profile.csv", e))
}

fn range_json(r: Option<(f64, f64)>) -> Value {
    r.map_or(Value::Null, |(lo, hi)| json!([lo, hi]))
}

fn window(set: Option<(f64, f64)>, centre: f64) -> (f64, f64) {
    set.unwrap_or((centre - 1.0, centre + 1.0))
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Outcome> {
    let opts = EstimatorOptions::default();
    let threads = resolve_threads(cfg.threads)?;
    let mut out = Output::new(&cfg.out)?;
    let n = cfg.grid_points;
    let mut doc = json!({ "settings": settings(cfg, &opts)? });
    let mut summary = String::new();
    let mut warnings = Vec::new();

    if cfg.data.is_none() && cfg.design == DiagnoseDesign::Bimodal {
        let panel = generate_bimodal(cfg.products, cfg.markets, cfg.seed);
        let (lo, hi) = cfg.beta_grid.unwrap_or((-0.5, 1.5));
        let grid = linspace(lo, hi, n);
        let prof = objective_profile(&panel.y, &panel.x, &grid, cfg.factors)?;
        let fit = inner_ls(&panel.y, std::slice::from_ref(&panel.x), &[], cfg.factors, &opts.inner)?;
        let minima: Vec<f64> = local_minima(&prof).into_iter().map(|i| grid[i]).collect();
        write_profile(&mut out, &grid, &prof)?;
        doc["profile"] = json!({ "local_minima": minima, "inner_ls_beta": fit.beta[0], "truth": panel.beta0 });
        summary = format!("profile minima at {minima:?}; multi-start estimate {:.4}\n", fit.beta[0]);
        out.json("diagnose.json", &doc)?;
        return Ok(Outcome {
            artifacts: out.written,
            boundary: false,
            warnings,
            summary,
        });
    }

    // Reference point, loadings and the panel to diagnose.
    let (data, spec, alpha0, beta0, lambda0, boundary) = match &cfg.data {
        None => {
            let design = SimulationDesign {
                products: cfg.products,
                markets: cfg.markets,
                factors: cfg.factors_true,
                alpha0: cfg.alpha0,
                beta0: cfg.beta0,
                price_floor: cfg.price_floor,
                nodes: cfg.nodes,
            };
            let sim = generate(&design, cfg.seed)?;
            let bounds = cfg.alpha_bounds.first().copied().unwrap_or((0.0, 5.0));
            let spec = RandomCoeffSpec::new(vec![0], vec![bounds], QuadratureKind::GaussHermite { nodes: cfg.nodes })?;
            doc["reference"] = json!({ "kind": "truth", "alpha": [cfg.alpha0], "beta": [cfg.beta0] });
            (sim.data, spec, vec![cfg.alpha0], vec![cfg.beta0], sim.truth.lambda, false)
        }
        Some(_) => {
            let p = prepare(cfg)?;
            warnings.extend(p.warnings.iter().cloned());
            let (est, _) = fit(cfg, &p, &opts)?;
            if est.boundary {
                warnings.push(boundary_warning(&est));
            }
            doc["reference"] = json!({
                "kind": "estimate",
                "alpha": report::values(&est.alpha),
                "beta": report::values(&est.beta),
            });
            let (a, b) = (est.alpha.iter().copied().collect(), est.beta.iter().copied().collect());
            (p.data, p.spec, a, b, est.factors.lambda.clone(), est.boundary)
        }
    };
    let beta_index = spec.rc_indices()[0];
    let map = ShareInversion {
        data: &data,
        spec: &spec,
        opts: opts.inversion,
    };
    let design = Design::from_panel(&data);
    let rel = Relevance::new(&map, &design, &alpha0, &beta0, &lambda0)?;
    let (alo, ahi) = window(cfg.alpha_grid, alpha0[0]);
    let alpha_grid = linspace(alo.max(0.0), ahi, n);
    let (blo, bhi) = window(cfg.beta_grid, beta0[beta_index]);
    let beta_grid = linspace(blo, bhi, n);
    let surface = parallel_surface(&rel, &alpha0, &alpha_grid, beta_index, &beta_grid, cfg.factors, threads)?;
    write_surface(&mut out, &surface)?;

    // Step-1 objective along the random-coefficient regressor's slope,
    // holding alpha and the other slopes at the reference.
    let delta0 = rel.delta(&alpha0)?;
    let mut y = delta0;
    for (k, x) in data.regressors().iter().enumerate() {
        if k != beta_index {
            y -= x * beta0[k];
        }
    }
    let prof = objective_profile(&y, data.regressor(beta_index), &beta_grid, cfg.factors)?;
    write_profile(&mut out, &beta_grid, &prof)?;

    let positive = surface.delta_rho.iter().filter(|v| v.is_finite()).all(|v| *v > 0.0);
    doc["surface"] = json!({
        "rho_iv": range_json(surface.rho_iv_range()),
        "rho_f": range_json(surface.rho_f_range()),
        "delta_rho": range_json(surface.delta_rho_range()),
        "degenerate_points": surface.degenerate,
        "delta_rho_positive": positive,
    });
    doc["profile"] = json!({
        "local_minima": local_minima(&prof).into_iter().map(|i| beta_grid[i]).collect::<Vec<_>>(),
    });
    out.json("diagnose.json", &doc)?;
    let fmt = |r: Option<(f64, f64)>| r.map_or("n/a".to_owned(), |(a, b)| format!("[{a:.3}, {b:.3}]"));
    summary += &format!(
        "rho_iv {}  rho_f {}  delta_rho {}  ({} degenerate points)\n",
        fmt(surface.rho_iv_range()),
        fmt(surface.rho_f_range()),
        fmt(surface.delta_rho_range()),
        surface.degenerate
    );
    if !positive {
        warnings.push("delta_rho is not positive everywhere on the grid".into());
    }
    Ok(Outcome {
        artifacts: out.written,
        boundary,
        warnings,
        summary,
    })
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cmd_elasticity(cfg: &RunConfig) -> Result<Outcome> {
    let opts = EstimatorOptions::default();
    let p = prepare(cfg)?;
    let price = cfg.price.clone().unwrap_or_else(|| p.random[0].clone());
    let price_index = column(&p.data, &price)?;
    let markets: Vec<usize> = match &cfg.market {
        None => (0..p.data.markets()).collect(),
        Some(label) => vec![p.data.market_labels().iter().position(|m| m == label).ok_or_else(|| {
            Error::Config(format!("no market labelled '{label}'"))
        })?],
    };
    let (est, _) = fit(cfg, &p, &opts)?;
    let mut out = Output::new(&cfg.out)?;
    let mut own = Vec::new();
    let mut warnings = p.warnings.clone();
    if est.boundary {
        warnings.push(boundary_warning(&est));
    }
    for t in markets {
        let e = elasticity_matrix(&est, &p.data, &p.spec, price_index, t)?;
        let name = format!("elasticities_{}.csv", file_label(&e.market_label));
        write_matrix_csv(out.file(&name)?, "share\\price", &e.labels, &e.labels, &e.matrix)?;
        let d = e.matrix.diagonal();
        own.push(json!({ "market": e.market_label, "mean_own": d.mean(), "min_own": d.min(), "max_own": d.max() }));
    }
    let doc = json!({
        "settings": settings(cfg, &opts)?,
        "price": price,
        "estimate": report::estimate_json(&est),
        "markets": own,
    });
    out.json("elasticities.json", &doc)?;
    Ok(Outcome {
        artifacts: out.written,
        boundary: est.boundary,
        warnings,
        summary: format!("elasticities for {} market(s) written to {}\n", own.len(), cfg.out.display()),
    })
}
