//! Least squares with interactive fixed effects.
//!
//! For a `J x T` matrix `Y` the minimum of `|Y - lambda f'|_F^2` over rank-`R`
//! factor structures is the sum of the trailing eigenvalues of `Y'Y`. The
//! inner problem of the estimator minimizes that profiled objective over the
//! coefficients of a set of regressors.

use alloc::vec;
use alloc::vec::Vec;
use libm::sqrt;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, inv_sym, pinv_sym, stack_vec, sym_eigen_desc, sym_eigenvalues_desc};
use crate::optim::{bfgs, nelder_mead, BfgsOptions, NelderMeadOptions};
use crate::rng::NormalStream;

/// Estimated loadings (`J x R`) and factors (`T x R`). Only `lambda f'` is
/// identified.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub lambda: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl FactorEstimate {
    pub fn empty(products: usize, markets: usize) -> Self {
        Self {
            lambda: DMatrix::zeros(products, 0),
            f: DMatrix::zeros(markets, 0),
        }
    }

    pub fn factors(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn common_component(&self) -> DMatrix<f64> {
        &self.lambda * self.f.transpose()
    }
}

pub(crate) fn check_factors(products: usize, markets: usize, factors: usize) -> Result<()> {
    let max = products.min(markets);
    if factors >= max {
        return Err(Error::TooManyFactors { factors, max });
    }
    Ok(())
}

/// `sum_{r > R} mu_r(Y'Y)`, using the Gram matrix of the smaller side.
pub fn profiled_objective(y: &DMatrix<f64>, factors: usize) -> Result<f64> {
    check_factors(y.nrows(), y.ncols(), factors)?;
    let gram = if y.ncols() <= y.nrows() {
        y.transpose() * y
    } else {
        y * y.transpose()
    };
    let mu = sym_eigenvalues_desc(&gram);
    Ok(mu.iter().skip(factors).map(|v| v.max(0.0)).sum())
}

/// Ordered eigenvalues of the smaller Gram matrix of `Y`.
pub fn residual_spectrum(y: &DMatrix<f64>) -> DVector<f64> {
    let gram = if y.ncols() <= y.nrows() {
        y.transpose() * y
    } else {
        y * y.transpose()
    };
    sym_eigenvalues_desc(&gram).map(|v| v.max(0.0))
}

/// Residual `Y - lambda f'` of the best rank-`R` approximation.
pub(crate) fn low_rank_residual(y: &DMatrix<f64>, factors: usize) -> DMatrix<f64> {
    if factors == 0 {
        return y.clone();
    }
    if y.nrows() <= y.ncols() {
        let (_, v) = sym_eigen_desc(&(y * y.transpose()));
        let top = v.columns(0, factors);
        y - top * (top.transpose() * y)
    } else {
        let (_, u) = sym_eigen_desc(&(y.transpose() * y));
        let top = u.columns(0, factors);
        y - (y * top) * top.transpose()
    }
}

/// Principal-components factors: `lambda = sqrt(J)` times the leading
/// eigenvectors of `YY'`, `f = Y' lambda (lambda' lambda)^+`.
///
/// Each loading column is sign-normalized so that its largest-magnitude
/// entry is positive.
pub fn principal_components(y: &DMatrix<f64>, factors: usize) -> Result<FactorEstimate> {
    let (j, t) = y.shape();
    check_factors(j, t, factors)?;
    if factors == 0 {
        return Ok(FactorEstimate::empty(j, t));
    }
    let mut vecs = DMatrix::zeros(j, factors);
    if j <= t {
        let (_, v) = sym_eigen_desc(&(y * y.transpose()));
        vecs.copy_from(&v.columns(0, factors));
    } else {
        let (mu, u) = sym_eigen_desc(&(y.transpose() * y));
        let scale = mu[0].max(0.0);
        for r in 0..factors {
            if mu[r] > 1e-14 * scale && mu[r] > 0.0 {
                let c = (y * u.column(r)) / sqrt(mu[r]);
                vecs.set_column(r, &c);
            }
        }
    }
    for r in 0..factors {
        let mut col = vecs.column_mut(r);
        let pivot = col.iter().copied().fold(0.0_f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    let lambda = vecs * sqrt(j as f64);
    let f = y.transpose() * &lambda * pinv_sym(&(lambda.transpose() * &lambda));
    Ok(FactorEstimate { lambda, f })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOptions {
    /// Total number of starts, counting the least-squares start.
    pub starts: usize,
    /// Perturbation scale of the random starts, in multiples of the
    /// ordinary least-squares standard errors.
    pub perturbation: f64,
    /// Lower bound on the perturbation scale relative to `1 + |theta_ols|`.
    pub min_relative_perturbation: f64,
    pub seed: u64,
    pub bfgs: BfgsOptions,
    /// Smallest admissible eigenvalue of `(x,z)'(x,z)/JT` relative to the
    /// largest.
    pub collinearity_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            perturbation: 10.0,
            min_relative_perturbation: 0.5,
            seed: 0x5eed,
            bfgs: BfgsOptions::default(),
            collinearity_tol: 1e-12,
        }
    }
}

/// One start of the multi-start search.
#[derive(Debug, Clone, PartialEq)]
pub struct StartRecord {
    pub start: DVector<f64>,
    pub solution: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub used_simplex: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOneFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub factors: FactorEstimate,
    pub objective: f64,
    pub optimizer_trace: Vec<StartRecord>,
}

impl StepOneFit {
    /// `(beta, gamma)` stacked.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.beta.len() + self.gamma.len());
        out.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        out.rows_mut(self.beta.len(), self.gamma.len()).copy_from(&self.gamma);
        out
    }
}

/// The inner problem for fixed regressors, reusable across many left-hand
/// sides. Construction validates the design once.
#[derive(Debug, Clone)]
pub struct InnerProblem {
    regressors: Vec<DMatrix<f64>>,
    k: usize,
    factors: usize,
    design: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    opts: InnerOptions,
}

impl InnerProblem {
    /// `x` are the `K` regressors and `z` the `M` auxiliary regressors.
    pub fn new(x: &[DMatrix<f64>], z: &[DMatrix<f64>], factors: usize, opts: InnerOptions) -> Result<Self> {
        let first = x
            .first()
            .or_else(|| z.first())
            .ok_or_else(|| Error::DimensionMismatch("no regressors".into()))?;
        let (j, t) = first.shape();
        check_factors(j, t, factors)?;
        let regressors: Vec<DMatrix<f64>> = x.iter().chain(z.iter()).cloned().collect();
        if regressors.iter().any(|m| m.shape() != (j, t)) {
            return Err(Error::DimensionMismatch("regressors must all be J x T".into()));
        }
        let design = stack_vec(&regressors, j * t);
        let gram = design.transpose() * &design;
        let ev = sym_eigenvalues_desc(&(&gram / (j * t) as f64));
        let (top, bottom) = (ev[0], ev[ev.len() - 1]);
        if !(bottom > opts.collinearity_tol * top.max(f64::MIN_POSITIVE)) {
            return Err(Error::CollinearDesign { min_eigenvalue: bottom });
        }
        Ok(Self {
            gram_inv: inv_sym(&gram),
            regressors,
            k: x.len(),
            factors,
            design,
            opts,
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn dims(&self) -> (usize, usize) {
        self.regressors[0].shape()
    }

    pub fn num_coefficients(&self) -> usize {
        self.regressors.len()
    }

    fn residual(&self, y: &DMatrix<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (c, x) in theta.iter().zip(&self.regressors) {
            out.zip_apply(x, |o, v| *o -= c * v);
        }
        out
    }

    /// Profiled objective at coefficients `theta`.
    pub fn objective(&self, y: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
        frobenius_sq(&low_rank_residual(&self.residual(y, theta), self.factors))
    }

    /// Objective and its gradient. By the envelope theorem the gradient
    /// is `-2 <X_i, Y - lambda f'>` at the profiled factors.
    pub fn objective_and_gradient(&self, y: &DMatrix<f64>, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let e = low_rank_residual(&self.residual(y, theta), self.factors);
        let g = DVector::from_iterator(self.regressors.len(), self.regressors.iter().map(|x| -2.0 * x.dot(&e)));
        (frobenius_sq(&e), g)
    }

    /// Pooled least squares ignoring the factors.
    pub fn ols(&self, y: &DMatrix<f64>) -> DVector<f64> {
        let yv = DVector::from_column_slice(y.as_slice());
        &self.gram_inv * (self.design.transpose() * yv)
    }

    fn ols_standard_errors(&self, y: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (j, t) = self.dims();
        let dof = (j * t).saturating_sub(theta.len()).max(1) as f64;
        let s2 = frobenius_sq(&self.residual(y, theta)) / dof;
        DVector::from_iterator(theta.len(), (0..theta.len()).map(|i| sqrt((s2 * self.gram_inv[(i, i)]).max(0.0))))
    }

    fn local_search(&self, y: &DMatrix<f64>, start: &DVector<f64>) -> StartRecord {
        let m = bfgs(|th| Some(self.objective_and_gradient(y, th)), start, &self.opts.bfgs);
        if m.converged {
            return StartRecord {
                start: start.clone(),
                solution: m.x,
                objective: m.value,
                iterations: m.iterations,
                converged: true,
                used_simplex: false,
            };
        }
        // Kinks at eigenvalue crossings can stall the quasi-Newton search;
        // restart from its best point without derivatives, then polish.
        let step: Vec<f64> = m.x.iter().map(|v| 0.1 * (1.0 + v.abs())).collect();
        let mut nm_opts = NelderMeadOptions::new(step);
        nm_opts.max_evals = 400 * (1 + start.len());
        let nm = nelder_mead(|th| self.objective(y, th), &m.x, &nm_opts);
        let polish = bfgs(|th| Some(self.objective_and_gradient(y, th)), &nm.x, &self.opts.bfgs);
        let (x, v) = if polish.value <= nm.value {
            (polish.x, polish.value)
        } else {
            (nm.x, nm.value)
        };
        let g = self.objective_and_gradient(y, &x).1;
        let converged = polish.converged || nm.converged || g.amax() < 1e3 * self.opts.bfgs.grad_tol * (1.0 + v.abs());
        StartRecord {
            start: start.clone(),
            solution: x,
            objective: v,
            iterations: m.iterations + nm.iterations + polish.iterations,
            converged,
            used_simplex: true,
        }
    }

    fn fit_from(&self, y: &DMatrix<f64>, theta: DVector<f64>, objective: f64, trace: Vec<StartRecord>) -> Result<StepOneFit> {
        let factors = principal_components(&self.residual(y, &theta), self.factors)?;
        let beta = theta.rows(0, self.k).into_owned();
        let gamma = theta.rows(self.k, theta.len() - self.k).into_owned();
        Ok(StepOneFit {
            beta,
            gamma,
            factors,
            objective,
            optimizer_trace: trace,
        })
    }

    /// Multi-start minimization of the profiled objective for the
    /// left-hand side `y`.
    ///
    /// Starts, in order: pooled least squares, the optional `warm` point,
    /// the origin, then Gaussian perturbations of the least-squares point.
    /// The lowest objective wins, ties going to the earliest start.
    pub fn solve(&self, y: &DMatrix<f64>, warm: Option<&DVector<f64>>) -> Result<StepOneFit> {
        if y.shape() != self.dims() {
            return Err(Error::DimensionMismatch("left-hand side must be J x T".into()));
        }
        let ols = self.ols(y);
        if self.factors == 0 {
            let value = frobenius_sq(&self.residual(y, &ols));
            let rec = StartRecord {
                start: ols.clone(),
                solution: ols.clone(),
                objective: value,
                iterations: 0,
                converged: true,
                used_simplex: false,
            };
            return self.fit_from(y, ols, value, vec![rec]);
        }
        let p = ols.len();
        let mut starts = vec![ols.clone()];
        if let Some(w) = warm {
            if w.len() == p && w.iter().all(|v| v.is_finite()) {
                starts.push(w.clone());
            }
        }
        starts.push(DVector::zeros(p));
        let se = self.ols_standard_errors(y, &ols);
        let mut rng = NormalStream::new(self.opts.seed);
        let random = self.opts.starts.saturating_sub(1);
        for _ in 0..random {
            let s = DVector::from_iterator(
                p,
                (0..p).map(|i| {
                    let scale = (self.opts.perturbation * se[i])
                        .max(self.opts.min_relative_perturbation * (1.0 + ols[i].abs()));
                    ols[i] + scale * rng.normal()
                }),
            );
            starts.push(s);
        }
        let trace: Vec<StartRecord> = starts.iter().map(|s| self.local_search(y, s)).collect();
        let best = trace
            .iter()
            .enumerate()
            .filter(|(_, r)| r.converged && r.objective.is_finite())
            .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i);
        let Some(best) = best else {
            return Err(Error::NonConvergence(alloc::format!(
                "inner least squares: none of {} starts converged",
                trace.len()
            )));
        };
        let theta = trace[best].solution.clone();
        let value = trace[best].objective;
        self.fit_from(y, theta, value, trace)
    }
}

/// One-shot inner least squares of `delta` on `(x, z)` with `R` factors.
pub fn inner_ls(
    delta: &DMatrix<f64>,
    x: &[DMatrix<f64>],
    z: &[DMatrix<f64>],
    factors: usize,
    opts: &InnerOptions,
) -> Result<StepOneFit> {
    InnerProblem::new(x, z, factors, opts.clone())?.solve(delta, None)
}
