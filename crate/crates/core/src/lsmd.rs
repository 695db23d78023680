//! The three-step LS-MD estimator.
//!
//! 1. For a candidate `alpha`, regress `delta(alpha)` on the regressors and
//!    the instruments with `R` interactive fixed effects, giving `gamma(alpha)`.
//! 2. Choose `alpha` to minimize `gamma(alpha)' W gamma(alpha)`.
//! 3. Re-run the least-squares step at the chosen `alpha` without the
//!    instruments to obtain `beta`, `lambda` and `f`.
//!
//! With endogenous regressors their coefficients join `alpha` in the outer
//! problem and they are subtracted from the mean utility before step 1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::{principal_components, residual_spectrum, FactorEstimate, InnerOptions, InnerProblem, StepOneFit};
use crate::linalg::{annihilator, stack_vec, sym_eigenvalues_desc, symmetrize};
use crate::optim::{brent, nelder_mead, NelderMeadOptions};
use crate::panel::{PanelData, RandomCoeffSpec};
use crate::shares::{invert_shares_all, InversionOptions};

/// A map from taste parameters to a `J x T` mean-utility matrix.
pub trait DeltaMap {
    fn dims(&self) -> (usize, usize);

    fn alpha_bounds(&self) -> &[(f64, f64)];

    /// `warm` is a previously computed `delta` that may seed an iterative
    /// solver.
    fn delta(&self, alpha: &[f64], warm: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>>;

    fn alpha_dim(&self) -> usize {
        self.alpha_bounds().len()
    }
}

/// `delta(alpha)` by inverting the observed market shares.
#[derive(Debug, Clone)]
pub struct ShareInversion<'a> {
    pub data: &'a PanelData,
    pub spec: &'a RandomCoeffSpec,
    pub opts: InversionOptions,
}

impl DeltaMap for ShareInversion<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.data.products(), self.data.markets())
    }

    fn alpha_bounds(&self) -> &[(f64, f64)] {
        self.spec.alpha_bounds()
    }

    fn delta(&self, alpha: &[f64], warm: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        invert_shares_all(self.data, self.spec, alpha, &self.opts, warm)
    }
}

/// `delta(alpha) = base - sum_l alpha_l slope_l`, a linear model in which
/// `alpha` are ordinary coefficients.
#[derive(Debug, Clone)]
pub struct LinearDelta {
    pub base: DMatrix<f64>,
    pub slopes: Vec<DMatrix<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl DeltaMap for LinearDelta {
    fn dims(&self) -> (usize, usize) {
        self.base.shape()
    }

    fn alpha_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn delta(&self, alpha: &[f64], _warm: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let mut d = self.base.clone();
        for (a, s) in alpha.iter().zip(&self.slopes) {
            d.zip_apply(s, |o, v| *o -= a * v);
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Identity,
    User,
    /// `(1/JT) z' M_{x^{lambda f}} z` from a first-stage fit.
    Optimal,
    /// `(1/JT) z' M_x z`, ignoring the factors.
    BlpEmpirical,
}

impl WeightKind {
    pub fn name(&self) -> &'static str {
        match self {
            WeightKind::Identity => "identity",
            WeightKind::User => "user",
            WeightKind::Optimal => "optimal",
            WeightKind::BlpEmpirical => "blp-empirical",
        }
    }
}

/// Symmetric positive definite `M x M` weight on `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    kind: WeightKind,
    matrix: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn identity(m: usize) -> Self {
        Self {
            kind: WeightKind::Identity,
            matrix: DMatrix::identity(m, m),
        }
    }

    pub fn user(matrix: DMatrix<f64>) -> Result<Self> {
        Self::checked(WeightKind::User, matrix)
    }

    fn checked(kind: WeightKind, matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch("weight matrix must be square and non-empty".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidConfig("weight matrix is not symmetric".into()));
        }
        let matrix = symmetrize(&matrix);
        let ev = sym_eigenvalues_desc(&matrix);
        let (top, bottom) = (ev[0], ev[ev.len() - 1]);
        if !(top > 0.0) || bottom < 1e-12 * top {
            return Err(Error::SingularWeight {
                ratio: if top > 0.0 { bottom / top } else { 0.0 },
            });
        }
        Ok(Self { kind, matrix })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kind: self.kind,
            matrix: &self.matrix * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    pub inversion: InversionOptions,
    pub inner: InnerOptions,
    /// Grid points used to bracket a one-dimensional outer minimum.
    pub grid_points: usize,
    /// Relative tolerance of the outer line search.
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    /// Nelder-Mead restarts for multi-dimensional outer problems.
    pub restarts: usize,
    pub simplex_max_evals: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            inversion: InversionOptions::default(),
            inner: InnerOptions::default(),
            grid_points: 11,
            outer_tol: 1e-7,
            outer_max_iter: 100,
            restarts: 3,
            simplex_max_evals: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsmdEstimate {
    /// `L` taste parameters.
    pub alpha: DVector<f64>,
    /// All `K` coefficients in the panel's regressor order.
    pub beta: DVector<f64>,
    /// Indices of regressors whose coefficients were estimated in the outer
    /// problem.
    pub endogenous: Vec<usize>,
    /// `gamma` from step 1 at the estimate.
    pub gamma: DVector<f64>,
    /// Step-1 coefficients of the exogenous regressors at the estimate.
    pub beta_step1: DVector<f64>,
    pub factors: FactorEstimate,
    /// `delta(alpha) - beta . X - lambda f'`.
    pub residuals: DMatrix<f64>,
    /// `delta(alpha)` at the estimate.
    pub delta: DMatrix<f64>,
    pub step2_value: f64,
    pub weight: WeightMatrix,
    /// Some estimated outer parameter lies on the box boundary.
    pub boundary: bool,
    /// Eigenvalues of `U'U / JT` with `U = delta - beta . X`, largest first.
    pub residual_spectrum: DVector<f64>,
    pub evaluations: usize,
}

impl LsmdEstimate {
    pub fn num_factors(&self) -> usize {
        self.factors.factors()
    }

    /// `(alpha, beta_end)`.
    pub fn outer_parameters(&self) -> DVector<f64> {
        let l = self.alpha.len();
        DVector::from_fn(l + self.endogenous.len(), |i, _| {
            if i < l {
                self.alpha[i]
            } else {
                self.beta[self.endogenous[i - l]]
            }
        })
    }
}

/// Regressor roles for the generic estimator.
#[derive(Debug, Clone)]
pub struct Design<'a> {
    pub regressors: &'a [DMatrix<f64>],
    pub exogenous: &'a [bool],
    pub instruments: &'a [DMatrix<f64>],
}

impl<'a> Design<'a> {
    pub fn from_panel(data: &'a PanelData) -> Self {
        Self {
            regressors: data.regressors(),
            exogenous: data.exogenous(),
            instruments: data.instruments(),
        }
    }

    fn split(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<usize>, Vec<usize>) {
        let mut exo = Vec::new();
        let mut end = Vec::new();
        let mut exo_idx = Vec::new();
        let mut end_idx = Vec::new();
        for (k, x) in self.regressors.iter().enumerate() {
            if self.exogenous[k] {
                exo.push(x.clone());
                exo_idx.push(k);
            } else {
                end.push(x.clone());
                end_idx.push(k);
            }
        }
        (exo, end, exo_idx, end_idx)
    }
}

struct Outer<'a, D: DeltaMap + ?Sized> {
    map: &'a D,
    x_end: Vec<DMatrix<f64>>,
    step1: InnerProblem,
    weight: &'a WeightMatrix,
    l: usize,
    warm_delta: Option<DMatrix<f64>>,
    warm_theta: Option<DVector<f64>>,
    evaluations: usize,
    last_error: Option<Error>,
}

impl<D: DeltaMap + ?Sized> Outer<'_, D> {
    fn working_delta(&mut self, params: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let alpha = &params[..self.l];
        let delta = self
            .map
            .delta(alpha, self.warm_delta.as_ref())
            .map_err(|e| e.at_alpha(alpha))?;
        let mut y = delta.clone();
        for (b, x) in params[self.l..].iter().zip(&self.x_end) {
            y.zip_apply(x, |o, v| *o -= b * v);
        }
        self.warm_delta = Some(delta.clone());
        Ok((delta, y))
    }

    fn evaluate(&mut self, params: &[f64]) -> Result<(f64, StepOneFit)> {
        self.evaluations += 1;
        let (_, y) = self.working_delta(params)?;
        let fit = self
            .step1
            .solve(&y, self.warm_theta.as_ref())
            .map_err(|e| e.at_alpha(&params[..self.l]))?;
        self.warm_theta = Some(fit.coefficients());
        let value = fit.gamma.dot(&(self.weight.matrix() * &fit.gamma));
        Ok((value, fit))
    }

    fn value(&mut self, params: &[f64]) -> f64 {
        match self.evaluate(params) {
            Ok((v, _)) => v,
            Err(e) => {
                self.last_error = Some(e);
                f64::INFINITY
            }
        }
    }
}

/// `gamma(alpha)' W gamma(alpha)` with the step-1 fit, for exogenous
/// regressors only.
pub fn step2_objective(
    alpha: &[f64],
    data: &PanelData,
    spec: &RandomCoeffSpec,
    factors: usize,
    weight: &WeightMatrix,
    opts: &EstimatorOptions,
) -> Result<(f64, StepOneFit)> {
    let map = ShareInversion {
        data,
        spec,
        opts: opts.inversion,
    };
    let delta = map.delta(alpha, None).map_err(|e| e.at_alpha(alpha))?;
    let exo: Vec<DMatrix<f64>> = data.exogenous_indices().iter().map(|&k| data.regressor(k).clone()).collect();
    let fit = InnerProblem::new(&exo, data.instruments(), factors, opts.inner.clone())?
        .solve(&delta, None)
        .map_err(|e| e.at_alpha(alpha))?;
    if weight.dim() != fit.gamma.len() {
        return Err(Error::DimensionMismatch(format!(
            "weight is {}x{} but there are {} instruments",
            weight.dim(),
            weight.dim(),
            fit.gamma.len()
        )));
    }
    Ok((fit.gamma.dot(&(weight.matrix() * &fit.gamma)), fit))
}

fn on_boundary(x: f64, (lo, hi): (f64, f64)) -> bool {
    let tol = 1e-5 * (hi - lo);
    x - lo <= tol || hi - x <= tol
}

/// Generic LS-MD: `map` supplies `delta(alpha)` and `design` the regressors.
pub fn estimate_with_map<D: DeltaMap + ?Sized>(
    map: &D,
    design: &Design<'_>,
    factors: usize,
    weight: &WeightMatrix,
    opts: &EstimatorOptions,
) -> Result<LsmdEstimate> {
    let (j, t) = map.dims();
    let l = map.alpha_dim();
    let m = design.instruments.len();
    let (x_exo, x_end, exo_idx, end_idx) = design.split();
    let k2 = x_end.len();
    if m < l + k2 {
        return Err(Error::UnderIdentified {
            instruments: m,
            required: l + k2,
        });
    }
    if weight.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "weight is {}x{} but there are {m} instruments",
            weight.dim(),
            weight.dim()
        )));
    }
    if design.regressors.iter().chain(design.instruments).any(|x| x.shape() != (j, t)) {
        return Err(Error::DimensionMismatch("regressors and instruments must be J x T".into()));
    }
    let step1 = InnerProblem::new(&x_exo, design.instruments, factors, opts.inner.clone())?;
    let bounds = map.alpha_bounds().to_vec();
    let mut outer = Outer {
        map,
        x_end,
        step1,
        weight,
        l,
        warm_delta: None,
        warm_theta: None,
        evaluations: 0,
        last_error: None,
    };

    let params: Vec<f64> = if l == 1 && k2 == 0 {
        minimize_line(&mut outer, bounds[0], opts)
    } else {
        minimize_simplex(&mut outer, &bounds, &exo_idx, design, opts)?
    };

    let (value, fit) = match outer.evaluate(&params) {
        Ok(v) => v,
        Err(e) => return Err(outer.last_error.take().unwrap_or(e)),
    };
    if !value.is_finite() {
        return Err(Error::NonConvergence("outer objective is not finite at the optimum".into()));
    }
    let (delta, y) = outer.working_delta(&params)?;

    // step 3: least squares without the instruments
    let (beta_exo, fac) = if x_exo.is_empty() {
        (DVector::zeros(0), principal_components(&y, factors)?)
    } else {
        let step3 = InnerProblem::new(&x_exo, &[], factors, opts.inner.clone())?;
        let fit3 = step3.solve(&y, Some(&fit.beta))?;
        (fit3.beta, fit3.factors)
    };
    let kk = design.regressors.len();
    let mut beta = DVector::zeros(kk);
    for (i, &k) in exo_idx.iter().enumerate() {
        beta[k] = beta_exo[i];
    }
    for (i, &k) in end_idx.iter().enumerate() {
        beta[k] = params[l + i];
    }
    let mut u = delta.clone();
    for (b, x) in beta.iter().zip(design.regressors) {
        u.zip_apply(x, |o, v| *o -= b * v);
    }
    let residuals = &u - fac.common_component();
    let boundary = params[..l].iter().zip(&bounds).any(|(a, b)| on_boundary(*a, *b));
    let spectrum = residual_spectrum(&u) / (j * t) as f64;
    Ok(LsmdEstimate {
        alpha: DVector::from_column_slice(&params[..l]),
        beta,
        endogenous: end_idx,
        gamma: fit.gamma,
        beta_step1: fit.beta,
        factors: fac,
        residuals,
        delta,
        step2_value: value,
        weight: weight.clone(),
        boundary,
        residual_spectrum: spectrum,
        evaluations: outer.evaluations,
    })
}

/// Grid bracket followed by Brent's method.
fn minimize_line<D: DeltaMap + ?Sized>(outer: &mut Outer<'_, D>, (lo, hi): (f64, f64), opts: &EstimatorOptions) -> Vec<f64> {
    let n = opts.grid_points.max(3);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&a| outer.value(&[a])).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n - 1)];
    // start the warm chain near the bracket
    outer.value(&[grid[best]]);
    let (x, fx, _) = brent(|x| outer.value(&[x]), a, b, opts.outer_tol, opts.outer_max_iter);
    if fx <= values[best] {
        vec![x]
    } else {
        vec![grid[best]]
    }
}

/// Nelder-Mead with restarts over `(alpha, beta_end)`.
fn minimize_simplex<D: DeltaMap + ?Sized>(
    outer: &mut Outer<'_, D>,
    bounds: &[(f64, f64)],
    exo_idx: &[usize],
    design: &Design<'_>,
    opts: &EstimatorOptions,
) -> Result<Vec<f64>> {
    let l = outer.l;
    let k2 = outer.x_end.len();
    let alpha0: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    // starting values for the endogenous coefficients: step 1 with them
    // treated as exogenous regressors
    let beta0: Vec<f64> = if k2 > 0 {
        let delta = outer.map.delta(&alpha0, None).map_err(|e| e.at_alpha(&alpha0))?;
        let all: Vec<DMatrix<f64>> = design.regressors.to_vec();
        let prob = InnerProblem::new(&all, design.instruments, outer.step1.factors(), opts.inner.clone())?;
        let fit = prob.solve(&delta, None)?;
        let end_pos: Vec<usize> = (0..design.regressors.len()).filter(|k| !exo_idx.contains(k)).collect();
        end_pos.iter().map(|&k| fit.beta[k]).collect()
    } else {
        Vec::new()
    };
    let mut x = DVector::from_iterator(l + k2, alpha0.iter().chain(beta0.iter()).copied());
    let mut box_bounds: Vec<(f64, f64)> = bounds.to_vec();
    box_bounds.extend(core::iter::repeat((f64::NEG_INFINITY, f64::INFINITY)).take(k2));
    let mut best = f64::INFINITY;
    for restart in 0..opts.restarts.max(1) {
        let shrink = 1.0 / (1 + restart) as f64;
        let step: Vec<f64> = (0..l + k2)
            .map(|i| {
                if i < l {
                    0.2 * (bounds[i].1 - bounds[i].0) * shrink
                } else {
                    0.25 * (1.0 + x[i].abs()) * shrink
                }
            })
            .collect();
        let mut nm = NelderMeadOptions::new(step);
        nm.bounds = Some(box_bounds.clone());
        nm.max_evals = opts.simplex_max_evals;
        nm.f_tol = 1e-14;
        nm.x_tol = opts.outer_tol;
        let res = nelder_mead(|p| outer.value(p.as_slice()), &x, &nm);
        if res.value <= best {
            best = res.value;
            x = res.x;
        }
    }
    if !best.is_finite() {
        return Err(outer
            .last_error
            .take()
            .unwrap_or_else(|| Error::NonConvergence("outer objective never finite".into())));
    }
    Ok(x.iter().copied().collect())
}

fn check_instruments(data: &PanelData, spec: &RandomCoeffSpec) -> Result<()> {
    let required = spec.alpha_dim() + data.num_endogenous();
    if data.num_instruments() < required {
        return Err(Error::UnderIdentified {
            instruments: data.num_instruments(),
            required,
        });
    }
    Ok(())
}

/// LS-MD with all regressors exogenous.
pub fn estimate(
    data: &PanelData,
    spec: &RandomCoeffSpec,
    factors: usize,
    weight: &WeightMatrix,
    opts: &EstimatorOptions,
) -> Result<LsmdEstimate> {
    if data.num_endogenous() > 0 {
        return Err(Error::InvalidConfig(
            "panel flags endogenous regressors; use estimate_endogenous".into(),
        ));
    }
    estimate_endogenous(data, spec, factors, weight, opts)
}

/// LS-MD with the panel's endogenous regressors moved to the outer problem.
pub fn estimate_endogenous(
    data: &PanelData,
    spec: &RandomCoeffSpec,
    factors: usize,
    weight: &WeightMatrix,
    opts: &EstimatorOptions,
) -> Result<LsmdEstimate> {
    spec.check_against(data)?;
    check_instruments(data, spec)?;
    let map = ShareInversion {
        data,
        spec,
        opts: opts.inversion,
    };
    estimate_with_map(&map, &Design::from_panel(data), factors, weight, opts)
}

/// Columns `vec(M_lambda A_i M_f)`.
pub fn project_both_sides(mats: &[DMatrix<f64>], factors: &FactorEstimate) -> DMatrix<f64> {
    let m_l = annihilator(&factors.lambda);
    let m_f = annihilator(&factors.f);
    let rows = factors.lambda.nrows() * factors.f.nrows();
    let projected: Vec<DMatrix<f64>> = mats.iter().map(|a| &m_l * a * &m_f).collect();
    stack_vec(&projected, rows)
}

/// `(1/JT) z' M_x z` for stacked `x` (`JT x K`) and `z` (`JT x M`).
fn partialled_gram(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let mz = if x.ncols() == 0 {
        z.clone()
    } else {
        let coef = crate::linalg::pinv_sym(&(x.transpose() * x)) * (x.transpose() * z);
        z - x * coef
    };
    symmetrize(&(z.transpose() * mz / n))
}

/// Efficient weight `(1/JT) z' M_{x^{lambda f}} z` given first-stage
/// factors; `x` are the step-1 regressors.
pub fn optimal_weight_from(x: &[DMatrix<f64>], z: &[DMatrix<f64>], factors: &FactorEstimate) -> Result<WeightMatrix> {
    let rows = factors.lambda.nrows() * factors.f.nrows();
    let xlf = project_both_sides(x, factors);
    let zs = stack_vec(z, rows);
    WeightMatrix::checked(WeightKind::Optimal, partialled_gram(&xlf, &zs))
}

pub fn optimal_weight(data: &PanelData, first_stage: &LsmdEstimate) -> Result<WeightMatrix> {
    let exo: Vec<DMatrix<f64>> = data.exogenous_indices().iter().map(|&k| data.regressor(k).clone()).collect();
    optimal_weight_from(&exo, data.instruments(), &first_stage.factors)
}

/// `(1/JT) z' M_x z` with the exogenous regressors `x`.
pub fn blp_empirical_weight(data: &PanelData) -> Result<WeightMatrix> {
    let rows = data.products() * data.markets();
    let exo: Vec<DMatrix<f64>> = data.exogenous_indices().iter().map(|&k| data.regressor(k).clone()).collect();
    WeightMatrix::checked(
        WeightKind::BlpEmpirical,
        partialled_gram(&stack_vec(&exo, rows), &stack_vec(data.instruments(), rows)),
    )
}

/// First stage with the identity weight, then one re-estimation with the
/// optimal weight built from the first-stage factors.
pub fn estimate_two_stage(
    data: &PanelData,
    spec: &RandomCoeffSpec,
    factors: usize,
    opts: &EstimatorOptions,
) -> Result<(LsmdEstimate, LsmdEstimate)> {
    let first = estimate_endogenous(data, spec, factors, &WeightMatrix::identity(data.num_instruments()), opts)?;
    let w = optimal_weight(data, &first)?;
    let second = estimate_endogenous(data, spec, factors, &w, opts)?;
    Ok((first, second))
}
