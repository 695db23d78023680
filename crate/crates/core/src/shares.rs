//! Random-coefficients logit share map and its inverse.
//!
//! For market `t` the share of product `j` is
//! `s_j = sum_q w_q exp(d_j + mu_jq) / (1 + sum_l exp(d_l + mu_lq))`
//! with `mu_jq = sum_d alpha_d z_qd x_jd`; the outside good has utility 0.

use alloc::vec;
use alloc::vec::Vec;
use libm::{exp, log};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::{PanelData, RandomCoeffSpec};
use crate::quadrature::QuadratureRule;

/// How `invert_shares` solves `s(delta) = s_obs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMethod {
    /// BLP fixed point `delta <- delta + log s_obs - log s(delta)`.
    Contraction,
    /// Newton on `log s(delta) = log s_obs`, taking a contraction step
    /// instead whenever the Newton step fails to reduce the residual.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionOptions {
    /// Convergence threshold on the max-norm of the `delta` update.
    pub tol: f64,
    pub max_iter: usize,
    pub method: InversionMethod,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 5000,
            method: InversionMethod::Newton,
        }
    }
}

/// Per-market taste offsets `mu` (`J x Q`) for a fixed `alpha`.
#[derive(Debug, Clone)]
pub struct MarketTastes<'a> {
    mu: DMatrix<f64>,
    weights: &'a [f64],
}

impl<'a> MarketTastes<'a> {
    /// `rc_x` is `J x D`; `alpha` has length `D`.
    pub fn new(rc_x: &DMatrix<f64>, alpha: &[f64], rule: &'a QuadratureRule) -> Self {
        let j = rc_x.nrows();
        let q = rule.len();
        let nodes = rule.nodes();
        let mut mu = DMatrix::zeros(j, q);
        for (d, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for qi in 0..q {
                let v = a * nodes[(qi, d)];
                for p in 0..j {
                    mu[(p, qi)] += v * rc_x[(p, d)];
                }
            }
        }
        Self {
            mu,
            weights: rule.weights(),
        }
    }

    pub fn products(&self) -> usize {
        self.mu.nrows()
    }

    /// Aggregate shares; optionally also stores the per-node choice
    /// probabilities (`J x Q`) in `probs`.
    fn evaluate(&self, delta: &DVector<f64>, shares: &mut DVector<f64>, mut probs: Option<&mut DMatrix<f64>>) -> bool {
        let j = self.products();
        shares.fill(0.0);
        let mut e = vec![0.0; j];
        for (qi, &w) in self.weights.iter().enumerate() {
            let mut m = 0.0_f64;
            for p in 0..j {
                let u = delta[p] + self.mu[(p, qi)];
                e[p] = u;
                if u > m {
                    m = u;
                }
            }
            let mut denom = exp(-m);
            for v in e.iter_mut() {
                *v = exp(*v - m);
                denom += *v;
            }
            let inv = 1.0 / denom;
            for p in 0..j {
                let pi = e[p] * inv;
                shares[p] += w * pi;
                if let Some(pr) = probs.as_deref_mut() {
                    pr[(p, qi)] = pi;
                }
            }
        }
        shares.iter().all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn shares(&self, delta: &DVector<f64>) -> Option<DVector<f64>> {
        let mut s = DVector::zeros(self.products());
        self.evaluate(delta, &mut s, None).then_some(s)
    }

    /// Shares plus per-node probabilities.
    pub fn shares_and_probs(&self, delta: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut s = DVector::zeros(self.products());
        let mut pr = DMatrix::zeros(self.products(), self.weights.len());
        self.evaluate(delta, &mut s, Some(&mut pr)).then_some((s, pr))
    }

    /// `ds_j / d delta_k = sum_q w_q pi_jq (1{j=k} - pi_kq)`.
    pub fn jacobian_from_probs(&self, shares: &DVector<f64>, probs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut weighted = probs.clone();
        for (qi, &w) in self.weights.iter().enumerate() {
            weighted.column_mut(qi).scale_mut(w);
        }
        DMatrix::from_diagonal(shares) - weighted * probs.transpose()
    }

    pub fn weights(&self) -> &[f64] {
        self.weights
    }

    pub fn offsets(&self) -> &DMatrix<f64> {
        &self.mu
    }
}

/// Market shares `s_t(delta_t, X_t; alpha)`.
///
/// `rc_x` is the `J x D` slice of random-coefficient characteristics in
/// the market; `market` only labels errors.
pub fn compute_shares(
    delta_t: &DVector<f64>,
    rc_x: &DMatrix<f64>,
    alpha: &[f64],
    rule: &QuadratureRule,
    market: usize,
) -> Result<DVector<f64>> {
    check_alpha_dims(rc_x, alpha, rule)?;
    if delta_t.iter().any(|d| !d.is_finite()) {
        return Err(Error::NumericOverflow { market });
    }
    let tastes = MarketTastes::new(rc_x, alpha, rule);
    let s = tastes.shares(delta_t).ok_or(Error::NumericOverflow { market })?;
    if s.sum() >= 1.0 {
        return Err(Error::NumericOverflow { market });
    }
    Ok(s)
}

fn check_alpha_dims(rc_x: &DMatrix<f64>, alpha: &[f64], rule: &QuadratureRule) -> Result<()> {
    if alpha.len() != rc_x.ncols() || rule.dims() != alpha.len() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "alpha has {} entries, characteristics {} columns, quadrature {} dimensions",
            alpha.len(),
            rc_x.ncols(),
            rule.dims()
        )));
    }
    Ok(())
}

/// Plain-logit inversion `log s_j - log s_0`; the usual starting point.
pub fn logit_delta(s_t: &DVector<f64>) -> DVector<f64> {
    let s0 = 1.0 - s_t.sum();
    s_t.map(|s| log(s) - log(s0))
}

/// Outcome of a single-market inversion.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub delta: DVector<f64>,
    pub iterations: usize,
    /// Max-norm of the final `delta` update.
    pub residual: f64,
    /// Max-norm update at every iteration (contraction steps only).
    pub trace: Vec<f64>,
}

/// Mean utilities `delta_t(alpha, s_t, X_t)` solving `s(delta_t) = s_t`.
pub fn invert_shares(
    s_t: &DVector<f64>,
    rc_x: &DMatrix<f64>,
    alpha: &[f64],
    rule: &QuadratureRule,
    opts: &InversionOptions,
    start: Option<&DVector<f64>>,
    market: usize,
) -> Result<Inversion> {
    check_alpha_dims(rc_x, alpha, rule)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig("inversion tolerance must be positive".into()));
    }
    let j = s_t.len();
    if rc_x.nrows() != j {
        return Err(Error::DimensionMismatch("shares and characteristics disagree on J".into()));
    }
    let mut total = 0.0;
    for (p, &s) in s_t.iter().enumerate() {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidShare {
                product: p,
                market,
                value: s,
                reason: "share must lie in (0, 1)",
            });
        }
        total += s;
    }
    if total >= 1.0 {
        return Err(Error::InvalidShare {
            product: j.saturating_sub(1),
            market,
            value: total,
            reason: "inside shares must sum to less than one",
        });
    }
    let tastes = MarketTastes::new(rc_x, alpha, rule);
    let log_obs = s_t.map(log);
    let mut delta = match start {
        Some(d) if d.len() == j && d.iter().all(|v| v.is_finite()) => d.clone(),
        _ => logit_delta(s_t),
    };
    let mut current = DVector::zeros(j);
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;
        if opts.method == InversionMethod::Newton {
            let (s, probs) = tastes
                .shares_and_probs(&delta)
                .ok_or(Error::NumericOverflow { market })?;
            let f = s.map(log) - &log_obs;
            let mut jac = tastes.jacobian_from_probs(&s, &probs);
            for p in 0..j {
                let inv = 1.0 / s[p];
                jac.row_mut(p).scale_mut(inv);
            }
            if let Some(step) = jac.lu().solve(&f) {
                let trial = &delta - &step;
                let f_norm = f.amax();
                if let Some(s_trial) = tastes.shares(&trial) {
                    let f_trial = (s_trial.map(log) - &log_obs).amax();
                    if f_trial.is_finite() && f_trial < f_norm {
                        residual = step.amax();
                        delta = trial;
                        if residual <= opts.tol {
                            return Ok(Inversion {
                                delta,
                                iterations: iter,
                                residual,
                                trace,
                            });
                        }
                        continue;
                    }
                }
            }
        }
        if !tastes.evaluate(&delta, &mut current, None) {
            return Err(Error::NumericOverflow { market });
        }
        let update = current.zip_map(&log_obs, |s, lo| lo - log(s));
        residual = update.amax();
        if !residual.is_finite() {
            return Err(Error::NumericOverflow { market });
        }
        trace.push(residual);
        delta += update;
        if residual <= opts.tol {
            return Ok(Inversion {
                delta,
                iterations: iter,
                residual,
                trace,
            });
        }
    }
    Err(Error::NoConvergence {
        market,
        iterations: opts.max_iter,
        residual,
    })
}

/// `delta(alpha)` for every market; `warm` (a previous `J x T` solution)
/// seeds each market's iteration.
pub fn invert_shares_all(
    data: &PanelData,
    spec: &RandomCoeffSpec,
    alpha: &[f64],
    opts: &InversionOptions,
    warm: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    spec.check_against(data)?;
    let (j, t) = (data.products(), data.markets());
    let mut delta = DMatrix::zeros(j, t);
    for m in 0..t {
        let rc_x = spec.rc_characteristics(data, m);
        let start = warm.map(|w| w.column(m).into_owned());
        let inv = invert_shares(
            &data.market_shares(m),
            &rc_x,
            alpha,
            spec.rule(),
            opts,
            start.as_ref(),
            m,
        )?;
        delta.set_column(m, &inv.delta);
    }
    Ok(delta)
}

/// Shares for every market given a `J x T` mean-utility matrix.
pub fn compute_shares_all(
    delta: &DMatrix<f64>,
    data_rc: impl Fn(usize) -> DMatrix<f64>,
    alpha: &[f64],
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(delta.nrows(), delta.ncols());
    for t in 0..delta.ncols() {
        let s = compute_shares(&delta.column(t).into_owned(), &data_rc(t), alpha, rule, t)?;
        out.set_column(t, &s);
    }
    Ok(out)
}

/// Closed-form share bounds for a single normal coefficient on `p`:
/// `s_up = exp(d + a^2 p^2 / 2)` and `s_low = s_up (1 - nu)` with
/// `nu_j = sum_l exp(d_l + a^2 p_l^2 / 2 + a^2 p_j p_l)`.
pub fn share_bounds(delta_t: &DVector<f64>, price_t: &DVector<f64>, alpha: f64) -> (DVector<f64>, DVector<f64>) {
    let a2 = alpha * alpha;
    let j = delta_t.len();
    let up = DVector::from_fn(j, |p, _| exp(delta_t[p] + a2 * price_t[p] * price_t[p] / 2.0));
    let low = DVector::from_fn(j, |p, _| {
        let nu: f64 = (0..j)
            .map(|l| exp(delta_t[l] + a2 * price_t[l] * price_t[l] / 2.0 + a2 * price_t[p] * price_t[l]))
            .sum();
        up[p] * (1.0 - nu)
    });
    (up, low)
}
