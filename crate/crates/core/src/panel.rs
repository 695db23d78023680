//! Balanced product-by-market panels and the random-coefficient specification.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::{QuadratureKind, QuadratureRule, DEFAULT_NODES};

/// Observed shares, regressors and instruments on a balanced `J x T` panel.
///
/// Immutable once built; every matrix is `J x T` with products in rows and
/// markets in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    shares: DMatrix<f64>,
    regressors: Vec<DMatrix<f64>>,
    instruments: Vec<DMatrix<f64>>,
    exogenous: Vec<bool>,
    regressor_names: Vec<String>,
    instrument_names: Vec<String>,
    product_labels: Vec<String>,
    market_labels: Vec<String>,
}

impl PanelData {
    /// Validates dimensions and shares. All regressors start out flagged
    /// exogenous; names and labels get positional defaults.
    pub fn new(
        shares: DMatrix<f64>,
        regressors: Vec<DMatrix<f64>>,
        instruments: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let (j, t) = shares.shape();
        if j == 0 || t == 0 {
            return Err(Error::DimensionMismatch("panel must have J >= 1 and T >= 1".into()));
        }
        if regressors.is_empty() {
            return Err(Error::DimensionMismatch("at least one regressor (K >= 1) is required".into()));
        }
        for (k, x) in regressors.iter().enumerate() {
            if x.shape() != (j, t) {
                return Err(Error::DimensionMismatch(format!(
                    "regressor {k} is {}x{}, shares are {j}x{t}",
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        for (m, z) in instruments.iter().enumerate() {
            if z.shape() != (j, t) {
                return Err(Error::DimensionMismatch(format!(
                    "instrument {m} is {}x{}, shares are {j}x{t}",
                    z.nrows(),
                    z.ncols()
                )));
            }
        }
        validate_shares(&shares)?;
        for (name, mats) in [("regressor", &regressors), ("instrument", &instruments)] {
            for (i, m) in mats.iter().enumerate() {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DimensionMismatch(format!("{name} {i} has non-finite entries")));
                }
            }
        }
        let k = regressors.len();
        let m = instruments.len();
        Ok(Self {
            shares,
            regressors,
            instruments,
            exogenous: alloc::vec![true; k],
            regressor_names: (1..=k).map(|i| format!("x_{i}")).collect(),
            instrument_names: (1..=m).map(|i| format!("z_{i}")).collect(),
            product_labels: padded_labels("p", j),
            market_labels: padded_labels("m", t),
        })
    }

    pub fn with_labels(mut self, products: Vec<String>, markets: Vec<String>) -> Result<Self> {
        if products.len() != self.products() || markets.len() != self.markets() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} product and {} market labels, got {} and {}",
                self.products(),
                self.markets(),
                products.len(),
                markets.len()
            )));
        }
        self.product_labels = products;
        self.market_labels = markets;
        Ok(self)
    }

    pub fn with_names(mut self, regressors: Vec<String>, instruments: Vec<String>) -> Result<Self> {
        if regressors.len() != self.num_regressors() || instruments.len() != self.num_instruments() {
            return Err(Error::DimensionMismatch("name list length does not match K or M".into()));
        }
        self.regressor_names = regressors;
        self.instrument_names = instruments;
        Ok(self)
    }

    /// Flag regressor `k` as endogenous with respect to `e`.
    pub fn with_endogenous(mut self, k: usize) -> Result<Self> {
        if k >= self.num_regressors() {
            return Err(Error::DimensionMismatch(format!(
                "regressor index {k} out of range (K = {})",
                self.num_regressors()
            )));
        }
        self.exogenous[k] = false;
        Ok(self)
    }

    /// Product count `J`.
    pub fn products(&self) -> usize {
        self.shares.nrows()
    }

    /// Market count `T`.
    pub fn markets(&self) -> usize {
        self.shares.ncols()
    }

    pub fn num_regressors(&self) -> usize {
        self.regressors.len()
    }

    pub fn num_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn num_endogenous(&self) -> usize {
        self.exogenous.iter().filter(|e| !**e).count()
    }

    pub fn shares(&self) -> &DMatrix<f64> {
        &self.shares
    }

    pub fn regressors(&self) -> &[DMatrix<f64>] {
        &self.regressors
    }

    pub fn regressor(&self, k: usize) -> &DMatrix<f64> {
        &self.regressors[k]
    }

    pub fn instruments(&self) -> &[DMatrix<f64>] {
        &self.instruments
    }

    pub fn exogenous(&self) -> &[bool] {
        &self.exogenous
    }

    pub fn exogenous_indices(&self) -> Vec<usize> {
        (0..self.num_regressors()).filter(|&k| self.exogenous[k]).collect()
    }

    pub fn endogenous_indices(&self) -> Vec<usize> {
        (0..self.num_regressors()).filter(|&k| !self.exogenous[k]).collect()
    }

    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    pub fn instrument_names(&self) -> &[String] {
        &self.instrument_names
    }

    pub fn product_labels(&self) -> &[String] {
        &self.product_labels
    }

    pub fn market_labels(&self) -> &[String] {
        &self.market_labels
    }

    /// Shares of market `t` as a `J`-vector.
    pub fn market_shares(&self, t: usize) -> DVector<f64> {
        self.shares.column(t).into_owned()
    }

    /// Regressors flagged as having a product-or-market-invariant (rank one)
    /// pattern. Such columns are absorbed by any factor structure.
    pub fn low_rank_regressors(&self) -> Vec<usize> {
        (0..self.num_regressors())
            .filter(|&k| is_rank_one(&self.regressors[k]))
            .collect()
    }
}

/// `p01, p02, ...`: zero padding keeps lexicographic and positional order
/// the same.
fn padded_labels(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

fn is_rank_one(x: &DMatrix<f64>) -> bool {
    let (j, t) = x.shape();
    let row_const = (0..j).all(|r| (0..t).all(|c| x[(r, c)] == x[(r, 0)]));
    let col_const = (0..t).all(|c| (0..j).all(|r| x[(r, c)] == x[(0, c)]));
    row_const || col_const
}

/// Checks `0 < s_jt < 1` and `sum_j s_jt < 1` in every market.
pub fn validate_shares(shares: &DMatrix<f64>) -> Result<()> {
    for t in 0..shares.ncols() {
        let mut total = 0.0;
        for j in 0..shares.nrows() {
            let s = shares[(j, t)];
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::InvalidShare {
                    product: j,
                    market: t,
                    value: s,
                    reason: "share must be positive",
                });
            }
            if s >= 1.0 {
                return Err(Error::InvalidShare {
                    product: j,
                    market: t,
                    value: s,
                    reason: "share must be below one",
                });
            }
            total += s;
        }
        if total >= 1.0 {
            return Err(Error::InvalidShare {
                product: shares.nrows() - 1,
                market: t,
                value: total,
                reason: "inside shares must sum to less than one",
            });
        }
    }
    Ok(())
}

/// Which regressors carry normally distributed random coefficients, and
/// how the taste integral is evaluated.
///
/// Coefficients are independent: `v_d ~ N(0, alpha_d^2)` for the `d`-th
/// random-coefficient regressor, so `L` equals the number of random
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCoeffSpec {
    rc_indices: Vec<usize>,
    alpha_bounds: Vec<(f64, f64)>,
    quadrature: QuadratureKind,
    rule: QuadratureRule,
}

impl RandomCoeffSpec {
    pub fn new(rc_indices: Vec<usize>, alpha_bounds: Vec<(f64, f64)>, quadrature: QuadratureKind) -> Result<Self> {
        if rc_indices.len() != alpha_bounds.len() {
            return Err(Error::InvalidConfig(format!(
                "{} random coefficients but {} alpha bounds",
                rc_indices.len(),
                alpha_bounds.len()
            )));
        }
        for (i, &(lo, hi)) in alpha_bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi <= lo {
                return Err(Error::InvalidConfig(format!(
                    "alpha bound {i} must satisfy 0 <= lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        let mut sorted = rc_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != rc_indices.len() {
            return Err(Error::InvalidConfig("duplicate random-coefficient index".into()));
        }
        let rule = QuadratureRule::new(quadrature, rc_indices.len())?;
        Ok(Self {
            rc_indices,
            alpha_bounds,
            quadrature,
            rule,
        })
    }

    /// One normal random coefficient on regressor `index` with the default
    /// 64-node Gauss-Hermite rule.
    pub fn single(index: usize, bounds: (f64, f64)) -> Result<Self> {
        Self::new(
            alloc::vec![index],
            alloc::vec![bounds],
            QuadratureKind::GaussHermite { nodes: DEFAULT_NODES },
        )
    }

    /// Same coefficients and bounds with a different integration rule.
    pub fn with_quadrature(&self, quadrature: QuadratureKind) -> Result<Self> {
        Self::new(self.rc_indices.clone(), self.alpha_bounds.clone(), quadrature)
    }

    pub fn with_bounds(&self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(self.rc_indices.clone(), bounds, self.quadrature)
    }

    /// Parameter count `L`.
    pub fn alpha_dim(&self) -> usize {
        self.rc_indices.len()
    }

    pub fn rc_indices(&self) -> &[usize] {
        &self.rc_indices
    }

    pub fn alpha_bounds(&self) -> &[(f64, f64)] {
        &self.alpha_bounds
    }

    pub fn quadrature(&self) -> QuadratureKind {
        self.quadrature
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn contains(&self, alpha: &[f64]) -> bool {
        alpha.len() == self.alpha_dim()
            && alpha
                .iter()
                .zip(&self.alpha_bounds)
                .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi)
    }

    /// `J x D` matrix of the random-coefficient characteristics in market `t`.
    pub fn rc_characteristics(&self, data: &PanelData, t: usize) -> DMatrix<f64> {
        let j = data.products();
        let mut out = DMatrix::zeros(j, self.alpha_dim());
        for (d, &k) in self.rc_indices.iter().enumerate() {
            for p in 0..j {
                out[(p, d)] = data.regressor(k)[(p, t)];
            }
        }
        out
    }

    pub(crate) fn check_against(&self, data: &PanelData) -> Result<()> {
        if let Some(&k) = self.rc_indices.iter().find(|&&k| k >= data.num_regressors()) {
            return Err(Error::InvalidConfig(format!(
                "random coefficient on regressor {k} but K = {}",
                data.num_regressors()
            )));
        }
        Ok(())
    }
}
