//! Instrument-relevance diagnostics and profiled objective scans.
//!
//! For a reference point `(alpha0, beta0)` let `D(alpha, beta) = delta(alpha)
//! - delta(alpha0) - (beta - beta0) . X` and `dxi = vec(D)`. Then
//!
//! * `rho_iv` is the share of `|dxi|^2` explained by the regressors and
//!   instruments,
//! * `rho_f` is the largest share explained by the reference loadings
//!   `lambda0` together with `R` arbitrary loadings,
//!
//! and identification requires `rho_iv - rho_f > 0` away from the reference.

use alloc::vec::Vec;
use libm::sqrt;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::{check_factors, profiled_objective};
use crate::linalg::{frobenius_sq, pinv_sym, projector, stack_vec, sym_eigenvalues_desc, vec_of};
use crate::lsmd::{DeltaMap, Design};

/// `|dxi|` below which the ratios are undefined.
pub const DEGENERATE_XI: f64 = 1e-10;

/// Share of `dxi` explained by the columns of `xz` (`JT x (K + M)`).
pub fn rho_iv_from(dxi: &DVector<f64>, xz: &DMatrix<f64>) -> Result<f64> {
    let nn = dxi.norm_squared();
    if sqrt(nn) < DEGENERATE_XI {
        return Err(Error::DegenerateXi { norm: sqrt(nn) });
    }
    let b = xz.transpose() * dxi;
    let g = pinv_sym(&(xz.transpose() * xz));
    Ok((b.dot(&(g * &b)) / nn).clamp(0.0, 1.0))
}

/// `[|P_lambda0 D|^2 + sum_{r <= R} mu_r(D' M_lambda0 D)] / |D|^2`.
pub fn rho_f_from(d: &DMatrix<f64>, lambda0: &DMatrix<f64>, factors: usize) -> Result<f64> {
    let nn = frobenius_sq(d);
    if sqrt(nn) < DEGENERATE_XI {
        return Err(Error::DegenerateXi { norm: sqrt(nn) });
    }
    check_factors(d.nrows(), d.ncols(), factors)?;
    let pd = projector(lambda0) * d;
    let md = d - &pd;
    let mut top = 0.0;
    if factors > 0 {
        let gram = if md.nrows() <= md.ncols() {
            &md * md.transpose()
        } else {
            md.transpose() * &md
        };
        top = sym_eigenvalues_desc(&gram).iter().take(factors).map(|v| v.max(0.0)).sum();
    }
    Ok(((frobenius_sq(&pd) + top) / nn).clamp(0.0, 1.0))
}

/// Evaluates the relevance ratios against a fixed reference point.
pub struct Relevance<'a, D: DeltaMap + ?Sized> {
    map: &'a D,
    regressors: Vec<DMatrix<f64>>,
    xz: DMatrix<f64>,
    delta0: DMatrix<f64>,
    beta0: DVector<f64>,
    lambda0: DMatrix<f64>,
}

impl<'a, D: DeltaMap + ?Sized> Relevance<'a, D> {
    /// `lambda0` are the reference loadings (`J x R0`, possibly empty).
    pub fn new(map: &'a D, design: &Design<'_>, alpha0: &[f64], beta0: &[f64], lambda0: &DMatrix<f64>) -> Result<Self> {
        let (j, t) = map.dims();
        if beta0.len() != design.regressors.len() {
            return Err(Error::DimensionMismatch("beta0 must have one entry per regressor".into()));
        }
        if lambda0.nrows() != j {
            return Err(Error::DimensionMismatch("lambda0 must have J rows".into()));
        }
        let mut all = design.regressors.to_vec();
        all.extend(design.instruments.iter().cloned());
        Ok(Self {
            map,
            regressors: design.regressors.to_vec(),
            xz: stack_vec(&all, j * t),
            delta0: map.delta(alpha0, None).map_err(|e| e.at_alpha(alpha0))?,
            beta0: DVector::from_column_slice(beta0),
            lambda0: lambda0.clone(),
        })
    }

    pub fn delta(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        self.map.delta(alpha, Some(&self.delta0)).map_err(|e| e.at_alpha(alpha))
    }

    /// `D` for a precomputed `delta(alpha)`.
    pub fn residual_difference(&self, delta_alpha: &DMatrix<f64>, beta: &[f64]) -> DMatrix<f64> {
        let mut d = delta_alpha - &self.delta0;
        for ((b, b0), x) in beta.iter().zip(self.beta0.iter()).zip(&self.regressors) {
            let c = b - b0;
            d.zip_apply(x, |o, v| *o -= c * v);
        }
        d
    }

    pub fn rho_iv_at(&self, delta_alpha: &DMatrix<f64>, beta: &[f64]) -> Result<f64> {
        rho_iv_from(&vec_of(&self.residual_difference(delta_alpha, beta)), &self.xz)
    }

    pub fn rho_f_at(&self, delta_alpha: &DMatrix<f64>, beta: &[f64], factors: usize) -> Result<f64> {
        rho_f_from(&self.residual_difference(delta_alpha, beta), &self.lambda0, factors)
    }

    pub fn rho_iv(&self, alpha: &[f64], beta: &[f64]) -> Result<f64> {
        self.rho_iv_at(&self.delta(alpha)?, beta)
    }

    pub fn rho_f(&self, alpha: &[f64], beta: &[f64], factors: usize) -> Result<f64> {
        self.rho_f_at(&self.delta(alpha)?, beta, factors)
    }

    /// Both ratios over a grid in the first taste parameter and one
    /// coefficient (`beta_index`); everything else stays at the reference.
    pub fn surface(
        &self,
        alpha0: &[f64],
        alpha_grid: &[f64],
        beta_index: usize,
        beta_grid: &[f64],
        factors: usize,
    ) -> Result<RelevanceSurface> {
        let (na, nb) = (alpha_grid.len(), beta_grid.len());
        let mut rho_iv = DMatrix::from_element(na, nb, f64::NAN);
        let mut rho_f = DMatrix::from_element(na, nb, f64::NAN);
        let mut degenerate = 0;
        for (i, &a) in alpha_grid.iter().enumerate() {
            let mut alpha = alpha0.to_vec();
            alpha[0] = a;
            let delta = self.delta(&alpha)?;
            for (k, &b) in beta_grid.iter().enumerate() {
                let mut beta: Vec<f64> = self.beta0.iter().copied().collect();
                beta[beta_index] = b;
                match (self.rho_iv_at(&delta, &beta), self.rho_f_at(&delta, &beta, factors)) {
                    (Ok(v), Ok(f)) => {
                        rho_iv[(i, k)] = v;
                        rho_f[(i, k)] = f;
                    }
                    (Err(Error::DegenerateXi { .. }), _) | (_, Err(Error::DegenerateXi { .. })) => degenerate += 1,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
        }
        let delta_rho = &rho_iv - &rho_f;
        Ok(RelevanceSurface {
            alpha_grid: alpha_grid.to_vec(),
            beta_grid: beta_grid.to_vec(),
            rho_iv,
            rho_f,
            delta_rho,
            factors,
            degenerate,
        })
    }
}

/// Relevance ratios on an `alpha x beta` grid. Degenerate points hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSurface {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub rho_iv: DMatrix<f64>,
    pub rho_f: DMatrix<f64>,
    pub delta_rho: DMatrix<f64>,
    pub factors: usize,
    pub degenerate: usize,
}

fn finite_range(m: &DMatrix<f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = m.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    Some(v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))))
}

impl RelevanceSurface {
    pub fn rho_iv_range(&self) -> Option<(f64, f64)> {
        finite_range(&self.rho_iv)
    }

    pub fn rho_f_range(&self) -> Option<(f64, f64)> {
        finite_range(&self.rho_f)
    }

    pub fn delta_rho_range(&self) -> Option<(f64, f64)> {
        finite_range(&self.delta_rho)
    }

    /// Rows `(alpha, beta, rho_iv, rho_f, delta_rho)` in grid order.
    pub fn rows(&self) -> Vec<[f64; 5]> {
        let mut out = Vec::with_capacity(self.alpha_grid.len() * self.beta_grid.len());
        for (i, &a) in self.alpha_grid.iter().enumerate() {
            for (k, &b) in self.beta_grid.iter().enumerate() {
                out.push([a, b, self.rho_iv[(i, k)], self.rho_f[(i, k)], self.delta_rho[(i, k)]]);
            }
        }
        out
    }
}

/// `L(beta) = sum_{r > R} mu_r[(Y - beta X)'(Y - beta X)]` over a grid.
pub fn objective_profile(y: &DMatrix<f64>, x: &DMatrix<f64>, beta_grid: &[f64], factors: usize) -> Result<Vec<f64>> {
    if y.shape() != x.shape() {
        return Err(Error::DimensionMismatch("Y and X must have the same shape".into()));
    }
    beta_grid.iter().map(|&b| profiled_objective(&(y - x * b), factors)).collect()
}

/// Indices of strict interior local minima of a sampled curve.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] < values[i - 1] && values[i] < values[i + 1])
        .collect()
}

/// Evenly spaced grid including both end points.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::generate_bimodal;
    use crate::rng::NormalStream;

    fn randm(rng: &mut NormalStream, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn rho_iv_extremes() {
        let mut rng = NormalStream::new(1);
        let xz = randm(&mut rng, 20, 3);
        let inside = &xz * DVector::from_vec(alloc::vec![1.0, -2.0, 0.5]);
        assert!((rho_iv_from(&inside, &xz).unwrap() - 1.0).abs() < 1e-12);
        let v = randm(&mut rng, 20, 1).column(0).into_owned();
        let ortho = &v - &xz * (pinv_sym(&(xz.transpose() * &xz)) * (xz.transpose() * &v));
        assert!(rho_iv_from(&ortho, &xz).unwrap() < 1e-12);
        assert!(matches!(
            rho_iv_from(&DVector::zeros(20), &xz),
            Err(Error::DegenerateXi { .. })
        ));
    }

    #[test]
    fn rho_f_zero_without_factors_and_monotone_in_r() {
        let mut rng = NormalStream::new(2);
        let d = randm(&mut rng, 6, 5);
        assert_eq!(rho_f_from(&d, &DMatrix::zeros(6, 0), 0).unwrap(), 0.0);
        let l0 = randm(&mut rng, 6, 1);
        let r1 = rho_f_from(&d, &l0, 1).unwrap();
        let r2 = rho_f_from(&d, &l0, 2).unwrap();
        assert!(r2 >= r1 && r1 >= rho_f_from(&d, &l0, 0).unwrap());
        assert!(r2 <= 1.0);
    }

    #[test]
    fn no_factor_profile_is_a_parabola() {
        let mut rng = NormalStream::new(3);
        let y = randm(&mut rng, 5, 6);
        let x = randm(&mut rng, 5, 6);
        let grid = linspace(-2.0, 2.0, 9);
        let v = objective_profile(&y, &x, &grid, 0).unwrap();
        // second differences of a quadratic are constant
        let d2: Vec<f64> = (1..8).map(|i| v[i + 1] - 2.0 * v[i] + v[i - 1]).collect();
        for w in d2.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-8 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn bimodal_profile_has_two_minima() {
        let p = generate_bimodal(100, 100, 4);
        let grid = linspace(-0.5, 1.5, 81);
        let v = objective_profile(&p.y, &p.x, &grid, 1).unwrap();
        let mins: Vec<f64> = local_minima(&v).iter().map(|&i| grid[i]).collect();
        assert_eq!(mins.len(), 2, "{mins:?}");
        assert!(mins[0].abs() < 0.1);
        assert!(mins[1] > 0.6 && mins[1] < 1.0);
    }
}
