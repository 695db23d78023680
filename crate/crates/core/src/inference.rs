//! Asymptotic bias and variance of the LS-MD estimator, bias-corrected
//! estimates and standard errors.
//!
//! Parameters are ordered `(alpha, beta)` throughout the public report, with
//! `beta` in the panel's regressor order. Internally the estimator works with
//! `theta = (alpha, beta_end, beta_exo)`: endogenous coefficients behave like
//! taste parameters, exogenous ones like ordinary regressors.

use alloc::vec;
use alloc::vec::Vec;
use libm::sqrt;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::FactorEstimate;
use crate::linalg::{condition_number_sym, hcat, inv_sym, pinv_sym, projector, stack_vec, sym_eigenvalues_desc, symmetrize, vec_of};
use crate::lsmd::{project_both_sides, DeltaMap, Design, LsmdEstimate, ShareInversion};
use crate::panel::{PanelData, RandomCoeffSpec};
use crate::shares::InversionOptions;

/// Default bandwidth for the pre-determined-regressor bias term.
pub const DEFAULT_BANDWIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub bandwidth: usize,
    /// Finite-difference step for `grad delta`, relative to `1 + |alpha|`.
    pub fd_step: f64,
    /// Largest admissible condition number of `G W G'`.
    pub max_condition: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_BANDWIDTH,
            fd_step: 1e-4,
            max_condition: 1e12,
        }
    }
}

/// `floor(T^(1/5))`, a bandwidth satisfying the usual rate conditions.
pub fn auto_bandwidth(markets: usize) -> usize {
    libm::floor(libm::pow(markets as f64, 0.2)) as usize
}

/// `-vec(grad_l delta(alpha))` by central differences, one column per
/// taste parameter.
pub fn gradient_delta<D: DeltaMap + ?Sized>(
    map: &D,
    alpha: &[f64],
    fd_step: f64,
    warm: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let (j, t) = map.dims();
    let mut g = DMatrix::zeros(j * t, alpha.len());
    for l in 0..alpha.len() {
        let h = fd_step * (1.0 + alpha[l].abs());
        let mut up = alpha.to_vec();
        let mut down = alpha.to_vec();
        up[l] += h;
        down[l] -= h;
        let du = map.delta(&up, warm).map_err(|e| e.at_alpha(&up))?;
        let dd = map.delta(&down, warm).map_err(|e| e.at_alpha(&down))?;
        let col = (dd - du) / (2.0 * h);
        g.set_column(l, &vec_of(&col));
    }
    Ok(g)
}

/// The projected regressors and the gradient columns entering `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedDesign {
    /// `JT x K1`: `vec(M_lambda X_k M_f)` for the exogenous regressors.
    pub x_lf: DMatrix<f64>,
    /// `JT x M`.
    pub z_lf: DMatrix<f64>,
    /// `JT x (L + K2)`: `-vec(grad delta)` for the taste parameters, then
    /// `vec(X_k)` for the endogenous regressors.
    pub g_hat: DMatrix<f64>,
}

/// Bias vectors `b^(., i)` for `i = 0, 1, 2` and one set of matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVectors {
    pub b0: DVector<f64>,
    pub b1: DVector<f64>,
    pub b2: DVector<f64>,
}

fn banded_cross(x: &DMatrix<f64>, e: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let (j, t) = x.shape();
    let mut s = DMatrix::zeros(t, t);
    for a in 0..t {
        for b in 0..a {
            if a - b <= h {
                s[(a, b)] = x.column(a).dot(&e.column(b)) / j as f64;
            }
        }
    }
    s
}

/// Trace formulas of the three bias terms for each matrix in `mats`.
///
/// The `i = 1, 2` traces are evaluated in their cyclically permuted
/// `R x R` form.
pub fn bias_vectors(mats: &[DMatrix<f64>], residuals: &DMatrix<f64>, factors: &FactorEstimate, h: usize) -> BiasVectors {
    let (j, t) = residuals.shape();
    let lam = &factors.lambda;
    let f = &factors.f;
    let n = mats.len();
    if factors.factors() == 0 {
        return BiasVectors {
            b0: DVector::zeros(n),
            b1: DVector::zeros(n),
            b2: DVector::zeros(n),
        };
    }
    let e2 = residuals.map(|v| v * v);
    let sigma1 = DVector::from_fn(j, |a, _| e2.row(a).sum() / t as f64);
    let sigma2 = DVector::from_fn(t, |b, _| e2.column(b).sum() / j as f64);
    let p_f = projector(f);
    let m_l = DMatrix::identity(j, j) - projector(lam);
    let m_f = DMatrix::identity(t, t) - &p_f;
    let ll_inv = pinv_sym(&(lam.transpose() * lam));
    let ff_inv = pinv_sym(&(f.transpose() * f));
    // Tr[D1 M_l X f (f'f)^-1 (l'l)^-1 l'] = Tr[(l'l)^-1 l' D1 M_l X f (f'f)^-1]
    let left1 = &ll_inv * lam.transpose() * DMatrix::from_diagonal(&sigma1) * &m_l;
    let right1 = f * &ff_inv;
    // Tr[D2 M_f X' l (l'l)^-1 (f'f)^-1 f'] = Tr[(f'f)^-1 f' D2 M_f X' l (l'l)^-1]
    let left2 = &ff_inv * f.transpose() * DMatrix::from_diagonal(&sigma2) * &m_f;
    let right2 = lam * &ll_inv;
    let mut out = BiasVectors {
        b0: DVector::zeros(n),
        b1: DVector::zeros(n),
        b2: DVector::zeros(n),
    };
    for (i, x) in mats.iter().enumerate() {
        out.b0[i] = (&p_f * banded_cross(x, residuals, h)).trace();
        out.b1[i] = (&left1 * x * &right1).trace();
        out.b2[i] = (&left2 * x.transpose() * &right2).trace();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    /// `(L + K1 + K2) x (K1 + M)` in internal order.
    pub g: DMatrix<f64>,
    /// `(K1 + M) x (K1 + M)`.
    pub omega: DMatrix<f64>,
    pub w_cal: DMatrix<f64>,
    pub b_x: BiasVectors,
    pub b_z: BiasVectors,
    /// `B_0, B_1, B_2` in `(alpha, beta)` order.
    pub bias: [DVector<f64>; 3],
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub alpha_star: DVector<f64>,
    pub beta_star: DVector<f64>,
    /// Asymptotic covariance in `(alpha, beta)` order; `se = sqrt(diag / JT)`.
    pub covariance: DMatrix<f64>,
    pub se: DVector<f64>,
    /// Bias-corrected estimates over their standard errors.
    pub t_stats: DVector<f64>,
    pub bandwidth: usize,
    pub condition_gwg: f64,
    pub products: usize,
    pub markets: usize,
}

impl InferenceReport {
    /// Raw estimates in `(alpha, beta)` order.
    pub fn estimates(&self) -> DVector<f64> {
        concat(&self.alpha, &self.beta)
    }

    pub fn corrected(&self) -> DVector<f64> {
        concat(&self.alpha_star, &self.beta_star)
    }

    /// Total bias correction `B_0/T + B_1/J + B_2/T`.
    pub fn correction(&self) -> DVector<f64> {
        let (j, t) = (self.products as f64, self.markets as f64);
        &self.bias[0] / t + &self.bias[1] / j + &self.bias[2] / t
    }
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Projected design at the estimate.
pub fn projected_design<D: DeltaMap + ?Sized>(
    estimate: &LsmdEstimate,
    map: &D,
    design: &Design<'_>,
    fd_step: f64,
) -> Result<ProjectedDesign> {
    let (j, t) = map.dims();
    let rows = j * t;
    let exo: Vec<DMatrix<f64>> = (0..design.regressors.len())
        .filter(|&k| design.exogenous[k])
        .map(|k| design.regressors[k].clone())
        .collect();
    let end: Vec<DMatrix<f64>> = estimate.endogenous.iter().map(|&k| design.regressors[k].clone()).collect();
    let x_lf = project_both_sides(&exo, &estimate.factors);
    let z_lf = project_both_sides(design.instruments, &estimate.factors);
    let g_alpha = gradient_delta(map, estimate.alpha.as_slice(), fd_step, Some(&estimate.delta))?;
    let g_hat = hcat(&g_alpha, &stack_vec(&end, rows));
    Ok(ProjectedDesign { x_lf, z_lf, g_hat })
}

/// Bias and variance estimates for a fitted model with a generic `delta`
/// map.
pub fn bias_variance_with_map<D: DeltaMap + ?Sized>(
    estimate: &LsmdEstimate,
    map: &D,
    design: &Design<'_>,
    opts: &InferenceOptions,
) -> Result<InferenceReport> {
    let (j, t) = map.dims();
    if opts.bandwidth >= t {
        return Err(Error::InvalidConfig(alloc::format!(
            "bandwidth {} must be below T = {t}",
            opts.bandwidth
        )));
    }
    let n = (j * t) as f64;
    let pd = projected_design(estimate, map, design, opts.fd_step)?;
    let (x, z, g) = (&pd.x_lf, &pd.z_lf, &pd.g_hat);
    let k1 = x.ncols();
    let m = z.ncols();
    let l2 = g.ncols();
    let p = l2 + k1;

    // G = (1/JT) [g'x, g'z; x'x, x'z]
    let a = hcat(x, z);
    let mut gm = DMatrix::zeros(p, k1 + m);
    gm.rows_mut(0, l2).copy_from(&(g.transpose() * &a / n));
    gm.rows_mut(l2, k1).copy_from(&(x.transpose() * &a / n));

    let e2 = vec_of(&estimate.residuals).map(|v| v * v);
    let mut weighted = a.clone();
    for (r, w) in e2.iter().enumerate() {
        weighted.row_mut(r).scale_mut(*w);
    }
    let omega = symmetrize(&(a.transpose() * weighted / n));

    // calligraphic W
    let xx = x.transpose() * x;
    let xx_inv = pinv_sym(&xx);
    let coef = &xx_inv * (x.transpose() * z);
    let mz = z - x * &coef;
    let s_inv = inv_sym(&(z.transpose() * &mz / n));
    let mut w_cal = DMatrix::zeros(k1 + m, k1 + m);
    if k1 > 0 {
        w_cal.view_mut((0, 0), (k1, k1)).copy_from(&(&xx_inv * n));
    }
    let mut lift = DMatrix::zeros(k1 + m, m);
    lift.rows_mut(0, k1).copy_from(&(-&coef));
    lift.rows_mut(k1, m).copy_from(&DMatrix::identity(m, m));
    w_cal += &lift * &s_inv * estimate.weight.matrix() * &s_inv * lift.transpose();
    let w_cal = symmetrize(&w_cal);

    let gwg = symmetrize(&(&gm * &w_cal * gm.transpose()));
    let condition = condition_number_sym(&gwg);
    if !(condition <= opts.max_condition) {
        return Err(Error::SingularG { condition });
    }
    let h = inv_sym(&gwg);
    let hgw = &h * &gm * &w_cal;
    let cov_int = symmetrize(&(&hgw * &omega * hgw.transpose()));

    let exo_idx: Vec<usize> = (0..design.regressors.len()).filter(|&k| design.exogenous[k]).collect();
    let exo: Vec<DMatrix<f64>> = exo_idx.iter().map(|&k| design.regressors[k].clone()).collect();
    let b_x = bias_vectors(&exo, &estimate.residuals, &estimate.factors, opts.bandwidth);
    let b_z = bias_vectors(design.instruments, &estimate.residuals, &estimate.factors, opts.bandwidth);
    let bias_int: Vec<DVector<f64>> = [(&b_x.b0, &b_z.b0), (&b_x.b1, &b_z.b1), (&b_x.b2, &b_z.b2)]
        .iter()
        .map(|(bx, bz)| -(&hgw * concat(bx, bz)))
        .collect();

    // internal (alpha, beta_end, beta_exo) -> public (alpha, beta)
    let l = estimate.alpha.len();
    let kk = design.regressors.len();
    let mut perm = vec![0usize; p];
    for i in 0..l {
        perm[i] = i;
    }
    for (i, &k) in estimate.endogenous.iter().enumerate() {
        perm[l + i] = l + k;
    }
    for (i, &k) in exo_idx.iter().enumerate() {
        perm[l2 + i] = l + k;
    }
    let mut covariance = DMatrix::zeros(l + kk, l + kk);
    for a_ in 0..p {
        for b_ in 0..p {
            covariance[(perm[a_], perm[b_])] = cov_int[(a_, b_)];
        }
    }
    let reorder = |v: &DVector<f64>| {
        let mut out = DVector::zeros(l + kk);
        for i in 0..p {
            out[perm[i]] = v[i];
        }
        out
    };
    let bias = [reorder(&bias_int[0]), reorder(&bias_int[1]), reorder(&bias_int[2])];
    let raw = concat(&estimate.alpha, &estimate.beta);
    let correction = &bias[0] / t as f64 + &bias[1] / j as f64 + &bias[2] / t as f64;
    let corrected = &raw - correction;
    let se = DVector::from_fn(l + kk, |i, _| sqrt((covariance[(i, i)] / n).max(0.0)));
    let t_stats = corrected.component_div(&se);
    Ok(InferenceReport {
        g: gm,
        omega,
        w_cal,
        b_x,
        b_z,
        bias,
        alpha: estimate.alpha.clone(),
        beta: estimate.beta.clone(),
        alpha_star: corrected.rows(0, l).into_owned(),
        beta_star: corrected.rows(l, kk).into_owned(),
        covariance,
        se,
        t_stats,
        bandwidth: opts.bandwidth,
        condition_gwg: condition,
        products: j,
        markets: t,
    })
}

/// Bias and variance estimates for a model fitted to `data`.
pub fn bias_variance(
    estimate: &LsmdEstimate,
    data: &PanelData,
    spec: &RandomCoeffSpec,
    inversion: &InversionOptions,
    opts: &InferenceOptions,
) -> Result<InferenceReport> {
    let map = ShareInversion {
        data,
        spec,
        opts: *inversion,
    };
    bias_variance_with_map(estimate, &map, &Design::from_panel(data), opts)
}

/// Smallest eigenvalue of `Omega` relative to its largest.
pub fn omega_min_ratio(report: &InferenceReport) -> f64 {
    let ev = sym_eigenvalues_desc(&report.omega);
    if ev.is_empty() || ev[0] <= 0.0 {
        return 0.0;
    }
    ev[ev.len() - 1] / ev[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, generate_linear_iv, SimulationDesign};
    use crate::linalg::annihilator;
    use crate::lsmd::{estimate, estimate_with_map, EstimatorOptions, LinearDelta, WeightMatrix};
    use crate::rng::NormalStream;

    fn explicit_bias(x: &DMatrix<f64>, e: &DMatrix<f64>, fac: &FactorEstimate, h: usize) -> [f64; 3] {
        let (j, t) = e.shape();
        let (lam, f) = (&fac.lambda, &fac.f);
        let e2 = e.map(|v| v * v);
        let d1 = DMatrix::from_fn(j, j, |a, b| if a == b { e2.row(a).sum() / t as f64 } else { 0.0 });
        let d2 = DMatrix::from_fn(t, t, |a, b| if a == b { e2.column(a).sum() / j as f64 } else { 0.0 });
        let sxe = DMatrix::from_fn(t, t, |a, b| {
            if a > b && a - b <= h {
                (0..j).map(|p| x[(p, a)] * e[(p, b)]).sum::<f64>() / j as f64
            } else {
                0.0
            }
        });
        let ll = (lam.transpose() * lam).try_inverse().unwrap();
        let ff = (f.transpose() * f).try_inverse().unwrap();
        let b0 = (projector(f) * sxe).trace();
        let b1 = (d1 * annihilator(lam) * x * f * &ff * &ll * lam.transpose()).trace();
        let b2 = (d2 * annihilator(f) * x.transpose() * lam * &ll * &ff * f.transpose()).trace();
        [b0, b1, b2]
    }

    #[test]
    fn trace_formulas_agree_with_explicit_products() {
        let mut rng = NormalStream::new(8);
        let (j, t) = (7, 9);
        let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.normal());
        let fac = FactorEstimate {
            lambda: m(j, 2),
            f: m(t, 2),
        };
        let e = m(j, t);
        let x = m(j, t);
        let b = bias_vectors(&[x.clone()], &e, &fac, 2);
        let ex = explicit_bias(&x, &e, &fac, 2);
        assert!((b.b0[0] - ex[0]).abs() < 1e-10);
        assert!((b.b1[0] - ex[1]).abs() < 1e-10);
        assert!((b.b2[0] - ex[2]).abs() < 1e-10);
        let zero_h = bias_vectors(&[x], &e, &fac, 0);
        assert_eq!(zero_h.b0[0], 0.0);
    }

    #[test]
    fn gradient_vanishes_at_zero_taste_variance() {
        let p = generate(&SimulationDesign::with_size(6, 5), 3).unwrap();
        let spec = RandomCoeffSpec::single(0, (0.0, 5.0)).unwrap();
        let map = ShareInversion {
            data: &p.data,
            spec: &spec,
            opts: InversionOptions::default(),
        };
        let g = gradient_delta(&map, &[0.0], 1e-4, None).unwrap();
        assert!(g.amax() < 1e-8, "{}", g.amax());
    }

    #[test]
    fn gradient_is_second_order_accurate() {
        let p = generate(&SimulationDesign::with_size(6, 5), 4).unwrap();
        let spec = RandomCoeffSpec::single(0, (0.0, 5.0)).unwrap();
        let map = ShareInversion {
            data: &p.data,
            spec: &spec,
            opts: InversionOptions::default(),
        };
        let g1 = gradient_delta(&map, &[1.0], 1e-2, None).unwrap();
        let g2 = gradient_delta(&map, &[1.0], 5e-3, None).unwrap();
        let g3 = gradient_delta(&map, &[1.0], 2.5e-3, None).unwrap();
        let d1 = (&g1 - &g2).amax();
        let d2 = (&g2 - &g3).amax();
        // halving the step divides the error by about four
        assert!(d2 < 0.35 * d1 && d2 > 0.15 * d1, "{d1} {d2}");
    }

    #[test]
    fn no_factor_covariance_is_two_sls_sandwich() {
        let (y, y2, x, z) = generate_linear_iv(15, 12, 2, 0.8, -1.2, 21);
        let map = LinearDelta {
            base: y.clone(),
            slopes: vec![y2.clone()],
            bounds: vec![(-5.0, 5.0)],
        };
        let regs = [x.clone()];
        let design = Design {
            regressors: &regs,
            exogenous: &[true],
            instruments: &z,
        };
        let n = y.len();
        let xs = stack_vec(&regs, n);
        let zs = stack_vec(&z, n);
        let mz = &zs - &xs * (xs.transpose() * &xs).try_inverse().unwrap() * (xs.transpose() * &zs);
        let w = WeightMatrix::user(symmetrize(&(zs.transpose() * mz / n as f64))).unwrap();
        let est = estimate_with_map(&map, &design, 0, &w, &EstimatorOptions::default()).unwrap();
        let rep = bias_variance_with_map(&est, &map, &design, &InferenceOptions::default()).unwrap();
        // textbook White-robust 2SLS
        let big_x = stack_vec(&[y2.clone(), x.clone()], n);
        let mut inst = vec![x.clone()];
        inst.extend(z.iter().cloned());
        let big_z = stack_vec(&inst, n);
        let pz = &big_z * inv_sym(&(big_z.transpose() * &big_z)) * big_z.transpose();
        let xh = &pz * &big_x;
        let bread = inv_sym(&(xh.transpose() * &xh));
        let e = vec_of(&est.residuals);
        let mut meat = DMatrix::zeros(2, 2);
        for r in 0..n {
            let row = xh.row(r);
            meat += row.transpose() * row * (e[r] * e[r]);
        }
        let sandwich = &bread * meat * &bread;
        let ours = &rep.covariance / n as f64;
        for i in 0..2 {
            for k in 0..2 {
                let rel = (ours[(i, k)] - sandwich[(i, k)]).abs() / sandwich[(i, k)].abs();
                assert!(rel < 1e-6, "{i}{k}: {} vs {}", ours[(i, k)], sandwich[(i, k)]);
            }
        }
        assert!(rep.bias.iter().all(|b| b.amax() == 0.0));
    }

    #[test]
    fn report_on_simulated_panel_is_well_formed() {
        let p = generate(&SimulationDesign::default(), 7).unwrap();
        let spec = RandomCoeffSpec::single(0, (0.0, 5.0)).unwrap();
        let est = estimate(&p.data, &spec, 1, &WeightMatrix::identity(1), &EstimatorOptions::default()).unwrap();
        let rep = bias_variance(&est, &p.data, &spec, &InversionOptions::default(), &InferenceOptions::default()).unwrap();
        assert_eq!(rep.g.shape(), (2, 2));
        assert!(omega_min_ratio(&rep) > -1e-10);
        assert!((&rep.covariance - rep.covariance.transpose()).amax() < 1e-12);
        assert!(rep.se.iter().all(|s| *s > 0.0 && *s < 1.0), "{:?}", rep.se);
        let expected = rep.estimates() - rep.correction();
        assert!((expected - rep.corrected()).amax() < 1e-14);
    }
}
