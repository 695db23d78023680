//! Synthetic data-generating processes.
//!
//! [`SimulationDesign`] is the single-characteristic demand design used by
//! the Monte Carlo study:
//!
//! ```text
//! delta_jt = beta0 p_jt + lambda_j f_t + e_jt
//! p_jt     = max(floor, 1 + ptilde_jt + lambda_j f_t)
//! ```
//!
//! with `lambda`, `f`, `e`, `ptilde` iid `N(0, 1)`, a normal random
//! coefficient `v ~ N(0, alpha0^2)` on price and the squared price as the
//! single instrument.

use alloc::vec;
use alloc::vec::Vec;
use libm::fmax;
use nalgebra::DMatrix;

use crate::error::Result;
use crate::panel::{PanelData, RandomCoeffSpec};
use crate::quadrature::{QuadratureKind, DEFAULT_NODES};
use crate::rng::NormalStream;
use crate::shares::compute_shares_all;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub products: usize,
    pub markets: usize,
    pub factors: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub price_floor: f64,
    /// Gauss-Hermite nodes used to generate shares.
    pub nodes: usize,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self {
            products: 20,
            markets: 20,
            factors: 1,
            alpha0: 1.0,
            beta0: -3.0,
            price_floor: 0.2,
            nodes: DEFAULT_NODES,
        }
    }
}

impl SimulationDesign {
    pub fn with_size(products: usize, markets: usize) -> Self {
        Self {
            products,
            markets,
            ..Self::default()
        }
    }
}

/// True values behind a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub alpha: f64,
    pub beta: f64,
    /// `J x R`
    pub lambda: DMatrix<f64>,
    /// `T x R`
    pub f: DMatrix<f64>,
    pub errors: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    /// Number of prices raised to the floor.
    pub truncated: usize,
}

impl Truth {
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.lambda * self.f.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub data: PanelData,
    pub truth: Truth,
}

fn draw_matrix(rng: &mut NormalStream, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        for r in 0..rows {
            m[(r, c)] = rng.normal();
        }
    }
    m
}

/// Draws one panel. Draw order: `lambda`, `f`, `ptilde`, `e`, each
/// column-major.
pub fn generate(design: &SimulationDesign, seed: u64) -> Result<SimulatedPanel> {
    let (j, t, r) = (design.products, design.markets, design.factors);
    let mut rng = NormalStream::new(seed);
    let lambda = draw_matrix(&mut rng, j, r);
    let f = draw_matrix(&mut rng, t, r);
    let ptilde = draw_matrix(&mut rng, j, t);
    let errors = draw_matrix(&mut rng, j, t);
    let common = &lambda * f.transpose();
    let mut truncated = 0;
    let price = DMatrix::from_fn(j, t, |a, b| {
        let raw = 1.0 + ptilde[(a, b)] + common[(a, b)];
        if raw < design.price_floor {
            truncated += 1;
        }
        fmax(design.price_floor, raw)
    });
    let delta = &price * design.beta0 + &common + &errors;
    let spec = RandomCoeffSpec::new(
        vec![0],
        vec![(0.0, fmax(1.0, 2.0 * design.alpha0.abs()))],
        QuadratureKind::GaussHermite { nodes: design.nodes },
    )?;
    let price_ref = &price;
    let shares = compute_shares_all(
        &delta,
        |m| DMatrix::from_fn(j, 1, |a, _| price_ref[(a, m)]),
        &[design.alpha0],
        spec.rule(),
    )?;
    let instrument = price.map(|p| p * p);
    let data = PanelData::new(shares, vec![price], vec![instrument])?
        .with_names(vec!["price".into()], vec!["price_sq".into()])?;
    Ok(SimulatedPanel {
        data,
        truth: Truth {
            alpha: design.alpha0,
            beta: design.beta0,
            lambda,
            f,
            errors,
            delta,
            truncated,
        },
    })
}

/// Linear panel with a factor-driven regressor whose profiled least-squares
/// objective is bimodal:
/// `Y = beta0 X + lambda f' + e`, `X = 1 + 0.5 Xtilde + lambda f'`, `beta0 = 0`.
#[derive(Debug, Clone)]
pub struct BimodalPanel {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub beta0: f64,
}

pub fn generate_bimodal(products: usize, markets: usize, seed: u64) -> BimodalPanel {
    let mut rng = NormalStream::new(seed);
    let lambda = draw_matrix(&mut rng, products, 1);
    let f = draw_matrix(&mut rng, markets, 1);
    let xt = draw_matrix(&mut rng, products, markets);
    let e = draw_matrix(&mut rng, products, markets);
    let common = &lambda * f.transpose();
    let x = xt.map(|v| 1.0 + 0.5 * v) + &common;
    let y = &common + e;
    BimodalPanel { y, x, beta0: 0.0 }
}

/// Linear instrumental-variables panel with no factors, for checks against
/// two-stage least squares. Returns `(y, y2, x, z)` with
/// `y = y2 * alpha0 + x * beta0 + e`, `y2` endogenous (correlated with `e`)
/// and instruments `z` (`M` of them) excluded from the outcome equation.
pub fn generate_linear_iv(
    products: usize,
    markets: usize,
    instruments: usize,
    alpha0: f64,
    beta0: f64,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let mut rng = NormalStream::new(seed);
    let x = draw_matrix(&mut rng, products, markets).map(|v| 1.0 + v);
    let z: Vec<DMatrix<f64>> = (0..instruments)
        .map(|_| draw_matrix(&mut rng, products, markets))
        .collect();
    let u = draw_matrix(&mut rng, products, markets);
    let eps = draw_matrix(&mut rng, products, markets);
    // heteroscedastic errors so the robust sandwich differs from the classical one
    let e = DMatrix::from_fn(products, markets, |a, b| (0.5 * u[(a, b)] + eps[(a, b)]) * (1.0 + 0.5 * x[(a, b)].abs()));
    let mut y2 = &x * 0.5 + &u;
    for (m, zm) in z.iter().enumerate() {
        y2 += zm * (1.0 / (m + 1) as f64);
    }
    let y = &y2 * alpha0 + &x * beta0 + e;
    (y, y2, x, z)
}
