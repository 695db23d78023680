//! Integration rules for normally distributed taste shocks.
//!
//! Every rule integrates against the *standard* normal in `D` dimensions;
//! the scale parameters `alpha` are applied by the share map
//! (`v_d = alpha_d * z_d`).

use alloc::vec;
use alloc::vec::Vec;
use libm::{pow, sqrt};
use nalgebra::DMatrix;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::special::inv_norm_cdf;

/// Default number of Gauss-Hermite nodes per dimension.
pub const DEFAULT_NODES: usize = 64;

/// Above this many random coefficients the product rule is replaced by
/// shifted Halton draws.
pub const MAX_PRODUCT_DIMS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadratureKind {
    /// Tensor-product Gauss-Hermite with `nodes` points per dimension.
    GaussHermite { nodes: usize },
    /// `draws` Halton points, randomly shifted with a fixed seed and mapped
    /// through the normal quantile function.
    Halton { draws: usize, seed: u64 },
}

impl QuadratureKind {
    /// Gauss-Hermite for up to three coefficients, Halton beyond.
    pub fn default_for(dims: usize, nodes: usize) -> Self {
        if dims <= MAX_PRODUCT_DIMS {
            QuadratureKind::GaussHermite { nodes }
        } else {
            QuadratureKind::Halton {
                draws: nodes * 16,
                seed: 0x5eed,
            }
        }
    }
}

/// Abscissae (`Q x D`, standard-normal scale) and weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: DMatrix<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(kind: QuadratureKind, dims: usize) -> Result<Self> {
        match kind {
            QuadratureKind::GaussHermite { nodes } => {
                if nodes == 0 {
                    return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
                }
                if dims > MAX_PRODUCT_DIMS {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "product Gauss-Hermite rule limited to {MAX_PRODUCT_DIMS} dimensions, got {dims}"
                    )));
                }
                let (x, w) = gauss_hermite_normal(nodes);
                Ok(Self::tensor(&x, &w, dims))
            }
            QuadratureKind::Halton { draws, seed } => {
                if draws == 0 {
                    return Err(Error::InvalidConfig("Halton rule needs at least one draw".into()));
                }
                Ok(Self::halton(draws, dims, seed))
            }
        }
    }

    /// One-dimensional Gauss-Hermite rule for `N(0, 1)`.
    pub fn gauss_hermite(nodes: usize) -> Self {
        let (x, w) = gauss_hermite_normal(nodes);
        Self::tensor(&x, &w, 1)
    }

    /// A rule with a single node at the origin; used when there are no
    /// random coefficients (plain logit).
    pub fn degenerate(dims: usize) -> Self {
        Self {
            nodes: DMatrix::zeros(1, dims),
            weights: vec![1.0],
        }
    }

    fn tensor(x: &[f64], w: &[f64], dims: usize) -> Self {
        if dims == 0 {
            return Self::degenerate(0);
        }
        let n = x.len();
        let q = n.pow(dims as u32);
        let mut nodes = DMatrix::zeros(q, dims);
        let mut weights = vec![1.0; q];
        for idx in 0..q {
            let mut rem = idx;
            for d in 0..dims {
                let i = rem % n;
                rem /= n;
                nodes[(idx, d)] = x[i];
                weights[idx] *= w[i];
            }
        }
        let mut rule = Self { nodes, weights };
        rule.normalize();
        rule
    }

    fn halton(draws: usize, dims: usize, seed: u64) -> Self {
        const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut nodes = DMatrix::zeros(draws, dims);
        for d in 0..dims {
            let base = PRIMES[d % PRIMES.len()] + 58 * (d / PRIMES.len()) as u64;
            let shift = unit_open(rng.next_u64());
            for i in 0..draws {
                let mut u = radical_inverse(i as u64 + 1, base) + shift;
                if u >= 1.0 {
                    u -= 1.0;
                }
                let u = u.clamp(1e-15, 1.0 - 1e-15);
                nodes[(i, d)] = inv_norm_cdf(u);
            }
        }
        Self {
            nodes,
            weights: vec![1.0 / draws as f64; draws],
        }
    }

    fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.nodes.ncols()
    }

    /// `Q x D` matrix of standard-normal abscissae.
    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Gauss-Hermite nodes and weights for the standard normal density:
/// `sum_i w_i g(x_i) ~ E[g(Z)]`, exact for polynomials of degree `2n - 1`.
///
/// Nodes of the physicists' rule are found by Newton iteration on the
/// orthonormal Hermite recurrence and then rescaled by `sqrt(2)`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => sqrt(2.0 * nf + 1.0) - 1.855_75 * pow(2.0 * nf + 1.0, -0.166_67),
            1 => z - 1.14 * pow(nf, 0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * sqrt(2.0 / jf) * p2 - sqrt((jf - 1.0) / jf) * p3;
            }
            pp = sqrt(2.0 * nf) * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // physicists' weights sum to sqrt(pi); map to N(0,1)
    let sqrt2 = core::f64::consts::SQRT_2;
    let total: f64 = w.iter().sum();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * sqrt2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v / total).collect();
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}
