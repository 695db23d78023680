//! Own- and cross-price elasticities implied by a fitted model.
//!
//! With price coefficient `beta_p + v` for a consumer of type `v`,
//! `ds_j/dp_k = sum_q w_q (beta_p + v_q) pi_jq (1{j=k} - pi_kq)` and the
//! elasticity is `ds_j/dp_k * p_k / s_j`.

use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lsmd::LsmdEstimate;
use crate::panel::{PanelData, RandomCoeffSpec};
use crate::quadrature::QuadratureRule;
use crate::shares::MarketTastes;

/// Share derivatives with respect to prices in one market.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceResponse {
    pub shares: DVector<f64>,
    /// `J x J`, entry `(j, k)` is `ds_j / dp_k`.
    pub derivatives: DMatrix<f64>,
    /// `ds_0 / dp_k` for the outside good.
    pub outside: DVector<f64>,
}

/// `price_dim` is the position of price among the random-coefficient
/// characteristics, if its coefficient is random.
pub fn price_response(
    delta_t: &DVector<f64>,
    rc_x: &DMatrix<f64>,
    alpha: &[f64],
    rule: &QuadratureRule,
    beta_price: f64,
    price_dim: Option<usize>,
    market: usize,
) -> Result<PriceResponse> {
    let j = delta_t.len();
    let tastes = MarketTastes::new(rc_x, alpha, rule);
    let (shares, probs) = tastes.shares_and_probs(delta_t).ok_or(Error::NumericOverflow { market })?;
    let nodes = rule.nodes();
    let mut derivatives = DMatrix::zeros(j, j);
    let mut outside = DVector::zeros(j);
    for (q, &w) in rule.weights().iter().enumerate() {
        let slope = beta_price + price_dim.map_or(0.0, |d| alpha[d] * nodes[(q, d)]);
        let pi = probs.column(q);
        let pi0 = 1.0 - pi.sum();
        for k in 0..j {
            let c = w * slope * pi[k];
            for r in 0..j {
                let own = if r == k { 1.0 } else { 0.0 };
                derivatives[(r, k)] += c * (own - pi[r]);
            }
            outside[k] -= c * pi0;
        }
    }
    Ok(PriceResponse {
        shares,
        derivatives,
        outside,
    })
}

/// Elasticities `E[j][k] = ds_j/dp_k * p_k / s_j`.
pub fn elasticities_from(response: &PriceResponse, price_t: &DVector<f64>) -> DMatrix<f64> {
    let j = price_t.len();
    DMatrix::from_fn(j, j, |r, k| response.derivatives[(r, k)] * price_t[k] / response.shares[r])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityMatrix {
    pub market: usize,
    pub market_label: String,
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// Elasticity matrix of market `t` at the fitted `delta(alpha)`; price is
/// regressor `price_index`.
pub fn elasticity_matrix(
    fit: &LsmdEstimate,
    data: &PanelData,
    spec: &RandomCoeffSpec,
    price_index: usize,
    t: usize,
) -> Result<ElasticityMatrix> {
    if t >= data.markets() {
        return Err(Error::InvalidMarket {
            market: t,
            markets: data.markets(),
        });
    }
    if price_index >= data.num_regressors() {
        return Err(Error::InvalidConfig(alloc::format!(
            "price regressor {price_index} out of range (K = {})",
            data.num_regressors()
        )));
    }
    let delta_t = fit.delta.column(t).into_owned();
    let price_t = data.regressor(price_index).column(t).into_owned();
    let price_dim = spec.rc_indices().iter().position(|&k| k == price_index);
    let response = price_response(
        &delta_t,
        &spec.rc_characteristics(data, t),
        fit.alpha.as_slice(),
        spec.rule(),
        fit.beta[price_index],
        price_dim,
        t,
    )?;
    Ok(ElasticityMatrix {
        market: t,
        market_label: data.market_labels()[t].clone(),
        labels: data.product_labels().to_vec(),
        matrix: elasticities_from(&response, &price_t),
    })
}
