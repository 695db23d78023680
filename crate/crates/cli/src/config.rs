//! Run settings from a flat `key = value` file and command-line overrides.
//!
//! Both sources go through [`RunConfig::set`], so a file line
//! `alpha_bounds = 0,5` and the flag `--alpha-bounds 0,5` are validated by
//! the same code. Later settings win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use blp_ife_core::inference::DEFAULT_BANDWIDTH;
use blp_ife_core::montecarlo::McConfig;
use blp_ife_core::quadrature::DEFAULT_NODES;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel_io::Schema;

/// Parses `key = value` lines; `#` starts a comment, keys are
/// case-insensitive and `-` is read as `_`.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
        let key = normalize_key(k);
        if out.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
        }
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightChoice {
    Identity,
    /// Identity-weighted first stage, then the efficient weight built from
    /// its factors.
    Optimal,
    BlpEmpirical,
    File(PathBuf),
}

impl std::str::FromStr for WeightChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "optimal" => Ok(Self::Optimal),
            "blp-empirical" | "blp_empirical" => Ok(Self::BlpEmpirical),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "weight must be identity, optimal, blp-empirical or file:PATH, got '{s}'"
                ))),
            },
        }
    }
}

/// Which synthetic design `diagnose` draws when no data file is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnoseDesign {
    /// Demand panel; writes the relevance surface.
    Demand,
    /// Linear factor panel with two local minima; writes the objective
    /// profile.
    Bimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaConfig {
    pub market: String,
    pub product: String,
    pub share: String,
    pub regressors: Vec<String>,
    pub instruments: Vec<String>,
}

impl From<&SchemaConfig> for Schema {
    fn from(s: &SchemaConfig) -> Self {
        Schema {
            market: s.market.clone(),
            product: s.product.clone(),
            share: s.share.clone(),
            regressors: s.regressors.clone(),
            instruments: s.instruments.clone(),
        }
    }
}

/// Every setting of every command. Unused settings are ignored by a
/// command but still echoed into its output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: SchemaConfig,
    pub out: PathBuf,
    pub factors: usize,
    pub weight: WeightChoice,
    /// Columns with normal random coefficients; the first regressor when
    /// empty.
    pub random: Vec<String>,
    pub alpha_bounds: Vec<(f64, f64)>,
    pub endogenous: Vec<String>,
    pub bandwidth: usize,
    pub nodes: usize,
    pub seed: u64,
    pub reps: usize,
    pub threads: Option<usize>,
    /// Price column for elasticities; the first random coefficient when
    /// unset.
    pub price: Option<String>,
    /// Market label for elasticities; all markets when unset.
    pub market: Option<String>,
    pub products: usize,
    pub markets: usize,
    pub factors_true: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub price_floor: f64,
    pub inference: bool,
    pub bias_correction: bool,
    pub max_failure_rate: f64,
    pub design: DiagnoseDesign,
    pub grid_points: usize,
    /// Relevance-surface window; `truth +- 1` when unset.
    pub alpha_grid: Option<(f64, f64)>,
    pub beta_grid: Option<(f64, f64)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            data: None,
            schema: SchemaConfig {
                market: "market".into(),
                product: "product".into(),
                share: "share".into(),
                regressors: Vec::new(),
                instruments: Vec::new(),
            },
            out: PathBuf::from("out"),
            factors: 1,
            weight: WeightChoice::Optimal,
            random: Vec::new(),
            alpha_bounds: Vec::new(),
            endogenous: Vec::new(),
            bandwidth: DEFAULT_BANDWIDTH,
            nodes: DEFAULT_NODES,
            seed: mc.base_seed,
            reps: mc.reps,
            threads: None,
            price: None,
            market: None,
            products: mc.products,
            markets: mc.markets,
            factors_true: mc.factors_true,
            alpha0: mc.alpha0,
            beta0: mc.beta0,
            price_floor: mc.price_floor,
            inference: mc.inference,
            bias_correction: mc.bias_correction,
            max_failure_rate: mc.max_failure_rate,
            design: DiagnoseDesign::Demand,
            grid_points: 21,
            alpha_grid: None,
            beta_grid: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match v.split(',').collect::<Vec<_>>().as_slice() {
        [lo, hi] => {
            let (lo, hi): (f64, f64) = (parse(key, lo)?, parse(key, hi)?);
            if !(lo < hi) {
                return Err(Error::Config(format!("{key}: need lo < hi, got {lo},{hi}")));
            }
            Ok((lo, hi))
        }
        _ => Err(Error::Config(format!("{key}: expected 'lo,hi', got '{v}'"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let k = key.as_str();
        let v = value.trim();
        match k {
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "market_col" => self.schema.market = v.into(),
            "product_col" => self.schema.product = v.into(),
            "share_col" => self.schema.share = v.into(),
            "regressors" => self.schema.regressors = list(v),
            "instruments" => self.schema.instruments = list(v),
            "factors" | "factors_est" => self.factors = parse(k, v)?,
            "weight" => self.weight = v.parse()?,
            "random" => self.random = list(v),
            "alpha_bounds" => {
                self.alpha_bounds = v.split(';').map(|p| pair(k, p)).collect::<Result<_>>()?;
                if let Some((lo, _)) = self.alpha_bounds.iter().find(|(lo, _)| *lo < 0.0) {
                    return Err(Error::Config(format!("alpha_bounds: scale parameters need lo >= 0, got {lo}")));
                }
            }
            "endogenous" => self.endogenous = list(v),
            "bandwidth" => self.bandwidth = parse(k, v)?,
            "nodes" => {
                self.nodes = parse(k, v)?;
                if self.nodes == 0 {
                    return Err(Error::Config("nodes must be at least 1".into()));
                }
            }
            "seed" | "base_seed" => self.seed = parse(k, v)?,
            "reps" => self.reps = parse(k, v)?,
            "threads" => {
                let n: usize = parse(k, v)?;
                self.threads = (n > 0).then_some(n);
            }
            "price" => self.price = Some(v.into()),
            "market" => self.market = Some(v.into()),
            "products" => self.products = parse(k, v)?,
            "markets" => self.markets = parse(k, v)?,
            "factors_true" => self.factors_true = parse(k, v)?,
            "alpha0" => self.alpha0 = parse(k, v)?,
            "beta0" => self.beta0 = parse(k, v)?,
            "price_floor" => self.price_floor = parse(k, v)?,
            "inference" => self.inference = boolean(k, v)?,
            "bias_correction" => self.bias_correction = boolean(k, v)?,
            "max_failure_rate" => self.max_failure_rate = parse(k, v)?,
            "design" => {
                self.design = match v {
                    "demand" => DiagnoseDesign::Demand,
                    "bimodal" => DiagnoseDesign::Bimodal,
                    _ => return Err(Error::Config(format!("design must be demand or bimodal, got '{v}'"))),
                }
            }
            "grid_points" => {
                self.grid_points = parse(k, v)?;
                if self.grid_points < 2 {
                    return Err(Error::Config("grid_points must be at least 2".into()));
                }
            }
            "alpha_grid" => self.alpha_grid = Some(pair(k, v)?),
            "beta_grid" => self.beta_grid = Some(pair(k, v)?),
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, values: &BTreeMap<String, String>) -> Result<()> {
        values.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Reads a settings file. Relative `data`, `out` and `file:` weight
    /// paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kv = parse_key_values(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &str| base.join(p).to_string_lossy().into_owned();
        for key in ["data", "out"] {
            if let Some(v) = kv.get_mut(key) {
                *v = rebase(v);
            }
        }
        if let Some(v) = kv.get_mut("weight") {
            if let Some(p) = v.strip_prefix("file:") {
                *v = format!("file:{}", rebase(p));
            }
        }
        Ok(kv)
    }

    /// Monte Carlo settings. Bounds default to `[0, 5]`.
    pub fn study(&self) -> Result<McConfig> {
        let alpha_bounds = match self.alpha_bounds.as_slice() {
            [] => McConfig::default().alpha_bounds,
            [b] => *b,
            _ => return Err(Error::Config("the simulation design has one random coefficient".into())),
        };
        let cfg = McConfig {
            products: self.products,
            markets: self.markets,
            factors_true: self.factors_true,
            factors_est: self.factors,
            reps: self.reps,
            base_seed: self.seed,
            alpha0: self.alpha0,
            beta0: self.beta0,
            price_floor: self.price_floor,
            nodes: self.nodes,
            alpha_bounds,
            inference: self.inference || self.bias_correction,
            bias_correction: self.bias_correction,
            bandwidth: self.bandwidth,
            max_failure_rate: self.max_failure_rate,
            ..McConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
