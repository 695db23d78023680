//! Long-format panel CSV files: one row per (market, product) cell.
//!
//! Products and markets are ordered by sorted label, so row `j` of any
//! `J x T` matrix (and of the estimated loadings) is the `j`-th product
//! label in lexicographic order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use blp_ife_core::PanelData;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column names. Empty regressor or instrument lists are inferred from
/// the header: every `x_<n>` column is a regressor and every `z_<n>` column
/// an instrument, in header order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub market: String,
    pub product: String,
    pub share: String,
    pub regressors: Vec<String>,
    pub instruments: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            market: "market".into(),
            product: "product".into(),
            share: "share".into(),
            regressors: Vec::new(),
            instruments: Vec::new(),
        }
    }
}

fn numbered(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

impl Schema {
    /// `x_1..x_K` and `z_1..z_M` with the default id and share columns.
    pub fn standard(k: usize, m: usize) -> Self {
        Self {
            regressors: (1..=k).map(|i| format!("x_{i}")).collect(),
            instruments: (1..=m).map(|i| format!("z_{i}")).collect(),
            ..Self::default()
        }
    }

    /// Columns named after the panel's regressors and instruments.
    pub fn for_panel(data: &PanelData) -> Self {
        Self {
            regressors: data.regressor_names().to_vec(),
            instruments: data.instrument_names().to_vec(),
            ..Self::default()
        }
    }

    fn resolve(&self, header: &[String]) -> Result<Schema> {
        let mut out = self.clone();
        if out.regressors.is_empty() {
            out.regressors = header.iter().filter(|h| numbered(h, "x_")).cloned().collect();
        }
        if out.instruments.is_empty() {
            out.instruments = header.iter().filter(|h| numbered(h, "z_")).cloned().collect();
        }
        if out.regressors.is_empty() {
            return Err(Error::Schema(format!(
                "no regressor columns: name them in the schema or use x_1, x_2, ... (header: {})",
                header.join(",")
            )));
        }
        Ok(out)
    }
}

struct Columns {
    market: usize,
    product: usize,
    share: usize,
    regressors: Vec<usize>,
    instruments: Vec<usize>,
}

fn locate(header: &[String], schema: &Schema) -> Result<Columns> {
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Schema(format!("missing column '{name}' (header: {})", header.join(",")))
        })
    };
    Ok(Columns {
        market: find(&schema.market)?,
        product: find(&schema.product)?,
        share: find(&schema.share)?,
        regressors: schema.regressors.iter().map(|n| find(n)).collect::<Result<_>>()?,
        instruments: schema.instruments.iter().map(|n| find(n)).collect::<Result<_>>()?,
    })
}

/// Reads and validates a long-format panel.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel_csv(file, schema)
}

pub fn read_panel_csv<R: Read>(reader: R, schema: &Schema) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let schema = schema.resolve(&header)?;
    let cols = locate(&header, &schema)?;
    let width = 1 + cols.regressors.len() + cols.instruments.len();

    let mut cells: BTreeMap<(String, String), (u64, Vec<f64>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Schema(format!("line {line}: column '{}' has non-numeric value '{}'", header[i], field(i)))
            })
        };
        let mut values = Vec::with_capacity(width);
        values.push(number(cols.share)?);
        for &i in cols.regressors.iter().chain(&cols.instruments) {
            values.push(number(i)?);
        }
        let key = (field(cols.product).to_owned(), field(cols.market).to_owned());
        if let Some((first, _)) = cells.get(&key) {
            return Err(blp_ife_core::Error::UnbalancedPanel(format!(
                "product '{}' in market '{}' appears on lines {first} and {line}",
                key.0, key.1
            ))
            .into());
        }
        cells.insert(key, (line, values));
    }

    let mut products: Vec<String> = cells.keys().map(|(p, _)| p.clone()).collect();
    products.sort();
    products.dedup();
    let mut markets: Vec<String> = cells.keys().map(|(_, m)| m.clone()).collect();
    markets.sort();
    markets.dedup();
    if products.is_empty() {
        return Err(blp_ife_core::Error::DimensionMismatch("panel has no rows".into()).into());
    }
    let (j, t) = (products.len(), markets.len());
    let mut mats = vec![DMatrix::zeros(j, t); width];
    for (c, m) in markets.iter().enumerate() {
        for (r, p) in products.iter().enumerate() {
            let (_, values) = cells.get(&(p.clone(), m.clone())).ok_or_else(|| {
                blp_ife_core::Error::UnbalancedPanel(format!("no row for product '{p}' in market '{m}'"))
            })?;
            for (mat, v) in mats.iter_mut().zip(values) {
                mat[(r, c)] = *v;
            }
        }
    }
    let mut mats = mats.into_iter();
    let shares = mats.next().expect("share matrix");
    let regressors: Vec<_> = mats.by_ref().take(cols.regressors.len()).collect();
    let instruments: Vec<_> = mats.collect();
    Ok(PanelData::new(shares, regressors, instruments)?
        .with_labels(products, markets)?
        .with_names(schema.regressors, schema.instruments)?)
}

/// Writes the panel market by market with the default id and share column
/// names and the panel's own regressor and instrument names. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_panel_csv<W: Write>(writer: W, data: &PanelData) -> Result<()> {
    let schema = Schema::for_panel(data);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.market.clone(), schema.product.clone(), schema.share.clone()];
    header.extend(schema.regressors.iter().cloned());
    header.extend(schema.instruments.iter().cloned());
    w.write_record(&header)?;
    for (c, m) in data.market_labels().iter().enumerate() {
        for (r, p) in data.product_labels().iter().enumerate() {
            let mut row = vec![m.clone(), p.clone(), data.shares()[(r, c)].to_string()];
            for x in data.regressors().iter().chain(data.instruments()) {
                row.push(x[(r, c)].to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<panel csv>", e))?;
    Ok(())
}

pub fn save_panel_csv(path: impl AsRef<Path>, data: &PanelData) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_csv(file, data)
}

/// Labelled matrix: a corner label, one column per `col_labels` entry and
/// one row per `row_labels` entry.
pub fn write_matrix_csv<W: Write>(
    writer: W,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![corner.to_owned()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header)?;
    for (r, label) in row_labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(m.row(r).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<matrix csv>", e))?;
    Ok(())
}

/// Square numeric matrix without header, e.g. a user weight matrix.
pub fn load_square_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Schema(format!("{}: non-numeric entry '{v}'", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Schema(format!("{}: expected a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, k| rows[i][k]))
}
