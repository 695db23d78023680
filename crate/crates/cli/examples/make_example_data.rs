//! Regenerates `data/example.csv`, the synthetic panel bundled for the
//! command-line walkthrough and its end-to-end tests.
//!
//! cargo run -p blp-ife --example make_example_data

use blp_ife::panel_io::save_panel_csv;
use blp_ife_core::dgp::{generate, SimulationDesign};

pub const PRODUCTS: usize = 15;
pub const MARKETS: usize = 12;
pub const SEED: u64 = 7;

fn main() -> blp_ife::Result<()> {
    let sim = generate(&SimulationDesign::with_size(PRODUCTS, MARKETS), SEED)?;
    let data = sim.data.with_names(vec!["price".into()], vec!["price_sq".into()])?;
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/example.csv");
    save_panel_csv(path, &data)?;
    println!("wrote {path}");
    Ok(())
}
