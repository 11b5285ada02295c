//! Regenerates `fixtures/prices_3asset.csv`:
//! `cargo run -p momentum-cli --example make_fixture -- crates/cli/fixtures/prices_3asset.csv`

use momentum_transformer::market_data::write_price_csv;
use momentum_transformer::synthetic::{synthetic_panel, SyntheticSpec};

fn main() {
    let spec = SyntheticSpec { n_assets: 3, first_year: 2019, last_year: 2021, seed: 7, ..SyntheticSpec::default() };
    let panel = synthetic_panel(&spec).unwrap();
    let f = std::fs::File::create(std::env::args().nth(1).unwrap()).unwrap();
    write_price_csv(&panel.to_bars(), f).unwrap();
}
