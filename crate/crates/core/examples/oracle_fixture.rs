//! Prints brute-force effect moments for every design as JSON.
//!
//! ```text
//! cargo run --release -p forest-pls --example oracle_fixture > crates/core/tests/fixtures/oracle_moments.json
//! ```

use std::collections::BTreeMap;

use forest_pls::simulation::{oracle_moments, Design};

const DRAWS: usize = 1_000_000;
const SEED: u64 = 20_240_601;

fn main() -> forest_pls::Result<()> {
    let mut out = BTreeMap::new();
    for design in Design::ALL {
        out.insert(design.name(), oracle_moments(design, DRAWS, SEED)?);
    }
    let doc = serde_json::json!({ "draws": DRAWS, "seed": SEED, "designs": out });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
