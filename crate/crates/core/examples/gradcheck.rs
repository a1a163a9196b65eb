//! Finite-difference gradient checks for operators, blocks and a model.
//!
//! cargo run --example gradcheck -- [op|block|model] [eps] [seed]

use msanet::gradcheck::{check_all_ops, check_blocks, check_default_model, COMPOSITE_EPS, DEFAULT_EPS};

fn main() -> msanet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scope = args.first().map(String::as_str).unwrap_or("op");
    let eps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(if scope == "op" { DEFAULT_EPS } else { COMPOSITE_EPS });
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let reports = match scope {
        "op" => check_all_ops(seed, eps)?,
        "block" => check_blocks(seed, eps)?,
        _ => vec![check_default_model(seed, eps)?],
    };
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}
