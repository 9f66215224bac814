//! Widens a freshly initialised desk transformer by a factor of two and
//! reports per-layer deviation from the original on random inputs.
//!
//! cargo run --example width_expansion -- [e] [eps]

use candle_core::DType;
use mugv::dit::{DiT, DiTConfig};
use mugv::expansion::{expand_dit, random_dit_inputs, verify_preservation, BiasMode, ExpansionConfig};

fn main() -> mugv::Result<()> {
    let e: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let eps: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let model = DiT::new(DiTConfig::desk(), DType::F64, 0)?;
    let cfg = ExpansionConfig::new(e, eps, BiasMode::PreserveFunction, 1)?;
    let wide = expand_dit(&model, &cfg)?;
    println!("hidden {} -> {}", model.config.hidden, wide.config.hidden);
    let inputs = random_dit_inputs(&model.config, 4, DType::F64, 2)?;
    let report = verify_preservation(&model, &wide, &inputs, 1e-9)?;
    for layer in report.layers.iter().take(8) {
        println!("{:<40} {:.3e}", layer.layer, layer.max_deviation);
    }
    if report.layers.len() > 8 {
        println!("... {} more layers", report.layers.len() - 8);
    }
    println!(
        "max deviation {:.3e}, parameters {} -> {} (x{:.3}), passed: {}",
        report.global_max_deviation,
        report.params_before,
        report.params_after,
        report.param_ratio(),
        report.passed
    );
    Ok(())
}
