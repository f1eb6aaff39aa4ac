//! Wall-clock cost of guided sampling for the expert model against a
//! one-group model of the same depth and width.
//!
//! cargo run --release --example bench

use latte::eval::bench;
use latte::flowmatch::SamplerConfig;
use latte::model::{Model, ModelConfig};
use latte::rng::Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> latte::Result<()> {
    for cfg in [ModelConfig::default(), ModelConfig::grid8()] {
        let expert = Model::<f32>::build(&cfg, &mut Rng::new(0))?;
        let vanilla = Model::<f32>::build(&cfg.vanilla(), &mut Rng::new(0))?;
        let r = bench(&expert, &vanilla, &SamplerConfig::default(), 10, 2)?;
        println!(
            "{} tokens: expert {:.2} ms, vanilla {:.2} ms, speedup {:.2}x, layer executions {} vs {}",
            cfg.tokens(),
            r.expert_ms,
            r.vanilla_ms,
            r.speedup,
            r.expert_layer_executions,
            r.vanilla_layer_executions
        );
    }
    Ok(())
}
