//! Residual gate values per layer, head and timestep. Without a checkpoint
//! the gates of a fresh model are all zero and group-leading layers have no
//! slot.
//!
//! cargo run --release --example analyze_gates -- [checkpoint]

use latte::eval::analyze_gates;
use latte::model::{Checkpoint, Model, ModelConfig};
use latte::rng::Rng;

fn main() -> latte::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p.as_ref())?.model,
        None => Model::<f32>::build(&ModelConfig::default(), &mut Rng::new(0))?,
    };
    let rows = analyze_gates(&model)?;
    let cfg = model.config();
    for l in 0..cfg.layers {
        let mine: Vec<_> = rows.iter().filter(|r| r.layer == l).collect();
        if mine.iter().all(|r| r.gate.is_none()) {
            println!("layer {l}: group start, no residual slot");
            continue;
        }
        for h in 0..cfg.heads {
            let at = |tau: f64| {
                mine.iter()
                    .find(|r| r.head == h && r.tau == tau)
                    .and_then(|r| r.gate)
                    .unwrap_or(f64::NAN)
            };
            println!(
                "layer {l} head {h}: g(1000) {:+.4}  g(500) {:+.4}  g(0) {:+.4}",
                at(1000.0),
                at(500.0),
                at(0.0)
            );
        }
    }
    Ok(())
}
