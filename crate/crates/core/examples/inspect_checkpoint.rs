//! Round-trips a model through the checkpoint format and lists what was
//! stored.
//!
//! cargo run --example inspect_checkpoint -- [checkpoint]

use latte::model::{Checkpoint, CheckpointMeta, Model, ModelConfig, Variant};
use latte::rng::Rng;

fn main() -> latte::Result<()> {
    let ckpt = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p.as_ref())?,
        None => {
            let cfg = ModelConfig {
                variant: Variant::Blend,
                ..ModelConfig::default()
            };
            let m = Model::<f32>::build(&cfg, &mut Rng::new(0))?;
            let bytes = Checkpoint::new(m, CheckpointMeta::new(&cfg)?).to_bytes()?;
            println!("{} bytes", bytes.len());
            Checkpoint::from_bytes(&bytes).map_err(|e| latte::Error::Input(e.to_string()))?
        }
    };
    let m = &ckpt.model;
    println!("step {} variant {:?}", ckpt.step, m.config().variant);
    for (name, shape, trainable, _) in m.census() {
        println!("  {name:<28} {shape:?}{}", if trainable { "" } else { " frozen" });
    }
    for k in 0..m.config().groups {
        println!(
            "group {k}: {} parameters read per step",
            m.activated_params_per_step(k)?
        );
    }
    print!("{}", ckpt.meta.to_text()?);
    Ok(())
}
