//! Scores a checkpoint against the held-out split: sliced W2, RBF MMD and
//! per-class purity, with and without guidance.
//!
//! cargo run --release --example evaluate -- runs/gauss8.ltte

use latte::data::{generate, DatasetSpec, Normalizer, Split};
use latte::eval::evaluate;
use latte::flowmatch::SamplerConfig;
use latte::model::Checkpoint;

fn main() -> latte::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "runs/gauss8.ltte".into());
    let ckpt = Checkpoint::load(path.as_ref())?;
    let spec = ckpt.meta.data.clone().unwrap_or_else(DatasetSpec::default);
    let real = generate(&spec, Split::Eval)?;
    let norm = match ckpt.meta.normalizer.clone() {
        Some(n) => n,
        None => Normalizer::for_spec(&spec)?,
    };
    let centers = spec.class_centers();
    for s in [1.0, 5.0] {
        let sampler = SamplerConfig {
            cfg_scale: s,
            ..SamplerConfig::default()
        };
        let r = evaluate(&ckpt.model, &norm, &real, centers.as_deref(), &sampler, 2000, 0)?;
        println!(
            "s = {s}: sliced_w2 {:.4}  mmd {:.5}  {:.3} ms/sample",
            r.sliced_w2, r.mmd_rbf, r.wall_ms_per_sample
        );
        for c in &r.per_class {
            let purity = c.purity.map_or("-".into(), |p| format!("{p:.3}"));
            println!("  class {}: sliced_w2 {:.4} purity {purity}", c.class, c.sliced_w2);
        }
    }
    Ok(())
}
