//! Samples each class at several guidance scales from a checkpoint and
//! prints the class means in data space.
//!
//! cargo run --release --example sample -- runs/gauss8.ltte

use latte::eval::generate;
use latte::flowmatch::SamplerConfig;
use latte::model::Checkpoint;

fn main() -> latte::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "runs/gauss8.ltte".into());
    let ckpt = Checkpoint::load(path.as_ref())?;
    let model = &ckpt.model;
    let classes = model.config().num_classes;
    let per = 32;
    let labels: Vec<Option<usize>> = (0..classes * per).map(|i| Some(i / per)).collect();
    for s in [1.0, 3.0, 5.0] {
        let cfg = SamplerConfig {
            cfg_scale: s,
            ..SamplerConfig::default()
        };
        let before = model.layer_executions();
        let mut x = generate(model, &labels, &cfg)?.to_f64_vec();
        if let Some(norm) = &ckpt.meta.normalizer {
            norm.denormalize(&mut x);
        }
        let dim = x.len() / labels.len();
        println!("s = {s}: {} layer executions", model.layer_executions() - before);
        for c in 0..classes {
            let rows = &x[c * per * dim..(c + 1) * per * dim];
            let mean: Vec<String> = (0..dim)
                .map(|j| format!("{:+.3}", rows.iter().skip(j).step_by(dim).sum::<f64>() / per as f64))
                .collect();
            println!("  class {c}: mean [{}]", mean.join(", "));
        }
    }
    Ok(())
}
