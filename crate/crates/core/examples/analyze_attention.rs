//! Sequential similarity of adjacent self-attention maps along a sampling
//! trajectory, for fresh grid models with and without tied layers.
//!
//! cargo run --release --example analyze_attention

use latte::eval::{analyze_similarity, head_mean_csv};
use latte::flowmatch::SamplerConfig;
use latte::model::{Model, ModelConfig};
use latte::rng::Rng;

fn main() -> latte::Result<()> {
    let sampler = SamplerConfig {
        steps: 8,
        ..SamplerConfig::default()
    };
    let labels: Vec<Option<usize>> = (0..4).map(Some).collect();
    for std in [0.02, 0.3] {
        let cfg = ModelConfig {
            init_std: std,
            ..ModelConfig::grid8()
        };
        let untied = Model::<f32>::build(&cfg, &mut Rng::new(0))?;
        let mut tied = untied.clone();
        tied.tie_group_layers();
        for (name, m) in [("independent", &untied), ("tied", &tied)] {
            let rows = analyze_similarity(m, &sampler, &labels)?;
            let min = rows.iter().map(|r| r.mean_s).fold(f64::INFINITY, f64::min);
            println!("init std {std}, {name} layers: {} rows, min S {min:.4}", rows.len());
            print!("{}", head_mean_csv(&rows, cfg.heads));
        }
    }
    Ok(())
}
