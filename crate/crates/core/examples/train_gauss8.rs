//! Trains the default expert model on gauss8 and saves a checkpoint.
//!
//! cargo run --release --example train_gauss8 -- [steps] [out.ltte]

use latte::data::DatasetSpec;
use latte::model::{Model, ModelConfig};
use latte::rng::Rng;
use latte::train::{TrainConfig, Trainer};

fn main() -> latte::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let out = args.next().unwrap_or_else(|| "runs/gauss8.ltte".into());
    let cfg = ModelConfig::default();
    let model = Model::<f32>::build(&cfg, &mut Rng::new(0))?;
    println!(
        "{} parameters, {} trainable; groups of {} layers",
        model.params().numel(),
        model.params().trainable_numel(),
        cfg.group_size()
    );
    let tc = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tc, DatasetSpec::default())?;
    trainer.run(|t, m| {
        if m.step % 250 == 0 || m.step == t.cfg.steps {
            let running: Vec<String> = t
                .running_loss()
                .iter()
                .map(|l| l.map_or("-".into(), |v| format!("{v:.3}")))
                .collect();
            println!(
                "step {:>6}  loss {:.4}  per group [{}]",
                m.step,
                m.loss,
                running.join(" ")
            );
        }
        Ok(())
    })?;
    if let Some(dir) = std::path::Path::new(&out).parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    trainer.checkpoint()?.save(out.as_ref())?;
    println!("saved {out}");
    Ok(())
}
