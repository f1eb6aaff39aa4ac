//! Finite-difference checks of every tape primitive and of the full
//! training loss for both architecture variants.
//!
//! cargo run --release --example grad_check

use latte::model::{check_config, loss_grad_check, ModelConfig, Variant};
use latte::tensor::op_suite;

fn main() -> latte::Result<()> {
    for (name, err) in op_suite(0)? {
        println!("{name:<16} {err:.2e}");
    }
    for variant in [Variant::Couple, Variant::Blend] {
        let cfg = ModelConfig {
            variant,
            ..check_config()
        };
        for k in 0..cfg.groups {
            let worst = loss_grad_check(&cfg, k, 0.4, 6, 1e-6, 0)?
                .into_iter()
                .max_by(|a, b| a.worst.total_cmp(&b.worst))
                .expect("some parameters");
            println!("{variant:?} group {k}: worst {} at {:.2e}", worst.name, worst.worst);
        }
    }
    Ok(())
}
