//! Finite-difference verification of the full training loss.

use super::{Model, ModelConfig};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of [`loss_grad_check`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub worst: f64,
}

/// Builds an `f64` model from `cfg`, redraws every parameter (gates
/// included) from `N(0, std²)`, and compares [`Model::loss_and_grads`] for
/// group `k` against central differences of [`Model::loss`] on up to
/// `coords` random coordinates of each parameter that received a gradient.
pub fn loss_grad_check(
    cfg: &ModelConfig,
    k: usize,
    std: f64,
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    let mut rng = Rng::new(seed);
    let mut model = Model::<f64>::build(cfg, &mut rng)?;
    for id in 0..model.params().len() {
        let v = model.params_mut().value_mut(id);
        for x in v.data_mut() {
            *x = std * rng.normal();
        }
    }
    let b = 3;
    let n = b * cfg.tokens() * cfg.latent_dim;
    let shape = [b, cfg.tokens(), cfg.latent_dim];
    let x = Tensor::from_f64(&shape, &rng.normals(n))?;
    let u = Tensor::from_f64(&shape, &rng.normals(n))?;
    let iv = model.schedule().train_intervals[k];
    let taus: Vec<f64> = (0..b).map(|_| rng.uniform_in(iv.lo, iv.hi)).collect();
    let labels: Vec<Option<usize>> = (0..b).map(|i| (i != 1).then(|| rng.below(cfg.num_classes))).collect();

    let (_, grads) = model.loss_and_grads(k, &x, &u, &taus, &labels)?;
    let mut out = Vec::new();
    for (id, g) in grads {
        let len = g.len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            (0..coords).map(|_| rng.below(len)).collect()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let base = model.params().get(id).value.data()[i];
            model.params_mut().value_mut(id).data_mut()[i] = base + eps;
            let plus = model.loss(k, &x, &u, &taus, &labels)?;
            model.params_mut().value_mut(id).data_mut()[i] = base - eps;
            let minus = model.loss(k, &x, &u, &taus, &labels)?;
            model.params_mut().value_mut(id).data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8));
        }
        out.push(ParamCheck {
            name: model.params().get(id).name.clone(),
            coords: picks.len(),
            worst,
        });
    }
    Ok(out)
}

/// A configuration small enough for exhaustive finite differences that
/// still has two groups of two layers, a 2×2 grid and two heads.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        layers: 4,
        groups: 2,
        hidden: 8,
        heads: 2,
        ffn_mult: 2,
        latent_dim: 2,
        grid_h: 2,
        grid_w: 2,
        context_tokens: 2,
        num_classes: 3,
        time_freq_dim: 4,
        ..ModelConfig::default()
    }
}
