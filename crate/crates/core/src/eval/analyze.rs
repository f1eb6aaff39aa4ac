use crate::attention::similarity_rows;
use crate::error::Result;
use crate::flowmatch::{initial_noise, tau_of_t, SamplerConfig};
use crate::model::Model;
use crate::tensor::{Real, Tensor};
use std::fmt::Write as _;

pub const SIMILARITY_HEADER: &str = "timestep,layer_pair,head,mean_S";
pub const HEAD_MEAN_HEADER: &str = "timestep,layer_pair,mean_S";
pub const GATES_HEADER: &str = "layer,head,tau,gate";

/// Spacing of the timestep grid for gate sweeps.
pub const GATE_TAU_STEP: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub timestep: f64,
    /// Adjacent layers `(l, l + 1)` inside the active group.
    pub layers: (usize, usize),
    pub head: usize,
    /// Mean over samples.
    pub mean_s: f64,
}

/// Runs the guided sampler on `labels` and, at every step, scores the
/// similarity of the self-attention maps of each adjacent layer pair in the
/// active group, per head, averaged over samples. The trace comes from the
/// conditional branch.
pub fn analyze_similarity<T: Real>(
    model: &Model<T>,
    sampler: &SamplerConfig,
    labels: &[Option<usize>],
) -> Result<Vec<SimilarityRow>> {
    sampler.validate()?;
    let mc = model.config();
    let (n, heads, tokens) = (labels.len(), mc.heads, mc.tokens());
    let cond = model.condition(labels)?;
    let uncond = model.condition_uniform(None, n)?;
    let mut x: Tensor<T> = initial_noise(&[n, tokens, mc.latent_dim], sampler.seed)?;
    let dt = T::from_f64_lossy(1.0 / sampler.steps as f64);
    let s = T::from_f64_lossy(sampler.cfg_scale);
    let mut rows = Vec::new();
    for k in 0..sampler.steps {
        let tau = tau_of_t(k as f64 / sampler.steps as f64);
        let group = model.schedule().route(tau)?;
        let taus = vec![tau; n];
        let (vc, trace) = model.expert_trace(group, &x, &taus, &cond)?;
        for pair in trace.windows(2) {
            let (a, b) = (pair[0].map.to_f64_vec(), pair[1].map.to_f64_vec());
            let block = tokens * tokens;
            for h in 0..heads {
                let total: f64 = (0..n)
                    .map(|i| {
                        let off = (i * heads + h) * block;
                        similarity_rows(&a[off..off + block], &b[off..off + block], tokens)
                    })
                    .sum();
                rows.push(SimilarityRow {
                    timestep: tau,
                    layers: (pair[0].layer, pair[1].layer),
                    head: h,
                    mean_s: total / n as f64,
                });
            }
        }
        let v = if sampler.branches() == 2 {
            let vu = model.expert_forward(group, &x, &taus, &uncond)?;
            let data = vu
                .data()
                .iter()
                .zip(vc.data())
                .map(|(&u, &c)| u + s * (c - u))
                .collect();
            Tensor::new(vc.shape(), data)?
        } else {
            vc
        };
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi + dt * vi;
        }
    }
    Ok(rows)
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = format!("{SIMILARITY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{}-{},{},{:.6}",
            r.timestep, r.layers.0, r.layers.1, r.head, r.mean_s
        );
    }
    out
}

/// Head-averaged companion of [`similarity_csv`].
pub fn head_mean_csv(rows: &[SimilarityRow], heads: usize) -> String {
    let mut out = format!("{HEAD_MEAN_HEADER}\n");
    for chunk in rows.chunks(heads.max(1)) {
        let mean = chunk.iter().map(|r| r.mean_s).sum::<f64>() / chunk.len() as f64;
        let r = &chunk[0];
        let _ = writeln!(out, "{},{}-{},{:.6}", r.timestep, r.layers.0, r.layers.1, mean);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub layer: usize,
    pub head: usize,
    pub tau: f64,
    /// `None` for layers without a residual slot.
    pub gate: Option<f64>,
}

/// Gate values of every layer and head on the grid `τ = 0, 10, …, 1000`.
pub fn analyze_gates<T: Real>(model: &Model<T>) -> Result<Vec<GateRow>> {
    let mc = model.config();
    let total = mc.total_steps as usize;
    let mut rows = Vec::new();
    for layer in 0..mc.layers {
        for tau in (0..=total).step_by(GATE_TAU_STEP) {
            let tau = tau as f64;
            let g = model.gate_at(layer, tau)?;
            for head in 0..mc.heads {
                rows.push(GateRow {
                    layer,
                    head,
                    tau,
                    gate: g.as_ref().map(|g| g.data()[head].as_f64()),
                });
            }
        }
    }
    Ok(rows)
}

pub fn gates_csv(rows: &[GateRow]) -> String {
    let mut out = format!("{GATES_HEADER}\n");
    for r in rows {
        match r.gate {
            Some(g) => {
                let _ = writeln!(out, "{},{},{},{:.6}", r.layer, r.head, r.tau, g);
            }
            None => {
                let _ = writeln!(out, "{},{},{},", r.layer, r.head, r.tau);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn grid_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            ffn_mult: 2,
            time_freq_dim: 8,
            grid_h: 3,
            grid_w: 3,
            latent_dim: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn similarity_row_count_and_range() {
        let cfg = grid_cfg();
        let m = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
        let sampler = SamplerConfig {
            steps: 5,
            ..SamplerConfig::default()
        };
        let rows = analyze_similarity(&m, &sampler, &[Some(0), Some(3), None]).unwrap();
        assert_eq!(rows.len(), 5 * (cfg.group_size() - 1) * cfg.heads);
        assert!(rows.iter().all(|r| r.mean_s > 0.0 && r.mean_s <= 1.0 + 1e-12));
        assert!(rows
            .iter()
            .all(|r| m.schedule().group_of_layer(r.layers.0) == m.schedule().group_of_layer(r.layers.1)));
        let csv = similarity_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert_eq!(
            head_mean_csv(&rows, cfg.heads).lines().count(),
            rows.len() / cfg.heads + 1
        );
    }

    #[test]
    fn fresh_gates_are_zero_with_empty_group_starts() {
        let cfg = grid_cfg();
        let m = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
        let rows = analyze_gates(&m).unwrap();
        assert_eq!(rows.len(), cfg.layers * 101 * cfg.heads);
        for r in &rows {
            if m.schedule().is_group_start(r.layer) {
                assert_eq!(r.gate, None);
            } else {
                assert_eq!(r.gate, Some(0.0));
            }
        }
        let csv = gates_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
    }
}
