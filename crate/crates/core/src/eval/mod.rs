//! Sample quality metrics, diagnostic sweeps over attention maps and gates,
//! and sampling benchmarks.

mod analyze;
mod bench;
mod metrics;

pub use analyze::{
    analyze_gates, analyze_similarity, gates_csv, head_mean_csv, similarity_csv, GateRow, SimilarityRow, GATES_HEADER,
    GATE_TAU_STEP, HEAD_MEAN_HEADER, SIMILARITY_HEADER,
};
pub use bench::{bench, BenchReport};
pub use metrics::{clamp_report, median_bandwidth, mmd_rbf, purity, sliced_w2, w2_sorted, DEFAULT_PROJECTIONS};

use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::flowmatch::{sample, SamplerConfig};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Rows used by the median bandwidth heuristic.
const BANDWIDTH_ROWS: usize = 1000;

/// Draws one batch of samples, one per label, in one guided trajectory.
pub fn generate<T: Real>(model: &Model<T>, labels: &[Option<usize>], cfg: &SamplerConfig) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Contract("no labels to sample".into()));
    }
    let mc = model.config();
    let cond = model.condition(labels)?;
    let uncond = model.condition_uniform(None, labels.len())?;
    sample(
        model,
        &cond,
        &uncond,
        model.schedule(),
        cfg,
        &[labels.len(), mc.tokens(), mc.latent_dim],
    )
}

/// Samples mapped back to data space as a flat `[n, dim]` buffer.
pub fn generate_data(
    model: &Model<f32>,
    normalizer: &Normalizer,
    labels: &[Option<usize>],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let x = generate(model, labels, cfg)?;
    let mut out = x.to_f64_vec();
    normalizer.denormalize(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub n: usize,
    pub sliced_w2: f64,
    pub purity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sliced_w2: f64,
    pub mmd_rbf: f64,
    pub n_samples: usize,
    pub sampler: SamplerConfig,
    /// Layer executions of the whole sampling run (one batched trajectory).
    pub layer_executions: u64,
    pub wall_ms_per_sample: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// Generates `n` samples with labels cycling over the classes and compares
/// them to `real` in data space, overall and per class. `centers` enables
/// the purity column.
pub fn evaluate(
    model: &Model<f32>,
    normalizer: &Normalizer,
    real: &Dataset,
    centers: Option<&[[f64; 2]]>,
    sampler: &SamplerConfig,
    n: usize,
    metric_seed: u64,
) -> Result<EvalReport> {
    if real.is_empty() || n == 0 {
        return Err(Error::Contract("evaluation needs real and generated samples".into()));
    }
    let dim = real.dim();
    if dim != model.config().tokens() * model.config().latent_dim {
        return Err(Error::Input(format!(
            "real samples have {dim} values but the model produces {}",
            model.config().tokens() * model.config().latent_dim
        )));
    }
    let classes = model.config().num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let cond: Vec<Option<usize>> = labels.iter().map(|&c| Some(c)).collect();
    let before = model.layer_executions();
    let start = Instant::now();
    let fake = generate_data(model, normalizer, &cond, sampler)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    let layer_executions = model.layer_executions() - before;

    let mut rng = Rng::new(metric_seed);
    let sw = sliced_w2(&fake, &real.samples, dim, DEFAULT_PROJECTIONS, &mut rng)?;
    let bw = median_bandwidth(&real.samples, dim, BANDWIDTH_ROWS)?;
    let mmd = clamp_report(mmd_rbf(&fake, &real.samples, dim, bw)?);

    let mut per_class = Vec::new();
    for c in 0..classes {
        let pick = |data: &[f64], labels: &[usize]| -> Vec<f64> {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .flat_map(|(i, _)| data[i * dim..(i + 1) * dim].iter().copied())
                .collect()
        };
        let f = pick(&fake, &labels);
        let r = pick(&real.samples, &real.labels);
        if f.is_empty() || r.is_empty() {
            continue;
        }
        let purity = match centers {
            Some(cs) if dim == 2 => Some(purity(&f, &vec![c; f.len() / 2], cs)?),
            _ => None,
        };
        per_class.push(ClassReport {
            class: c,
            n: f.len() / dim,
            sliced_w2: sliced_w2(&f, &r, dim, DEFAULT_PROJECTIONS, &mut rng)?,
            purity,
        });
    }
    Ok(EvalReport {
        sliced_w2: sw,
        mmd_rbf: mmd,
        n_samples: n,
        sampler: sampler.clone(),
        layer_executions,
        wall_ms_per_sample: wall / n as f64,
        per_class,
    })
}

/// Mean purity of class-conditional samples against class centres.
pub fn class_purity(
    model: &Model<f32>,
    normalizer: &Normalizer,
    centers: &[[f64; 2]],
    sampler: &SamplerConfig,
    n: usize,
) -> Result<f64> {
    let classes = model.config().num_classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let cond: Vec<Option<usize>> = labels.iter().map(|&c| Some(c)).collect();
    let fake = generate_data(model, normalizer, &cond, sampler)?;
    purity(&fake, &labels, centers)
}
