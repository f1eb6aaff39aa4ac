use crate::error::{Error, Result};
use crate::flowmatch::SamplerConfig;
use crate::model::Model;
use crate::tensor::Real;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub expert_ms: f64,
    pub vanilla_ms: f64,
    /// `vanilla_ms / expert_ms`.
    pub speedup: f64,
    /// Layer executions for one sample.
    pub expert_layer_executions: u64,
    pub vanilla_layer_executions: u64,
    pub execution_ratio: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// Median wall time and layer executions of single-sample runs.
fn time_model<T: Real>(model: &Model<T>, sampler: &SamplerConfig, runs: usize, warmup: usize) -> Result<(f64, u64)> {
    let classes = model.config().num_classes;
    let mut times = Vec::with_capacity(runs);
    let mut execs = None;
    for r in 0..warmup + runs {
        let label = [Some(r % classes)];
        let before = model.layer_executions();
        let start = Instant::now();
        std::hint::black_box(super::generate(model, &label, sampler)?);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let count = model.layer_executions() - before;
        if execs.is_some_and(|e| e != count) {
            return Err(Error::Contract("layer execution count varied between runs".into()));
        }
        execs = Some(count);
        if r >= warmup {
            times.push(ms);
        }
    }
    Ok((median(times), execs.unwrap_or(0)))
}

/// Times single-sample generation for both models sequentially, expert
/// first, after `warmup` untimed runs each.
pub fn bench<T: Real>(
    expert: &Model<T>,
    vanilla: &Model<T>,
    sampler: &SamplerConfig,
    runs: usize,
    warmup: usize,
) -> Result<BenchReport> {
    sampler.validate()?;
    if runs == 0 {
        return Err(Error::Contract("bench needs at least one run".into()));
    }
    let (a, b) = (expert.config(), vanilla.config());
    if (a.layers, a.hidden, a.heads, a.tokens()) != (b.layers, b.hidden, b.heads, b.tokens()) {
        return Err(Error::Config(
            "bench models differ in layers, width, heads or tokens".into(),
        ));
    }
    if b.groups != 1 {
        return Err(Error::Config("vanilla model must have a single group".into()));
    }
    let (expert_ms, ee) = time_model(expert, sampler, runs, warmup)?;
    let (vanilla_ms, ve) = time_model(vanilla, sampler, runs, warmup)?;
    Ok(BenchReport {
        runs,
        expert_ms,
        vanilla_ms,
        speedup: vanilla_ms / expert_ms,
        expert_layer_executions: ee,
        vanilla_layer_executions: ve,
        execution_ratio: ve as f64 / ee as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn execution_ratio_is_group_count() {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            ffn_mult: 2,
            time_freq_dim: 8,
            ..ModelConfig::default()
        };
        let e = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
        let v = Model::<f32>::build(&cfg.vanilla(), &mut Rng::new(0)).unwrap();
        let s = SamplerConfig {
            steps: 8,
            ..SamplerConfig::default()
        };
        let r = bench(&e, &v, &s, 3, 1).unwrap();
        assert_eq!(r.expert_layer_executions, 2 * 2 * 8);
        assert_eq!(r.vanilla_layer_executions, 2 * 8 * 8);
        assert_eq!(r.execution_ratio, 4.0);
        assert!(bench(&e, &e, &s, 1, 0).is_err());
    }
}
