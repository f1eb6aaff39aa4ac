//! Optimization loop: one expert group per step, per-sample timesteps drawn
//! inside that group's training interval, condition dropout for guidance,
//! global-norm clipping and Adam.

use crate::data::{generate, Dataset, DatasetSpec, Normalizer, Split};
use crate::error::{Error, Result};
use crate::flowmatch::make_flow_batch;
use crate::model::{Checkpoint, CheckpointMeta, Model, ModelConfig, OptimizerState, ParamMoments};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cond_drop: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between metric rows; 0 logs every step.
    pub log_every: u64,
    /// Steps between intermediate checkpoints; 0 writes only the last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cond_drop: 0.1,
            clip_norm: 1.0,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("field `lr` must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config("field `cond_drop` must lie in [0, 1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("field `batch` must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("fields `eps` and `clip_norm` must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub group: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// Fraction of the batch whose label was dropped.
    pub dropped: f64,
}

/// Adam with per-parameter step counts; parameters without a gradient in a
/// step are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<Option<(u64, Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments: vec![None; n_params],
        }
    }

    fn update(&mut self, value: &mut Tensor<f32>, id: usize, grad: &[f32], scale: f32) {
        let n = grad.len();
        let (t, m, v) = self.moments[id].get_or_insert_with(|| (0, vec![0.0; n], vec![0.0; n]));
        *t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((w, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g * scale;
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= step * *mi / (vi.sqrt() + eps);
        }
    }

    fn export(&self, model: &Model<f32>) -> OptimizerState {
        OptimizerState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .enumerate()
                .filter_map(|(id, s)| {
                    s.as_ref().map(|(t, m, v)| ParamMoments {
                        name: model.params().get(id).name.clone(),
                        t: *t,
                        m: m.clone(),
                        v: v.clone(),
                    })
                })
                .collect(),
        }
    }

    fn import(cfg: &TrainConfig, model: &Model<f32>, state: &OptimizerState) -> Result<Self> {
        let mut adam = Self::new(cfg, model.params().len());
        adam.step = state.step;
        for pm in &state.moments {
            let id = model
                .params()
                .id(&pm.name)
                .ok_or_else(|| Error::Input(format!("optimizer state for unknown parameter {}", pm.name)))?;
            adam.moments[id] = Some((pm.t, pm.m.clone(), pm.v.clone()));
        }
        Ok(adam)
    }
}

/// Owns the model, optimizer, normalized training set and random stream.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub data: DatasetSpec,
    pub normalizer: Normalizer,
    train: Dataset,
    adam: Adam,
    rng: Rng,
    step: u64,
    running: Vec<Option<f64>>,
    group_steps: Vec<u64>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, data: DatasetSpec) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        check_compatible(&model, &data)?;
        let raw = generate(&data, Split::Train)?;
        let normalizer = Normalizer::fit(&raw);
        let train = normalizer.normalized(&raw);
        let k = model.config().groups;
        Ok(Self {
            adam: Adam::new(&cfg, model.params().len()),
            rng: Rng::new(cfg.seed),
            model,
            cfg,
            data,
            normalizer,
            train,
            step: 0,
            running: vec![None; k],
            group_steps: vec![0; k],
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .meta
            .train
            .clone()
            .ok_or_else(|| Error::Input("checkpoint has no training configuration".into()))?;
        let data = ckpt
            .meta
            .data
            .clone()
            .ok_or_else(|| Error::Input("checkpoint has no dataset spec".into()))?;
        let mut t = Self::new(ckpt.model, cfg, data)?;
        if let Some(norm) = ckpt.meta.normalizer {
            t.train = norm.normalized(&generate(&t.data, Split::Train)?);
            t.normalizer = norm;
        }
        if let Some(opt) = &ckpt.optimizer {
            t.adam = Adam::import(&t.cfg, &t.model, opt)?;
        }
        t.rng = Rng::from_state(ckpt.rng);
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn group_steps(&self) -> &[u64] {
        &self.group_steps
    }

    pub fn running_loss(&self) -> Vec<Option<f64>> {
        self.running.clone()
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let schedule = self.model.schedule().clone();
        let total = schedule.total_steps as f64;
        let b = self.cfg.batch;
        let group = self.rng.below(schedule.groups);
        let taus: Vec<f64> = (0..b).map(|_| schedule.sample_tau(group, &mut self.rng)).collect();
        let ts: Vec<f64> = taus.iter().map(|tau| 1.0 - tau / total).collect();
        let indices: Vec<usize> = (0..b).map(|_| self.rng.below(self.train.len())).collect();
        let labels: Vec<Option<usize>> = indices
            .iter()
            .map(|&i| (!self.rng.bernoulli(self.cfg.cond_drop)).then_some(self.train.labels[i]))
            .collect();
        let x1 = self.train.batch::<f32>(&indices)?;
        let flow = make_flow_batch(&x1, &ts, &mut self.rng)?;
        let (loss, grads) = self.model.loss_and_grads(group, &flow.xt, &flow.u, &taus, &labels)?;
        let sq: f64 = grads.iter().map(|(_, g)| g.sum_sq()).sum();
        let grad_norm = sq.sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                group,
                tau: taus.iter().sum::<f64>() / b as f64,
                grad_norm,
                loss,
            });
        }
        let scale = if grad_norm > self.cfg.clip_norm {
            (self.cfg.clip_norm / grad_norm) as f32
        } else {
            1.0
        };
        self.adam.step += 1;
        for (id, g) in &grads {
            let value = self.model.params_mut().value_mut(*id);
            self.adam.update(value, *id, g.data(), scale);
        }
        self.step += 1;
        self.group_steps[group] += 1;
        let r = &mut self.running[group];
        *r = Some(r.map_or(loss, |prev| 0.98 * prev + 0.02 * loss));
        Ok(StepMetrics {
            step: self.step,
            loss,
            group,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            dropped: labels.iter().filter(|l| l.is_none()).count() as f64 / b as f64,
        })
    }

    /// Trains until `cfg.steps`, handing every step's metrics to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(self.model.config())?;
        meta.data = Some(self.data.clone());
        meta.normalizer = Some(self.normalizer.clone());
        meta.train = Some(self.cfg.clone());
        Ok(Checkpoint {
            meta,
            model: self.model.clone(),
            optimizer: Some(self.adam.export(&self.model)),
            rng: self.rng.state(),
            step: self.step,
        })
    }
}

pub(crate) fn check_compatible<T: crate::tensor::Real>(model: &Model<T>, data: &DatasetSpec) -> Result<()> {
    check_compatible_shapes(model.config(), data)
}

pub(crate) fn check_compatible_shapes(cfg: &ModelConfig, data: &DatasetSpec) -> Result<()> {
    let (tokens, latent) = data.sample_shape();
    if tokens != cfg.tokens() || latent != cfg.latent_dim {
        return Err(Error::Config(format!(
            "data samples are {tokens}x{latent} but the model expects {}x{}",
            cfg.tokens(),
            cfg.latent_dim
        )));
    }
    if data.grid() != (cfg.grid_h, cfg.grid_w) {
        return Err(Error::Config("data grid does not match model grid".into()));
    }
    if data.classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes but the model has {}",
            data.classes, cfg.num_classes
        )));
    }
    Ok(())
}

/// Appends `step,loss,group,grad_norm,wall_ms` rows.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub const HEADER: &'static str = "step,loss,group,grad_norm,wall_ms";

    pub fn new(mut out: W, header: bool) -> std::io::Result<Self> {
        if header {
            writeln!(out, "{}", Self::HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{},{:.6},{},{:.6},{:.3}",
            m.step, m.loss, m.group, m.grad_norm, m.wall_ms
        )
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelConfig, TrainConfig, DatasetSpec) {
        let model = ModelConfig {
            hidden: 32,
            heads: 2,
            ffn_mult: 2,
            time_freq_dim: 16,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            steps: 12,
            batch: 32,
            seed: 5,
            ..TrainConfig::default()
        };
        let data = DatasetSpec {
            n_train: 512,
            n_eval: 64,
            ..DatasetSpec::default()
        };
        (model, train, data)
    }

    #[test]
    fn other_groups_and_frozen_params_unchanged() {
        let (mc, tc, ds) = tiny();
        let model = Model::<f32>::build(&mc, &mut Rng::new(1)).unwrap();
        let mut t = Trainer::new(model, tc, ds).unwrap();
        let before = t.model.clone();
        let m = t.train_step().unwrap();
        use crate::model::Role;
        for (p, q) in before.params().iter().zip(t.model.params().iter()) {
            let frozen = match p.role {
                Role::Context => true,
                Role::Adapter(k) => k != m.group,
                Role::Layer(l) => t.model.schedule().group_of_layer(l) != m.group,
                Role::Null | Role::Time => false,
            };
            if frozen {
                assert!(p.value.bit_eq(&q.value), "{} changed", p.name);
            }
        }
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let (mc, tc, ds) = tiny();
        let model = Model::<f32>::build(&mc, &mut Rng::new(1)).unwrap();
        let mut full = Trainer::new(model.clone(), tc.clone(), ds.clone()).unwrap();
        let mut losses = Vec::new();
        full.run(|_, m| {
            losses.push(m.loss);
            Ok(())
        })
        .unwrap();

        let mut first = Trainer::new(model, tc, ds).unwrap();
        for _ in 0..5 {
            first.train_step().unwrap();
        }
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let mut tail = Vec::new();
        resumed
            .run(|_, m| {
                tail.push(m.loss);
                Ok(())
            })
            .unwrap();
        assert_eq!(tail.len(), 7);
        for (a, b) in tail.iter().zip(&losses[5..]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            cond_drop: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
