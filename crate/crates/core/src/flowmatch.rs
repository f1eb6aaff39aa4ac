//! Linear-path flow matching: training pairs, the conditional flow-matching
//! loss, and a guided forward-Euler sampler routed through expert groups.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::TimestepSchedule;
use crate::tensor::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Discrete timestep count used for routing and embeddings.
pub const TOTAL_STEPS: f64 = 1000.0;

/// One point on the path `x_t = t·x1 + (1 − t)·x0` with its target
/// velocity `u = x1 − x0`.
#[derive(Clone, Debug)]
pub struct FlowSample<T> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: f64,
    pub xt: Tensor<T>,
    pub u: Tensor<T>,
}

/// Interpolates between given noise and data.
pub fn interpolate<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if x0.shape() != x1.shape() {
        return Err(Error::dim("interpolate", x0.shape(), x1.shape()));
    }
    let tt = T::from_f64_lossy(t);
    let one_minus = T::from_f64_lossy(1.0 - t);
    let xt = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| tt * b + one_minus * a)
        .collect();
    let u = x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect();
    Ok((Tensor::new(x1.shape(), xt)?, Tensor::new(x1.shape(), u)?))
}

/// Draws `x0 ~ N(0, I)` and builds the path point at time `t`.
pub fn make_flow_sample<T: Real>(x1: &Tensor<T>, t: f64, rng: &mut Rng) -> Result<FlowSample<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("t = {t} outside [0, 1]")));
    }
    let x0 = Tensor::from_f64(x1.shape(), &rng.normals(x1.len()))?;
    let (xt, u) = interpolate(&x0, x1, t)?;
    Ok(FlowSample {
        x0,
        x1: x1.clone(),
        t,
        xt,
        u,
    })
}

/// Batched training pairs: `x1` is `[B, ...]` and `ts[i]` is sample `i`'s
/// time.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    pub x0: Tensor<T>,
    pub xt: Tensor<T>,
    pub u: Tensor<T>,
}

pub fn make_flow_batch<T: Real>(x1: &Tensor<T>, ts: &[f64], rng: &mut Rng) -> Result<FlowBatch<T>> {
    let b = x1.shape()[0];
    if ts.len() != b {
        return Err(Error::dim("make_flow_batch", x1.shape(), &[ts.len()]));
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Contract(format!("t = {t} outside [0, 1]")));
    }
    let per = x1.len() / b;
    let x0 = Tensor::from_f64(x1.shape(), &rng.normals(x1.len()))?;
    let mut xt = Vec::with_capacity(x1.len());
    let mut u = Vec::with_capacity(x1.len());
    for (i, &t) in ts.iter().enumerate() {
        let tt = T::from_f64_lossy(t);
        let om = T::from_f64_lossy(1.0 - t);
        for j in i * per..(i + 1) * per {
            let (a, d) = (x0.data()[j], x1.data()[j]);
            xt.push(tt * d + om * a);
            u.push(d - a);
        }
    }
    Ok(FlowBatch {
        xt: Tensor::new(x1.shape(), xt)?,
        u: Tensor::new(x1.shape(), u)?,
        x0,
    })
}

/// Mean squared error between predicted and target velocity.
pub fn cfm_loss<'t, T: Real>(v_pred: Var<'t, T>, u_target: Var<'t, T>) -> Result<Var<'t, T>> {
    v_pred.mse(u_target)
}

/// `τ = T·(1 − t)`, so `t = 0` (noise) maps to `τ = 1000`.
pub fn tau_of_t(t: f64) -> f64 {
    TOTAL_STEPS * (1.0 - t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    40
}

fn default_cfg_scale() -> f64 {
    5.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            cfg_scale: default_cfg_scale(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 1.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("cfg_scale must be >= 1, got {}", self.cfg_scale)));
        }
        Ok(())
    }

    /// Forward passes per step: guidance needs the null-context branch,
    /// except at `s = 1` where it cancels.
    pub fn branches(&self) -> usize {
        if self.cfg_scale == 1.0 {
            1
        } else {
            2
        }
    }
}

/// A velocity predictor split into timestep-routed groups.
pub trait VelocityField<T: Real> {
    type Cond;

    fn groups(&self) -> usize;

    /// Velocity at discrete timestep `tau` using expert `group`.
    fn velocity(&self, group: usize, x: &Tensor<T>, tau: f64, cond: &Self::Cond) -> Result<Tensor<T>>;
}

/// Standard-normal starting noise for a sampler seed.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &Rng::new(seed).normals(n))
}

/// Integrates from `t = 0` to `t = 1` with uniform Euler steps, combining
/// branches as `v_u + s·(v_c − v_u)`.
pub fn sample_from<T: Real, F: VelocityField<T>>(
    field: &F,
    cond: &F::Cond,
    uncond: &F::Cond,
    schedule: &TimestepSchedule,
    cfg: &SamplerConfig,
    x0: Tensor<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if field.groups() != schedule.groups {
        return Err(Error::Config(format!(
            "model has {} groups but schedule has {}",
            field.groups(),
            schedule.groups
        )));
    }
    let steps = cfg.steps;
    let dt = T::from_f64_lossy(1.0 / steps as f64);
    let s = T::from_f64_lossy(cfg.cfg_scale);
    let guided = cfg.branches() == 2;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let tau = tau_of_t(t);
        let group = schedule.route(tau)?;
        let vc = field.velocity(group, &x, tau, cond)?;
        let v = if guided {
            let vu = field.velocity(group, &x, tau, uncond)?;
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
        if v.shape() != x.shape() {
            return Err(Error::dim("sample", x.shape(), v.shape()));
        }
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi + dt * vi;
        }
    }
    Ok(x)
}

/// [`sample_from`] starting at noise drawn from `cfg.seed`.
pub fn sample<T: Real, F: VelocityField<T>>(
    field: &F,
    cond: &F::Cond,
    uncond: &F::Cond,
    schedule: &TimestepSchedule,
    cfg: &SamplerConfig,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let x0 = initial_noise(shape, cfg.seed)?;
    sample_from(field, cond, uncond, schedule, cfg, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use std::cell::Cell;

    #[test]
    fn path_endpoints_are_exact() {
        let mut rng = Rng::new(1);
        let x1 = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 - 2.5);
        let s0 = make_flow_sample(&x1, 0.0, &mut rng).unwrap();
        assert!(s0.xt.bit_eq(&s0.x0));
        let s1 = make_flow_sample(&x1, 1.0, &mut rng).unwrap();
        assert!(s1.xt.bit_eq(&x1));
        assert!(make_flow_sample(&x1, 1.5, &mut rng).is_err());
        assert!(make_flow_sample(&x1, -0.1, &mut rng).is_err());
    }

    #[test]
    fn midpoint_arithmetic() {
        let x0 = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let x1 = Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap();
        let (xt, u) = interpolate(&x0, &x1, 0.5).unwrap();
        assert_eq!(xt.data(), &[1.0]);
        assert_eq!(u.data(), &[2.0]);
    }

    #[test]
    fn target_velocity_ignores_t() {
        let x0 = Tensor::<f64>::from_fn(&[4], |i| i as f64 * 0.3);
        let x1 = Tensor::<f64>::from_fn(&[4], |i| 1.0 - i as f64);
        let (_, u_a) = interpolate(&x0, &x1, 0.1).unwrap();
        let (_, u_b) = interpolate(&x0, &x1, 0.9).unwrap();
        assert!(u_a.bit_eq(&u_b));
    }

    #[test]
    fn cfm_loss_cases() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::from_fn(&[5, 2], |i| (i as f64).cos()));
        assert_eq!(cfm_loss(u, u).unwrap().value().item(), 0.0);
        let shifted = tape.constant(Tensor::from_fn(&[5, 2], |i| (i as f64).cos() + 0.5));
        let l = cfm_loss(shifted, u).unwrap().value().item();
        assert!((l - 0.25).abs() < 1e-12);
        let bad = tape.constant(Tensor::zeros(&[10]));
        assert!(cfm_loss(bad, u).is_err());
    }

    #[test]
    fn tau_mapping() {
        assert_eq!(tau_of_t(0.0), 1000.0);
        assert_eq!(tau_of_t(1.0), 0.0);
        assert!((tau_of_t(0.3) - 700.0).abs() < 1e-9);
    }

    #[test]
    fn sampler_config_validation() {
        let mut cfg = SamplerConfig::default();
        assert_eq!((cfg.steps, cfg.cfg_scale), (40, 5.0));
        cfg.validate().unwrap();
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.steps = 4;
        cfg.cfg_scale = 0.5;
        assert!(cfg.validate().is_err());
    }

    struct Constant {
        c: f64,
        groups: usize,
        calls: Cell<usize>,
    }

    impl VelocityField<f64> for Constant {
        type Cond = f64;
        fn groups(&self) -> usize {
            self.groups
        }
        fn velocity(&self, _g: usize, x: &Tensor<f64>, _tau: f64, bias: &f64) -> Result<Tensor<f64>> {
            self.calls.set(self.calls.get() + 1);
            Ok(Tensor::full(x.shape(), self.c + bias))
        }
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let field = Constant {
            c: 0.75,
            groups: 4,
            calls: Cell::new(0),
        };
        let sched = TimestepSchedule::build(8, 4, 1000, 100).unwrap();
        let cfg = SamplerConfig {
            steps: 8,
            cfg_scale: 1.0,
            seed: 3,
        };
        let x0 = initial_noise::<f64>(&[6], 3).unwrap();
        let out = sample_from(&field, &0.0, &0.0, &sched, &cfg, x0.clone()).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - (b + 0.75)).abs() < 1e-12);
        }
        assert_eq!(field.calls.get(), 8);
    }

    #[test]
    fn guidance_extrapolates_between_branches() {
        let field = Constant {
            c: 0.0,
            groups: 1,
            calls: Cell::new(0),
        };
        let sched = TimestepSchedule::build(2, 1, 1000, 0).unwrap();
        let cfg = SamplerConfig {
            steps: 4,
            cfg_scale: 3.0,
            seed: 0,
        };
        let x0 = Tensor::<f64>::zeros(&[1]);
        // v_u = 1, v_c = 2 -> v = 1 + 3 = 4
        let out = sample_from(&field, &2.0, &1.0, &sched, &cfg, x0).unwrap();
        assert!((out.item() - 4.0).abs() < 1e-12);
        assert_eq!(field.calls.get(), 8);
    }

    #[test]
    fn group_count_mismatch_is_config_error() {
        let field = Constant {
            c: 0.0,
            groups: 2,
            calls: Cell::new(0),
        };
        let sched = TimestepSchedule::build(8, 4, 1000, 100).unwrap();
        let r = sample(&field, &0.0, &0.0, &sched, &SamplerConfig::default(), &[1]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
