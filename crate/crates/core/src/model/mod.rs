//! The full network: a context pathway that turns class labels into
//! per-layer context states `m^l`, and `L` generative layers split into `K`
//! expert groups. Each group owns an input projection and a velocity head;
//! the timestep MLP is shared.
//!
//! A generative layer is pre-norm: split attention (image self-attention
//! with residual maps plus cross-attention to `m^l`), then a GELU MLP. The
//! timestep embedding `h_t` is added to the projected tokens at group entry
//! and feeds the gates.

mod checkpoint;
mod config;
mod params;
mod verify;

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerState, ParamMoments, CKPT_VERSION};
pub use config::{ModelConfig, Variant};
pub(crate) use params::Binder;
pub use params::{Param, ParamStore, Role};
pub use verify::{check_config, loss_grad_check, ParamCheck};

use crate::attention::{
    latte_attention_forward, rope_1d, rope_2d, AttentionInput, AttentionLayout, AttentionParams,
    ResidualAttentionState, RotaryTable,
};
use crate::error::{Error, Result};
use crate::flowmatch::VelocityField;
use crate::rng::Rng;
use crate::schedule::TimestepSchedule;
use crate::tensor::{Real, Tape, Tensor, Var};
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ctx: AttnIds,
    ctx_ffn: [usize; 2],
    gen: AttnIds,
    gen_ffn: [usize; 2],
    gate: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct GroupIds {
    in_w: usize,
    in_b: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy, Debug)]
struct TimeIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Per-layer context states for a list of conditioning entries (`None` is
/// the null context). `states[l]` is `[entries·N_c, d]`, the input of
/// context layer `l`.
#[derive(Clone, Debug)]
pub struct ConditioningCache<T> {
    pub entries: Vec<Option<usize>>,
    pub states: Vec<Tensor<T>>,
}

/// A cache plus the entry each batch element uses.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub cache: ConditioningCache<T>,
    pub index: Vec<usize>,
}

/// What one generative layer did during a traced forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub layer: usize,
    /// True when no residual map was available to this layer.
    pub prev_empty: bool,
    /// Un-augmented self-attention map `[B·H, N, N]`.
    pub map: Tensor<T>,
    pub augmented: Option<Tensor<T>>,
    /// `[B, H]`.
    pub gate: Option<Tensor<T>>,
}

pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    schedule: TimestepSchedule,
    store: ParamStore<T>,
    layers: Vec<LayerIds>,
    groups: Vec<GroupIds>,
    time: TimeIds,
    embed: usize,
    null: usize,
    executions: AtomicU64,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            store: self.store.clone(),
            layers: self.layers.clone(),
            groups: self.groups.clone(),
            time: self.time,
            embed: self.embed,
            null: self.null,
            executions: AtomicU64::new(self.layer_executions()),
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("cfg", &self.cfg)
            .field("params", &self.store.numel())
            .finish()
    }
}

struct Plan {
    layers: Range<usize>,
    adapter: usize,
}

impl<T: Real> Model<T> {
    /// Builds a model with truncated-normal weights, zero biases and zero
    /// gates.
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let (d, f, h) = (cfg.hidden, cfg.ffn_dim(), cfg.heads);
        let std = cfg.init_std;
        let mut store = ParamStore::new();
        let mut init = |shape: &[usize]| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| rng.truncated_normal(std)).collect();
            Tensor::from_f64(shape, &vals).expect("shape matches")
        };
        let blend = cfg.variant == Variant::Blend;
        let nc_d = cfg.context_tokens * d;

        let embed = store.push(
            "context.embed".into(),
            init(&[cfg.num_classes, nc_d]),
            blend,
            Role::Context,
        );
        let null = store.push("context.null".into(), init(&[1, nc_d]), true, Role::Null);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ctx_vals = [init(&[d, d]), init(&[d, d]), init(&[d, d]), init(&[d, d])];
            let twin = ctx_vals.clone();
            let ctx = push_attn(&mut store, &format!("context.{l}"), ctx_vals, blend, Role::Context);
            let w1 = init(&[d, f]);
            let w2 = init(&[f, d]);
            let (ctx_ffn, gen, gen_ffn) = if blend {
                let ffn = [
                    store.push(format!("shared.{l}.ffn1"), w1, true, Role::Layer(l)),
                    store.push(format!("shared.{l}.ffn2"), w2, true, Role::Layer(l)),
                ];
                let gen = push_attn(&mut store, &format!("layer.{l}"), twin, true, Role::Layer(l));
                (ffn, gen, ffn)
            } else {
                let ctx_ffn = [
                    store.push(format!("context.{l}.ffn1"), w1.clone(), false, Role::Context),
                    store.push(format!("context.{l}.ffn2"), w2.clone(), false, Role::Context),
                ];
                let gen = push_attn(&mut store, &format!("layer.{l}"), twin, true, Role::Layer(l));
                let gen_ffn = [
                    store.push(format!("layer.{l}.ffn1"), w1, true, Role::Layer(l)),
                    store.push(format!("layer.{l}.ffn2"), w2, true, Role::Layer(l)),
                ];
                (ctx_ffn, gen, gen_ffn)
            };
            let gate = (cfg.residual_attention && !schedule.is_group_start(l))
                .then(|| store.push(format!("layer.{l}.gate"), Tensor::zeros(&[d, h]), true, Role::Layer(l)));
            layers.push(LayerIds {
                ctx,
                ctx_ffn,
                gen,
                gen_ffn,
                gate,
            });
        }

        let time = TimeIds {
            w1: store.push("time.w1".into(), init(&[cfg.time_freq_dim, d]), true, Role::Time),
            b1: store.push("time.b1".into(), Tensor::zeros(&[d]), true, Role::Time),
            w2: store.push("time.w2".into(), init(&[d, d]), true, Role::Time),
            b2: store.push("time.b2".into(), Tensor::zeros(&[d]), true, Role::Time),
        };
        let groups = (0..cfg.groups)
            .map(|k| GroupIds {
                in_w: store.push(
                    format!("group.{k}.in_w"),
                    init(&[cfg.latent_dim, d]),
                    true,
                    Role::Adapter(k),
                ),
                in_b: store.push(format!("group.{k}.in_b"), Tensor::zeros(&[d]), true, Role::Adapter(k)),
                head_w: store.push(
                    format!("group.{k}.head_w"),
                    init(&[d, cfg.latent_dim]),
                    true,
                    Role::Adapter(k),
                ),
                head_b: store.push(
                    format!("group.{k}.head_b"),
                    Tensor::zeros(&[cfg.latent_dim]),
                    true,
                    Role::Adapter(k),
                ),
            })
            .collect();

        Ok(Self {
            cfg: cfg.clone(),
            schedule,
            store,
            layers,
            groups,
            time,
            embed,
            null,
            executions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.push(p.name.clone(), p.value.cast(), p.trainable, p.role);
        }
        Model {
            cfg: self.cfg.clone(),
            schedule: self.schedule.clone(),
            store,
            layers: self.layers.clone(),
            groups: self.groups.clone(),
            time: self.time,
            embed: self.embed,
            null: self.null,
            executions: AtomicU64::new(0),
        }
    }

    /// Generative layers executed since construction or the last reset.
    pub fn layer_executions(&self) -> u64 {
        self.executions.load(Ordering::Relaxed)
    }

    pub fn reset_layer_executions(&self) {
        self.executions.store(0, Ordering::Relaxed);
    }

    fn check_entries(&self, entries: &[Option<usize>]) -> Result<()> {
        if entries.is_empty() {
            return Err(Error::Input("no conditioning entries".into()));
        }
        if let Some(bad) = entries.iter().flatten().find(|&&c| c >= self.cfg.num_classes) {
            return Err(Error::Input(format!(
                "label {bad} outside vocabulary of {} classes",
                self.cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Runs the context pathway once for each entry.
    pub fn context_forward(&self, entries: &[Option<usize>]) -> Result<ConditioningCache<T>> {
        self.check_entries(entries)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let states = self
            .context_states(&b, entries)?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect();
        Ok(ConditioningCache {
            entries: entries.to_vec(),
            states,
        })
    }

    /// Deduplicates `labels` into a cache and a per-sample index.
    pub fn condition(&self, labels: &[Option<usize>]) -> Result<Conditioning<T>> {
        let (entries, index) = dedup_labels(labels);
        Ok(Conditioning {
            cache: self.context_forward(&entries)?,
            index,
        })
    }

    /// `n` samples of one class (or the null context).
    pub fn condition_uniform(&self, label: Option<usize>, n: usize) -> Result<Conditioning<T>> {
        Ok(Conditioning {
            cache: self.context_forward(&[label])?,
            index: vec![0; n],
        })
    }

    fn context_states<'t>(&self, b: &Binder<'t, '_, T>, entries: &[Option<usize>]) -> Result<Vec<Var<'t, T>>> {
        let (d, nc) = (self.cfg.hidden, self.cfg.context_tokens);
        let mut parts = Vec::with_capacity(entries.len());
        for e in entries {
            parts.push(match *e {
                Some(c) => b.get(self.embed).index_select(&[c])?,
                None => b.get(self.null),
            });
        }
        let u = entries.len();
        let mut m = b.tape.concat(&parts)?.reshape(&[u * nc, d])?;
        let positions: Vec<usize> = (0..nc).collect();
        let rope = rope_1d::<T>(&positions, self.cfg.head_dim())?;
        let mut states = Vec::with_capacity(self.cfg.layers);
        for (l, ids) in self.layers.iter().enumerate() {
            states.push(m);
            if l + 1 == self.cfg.layers {
                break;
            }
            let a = self.context_attention(b, ids.ctx, m.rms_norm(), u, &rope)?;
            m = m.add(a)?;
            m = m.add(self.ffn(b, ids.ctx_ffn, m.rms_norm())?)?;
        }
        Ok(states)
    }

    fn context_attention<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        ids: AttnIds,
        x: Var<'t, T>,
        rows: usize,
        rope: &RotaryTable<T>,
    ) -> Result<Var<'t, T>> {
        let (d, h, n) = (self.cfg.hidden, self.cfg.heads, self.cfg.context_tokens);
        let dh = d / h;
        let heads =
            |w: usize| -> Result<Var<'t, T>> { x.matmul(b.get(w))?.reshape(&[rows, n, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = heads(ids.wq)?
            .rotate_pairs(&rope.cos, &rope.sin)?
            .reshape(&[rows * h, n, dh])?;
        let k = heads(ids.wk)?
            .rotate_pairs(&rope.cos, &rope.sin)?
            .reshape(&[rows * h, n, dh])?;
        let v = heads(ids.wv)?.reshape(&[rows * h, n, dh])?;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let a = q.bmm(k, true)?.scale(scale).softmax()?;
        a.bmm(v, false)?
            .reshape(&[rows, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[rows * n, d])?
            .matmul(b.get(ids.wo))
    }

    fn ffn<'t>(&self, b: &Binder<'t, '_, T>, ids: [usize; 2], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(b.get(ids[0]))?.gelu().matmul(b.get(ids[1]))
    }

    /// `h_t` for each timestep: sinusoidal features, then Linear-SiLU-Linear.
    fn time_embed<'t>(&self, b: &Binder<'t, '_, T>, taus: &[f64]) -> Result<Var<'t, T>> {
        let feats = b.tape.constant(sinusoidal(taus, self.cfg.time_freq_dim)?);
        let t = self.time;
        feats
            .matmul(b.get(t.w1))?
            .add(b.get(t.b1))?
            .silu()
            .matmul(b.get(t.w2))?
            .add(b.get(t.b2))
    }

    fn run_layers<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        plan: Plan,
        x: &Tensor<T>,
        taus: &[f64],
        context: &[Var<'t, T>],
        index: &[usize],
        traces: Option<&mut Vec<LayerTrace<T>>>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.cfg;
        let (n, d, lat) = (cfg.tokens(), cfg.hidden, cfg.latent_dim);
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != n || xs[2] != lat {
            return Err(Error::dim(
                "expert_forward",
                xs,
                &[xs.first().copied().unwrap_or(0), n, lat],
            ));
        }
        let batch = xs[0];
        if taus.len() != batch || index.len() != batch {
            return Err(Error::dim("expert_forward", &[batch], &[taus.len(), index.len()]));
        }
        if taus.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("timestep"));
        }
        let dh = cfg.head_dim();
        let image_rope = rope_2d::<T>(cfg.grid_h, cfg.grid_w, dh)?;
        let positions: Vec<usize> = (0..cfg.context_tokens).collect();
        let context_rope = rope_1d::<T>(&positions, dh)?;
        let query_rope = rope_1d::<T>(&vec![cfg.context_tokens; n], dh)?;
        let layout = AttentionLayout {
            batch,
            tokens: n,
            heads: cfg.heads,
            context_tokens: cfg.context_tokens,
            image_rope: &image_rope,
            context_rope: &context_rope,
            query_context_rope: &query_rope,
            residual: cfg.residual_attention,
        };

        let g = self.groups[plan.adapter];
        let h_t = self.time_embed(b, taus)?;
        let repeat: Vec<usize> = (0..batch).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let mut hs = b
            .tape
            .constant(x.reshape(&[batch * n, lat])?)
            .matmul(b.get(g.in_w))?
            .add(b.get(g.in_b))?
            .add(h_t.index_select(&repeat)?)?;

        let mut prev = ResidualAttentionState::empty();
        let mut traces = traces;
        let count = plan.layers.len() as u64;
        for l in plan.layers {
            let ids = self.layers[l];
            let gate = match ids.gate {
                Some(gid) => b.get(gid),
                None => {
                    prev = ResidualAttentionState::empty();
                    b.tape.constant(Tensor::zeros(&[d, cfg.heads]))
                }
            };
            let params = AttentionParams {
                wq: b.get(ids.gen.wq),
                wk: b.get(ids.gen.wk),
                wv: b.get(ids.gen.wv),
                wo: b.get(ids.gen.wo),
                gate,
            };
            let prev_empty = prev.is_empty();
            let out = latte_attention_forward(
                AttentionInput {
                    x: hs.rms_norm(),
                    context: context[l],
                    context_index: index,
                    h_t,
                    prev,
                },
                params,
                &layout,
            )?;
            hs = hs.add(out.out)?;
            hs = hs.add(self.ffn(b, ids.gen_ffn, hs.rms_norm())?)?;
            if let Some(t) = traces.as_deref_mut() {
                t.push(LayerTrace {
                    layer: l,
                    prev_empty,
                    map: (*out.map.value()).clone(),
                    augmented: out.augmented.map(|a| (*a.value()).clone()),
                    gate: out.gate.map(|a| (*a.value()).clone()),
                });
            }
            prev = if cfg.residual_attention {
                ResidualAttentionState::from_map(out.map)
            } else {
                ResidualAttentionState::empty()
            };
        }
        self.executions.fetch_add(count, Ordering::Relaxed);

        hs.rms_norm()
            .matmul(b.get(g.head_w))?
            .add(b.get(g.head_b))?
            .reshape(&[batch, n, lat])
    }

    fn check_group(&self, k: usize) -> Result<()> {
        if k >= self.cfg.groups {
            return Err(Error::Contract(format!(
                "group {k} out of range for {} groups",
                self.cfg.groups
            )));
        }
        Ok(())
    }

    fn cached_context<'t>(&self, tape: &'t Tape<T>, cond: &Conditioning<T>) -> Result<Vec<Var<'t, T>>> {
        if cond.cache.states.len() != self.cfg.layers {
            return Err(Error::Input(format!(
                "cache has {} layers, model has {}",
                cond.cache.states.len(),
                self.cfg.layers
            )));
        }
        if let Some(&bad) = cond.index.iter().find(|&&i| i >= cond.cache.entries.len()) {
            return Err(Error::Input(format!("conditioning index {bad} out of range")));
        }
        Ok(cond.cache.states.iter().map(|s| tape.constant(s.clone())).collect())
    }

    fn forward_plain(
        &self,
        layers: Range<usize>,
        adapter: usize,
        x: &Tensor<T>,
        taus: &[f64],
        cond: &Conditioning<T>,
        traces: Option<&mut Vec<LayerTrace<T>>>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let ctx = self.cached_context(&tape, cond)?;
        let plan = Plan { layers, adapter };
        let v = self.run_layers(&b, plan, x, taus, &ctx, &cond.index, traces)?;
        let out = (*v.value()).clone();
        Ok(out)
    }

    /// Velocity from expert group `k` for `x: [B, N, latent]` at per-sample
    /// timesteps `taus`.
    pub fn expert_forward(&self, k: usize, x: &Tensor<T>, taus: &[f64], cond: &Conditioning<T>) -> Result<Tensor<T>> {
        self.check_group(k)?;
        self.forward_plain(self.schedule.layers_of(k), k, x, taus, cond, None)
    }

    /// [`Model::expert_forward`] that also records every layer's maps and
    /// gates.
    pub fn expert_trace(
        &self,
        k: usize,
        x: &Tensor<T>,
        taus: &[f64],
        cond: &Conditioning<T>,
    ) -> Result<(Tensor<T>, Vec<LayerTrace<T>>)> {
        self.check_group(k)?;
        let mut traces = Vec::new();
        let v = self.forward_plain(self.schedule.layers_of(k), k, x, taus, cond, Some(&mut traces))?;
        Ok((v, traces))
    }

    /// Every layer in order with group 0's adapters. For a one-group model
    /// this is the whole network.
    pub fn full_forward(&self, x: &Tensor<T>, taus: &[f64], cond: &Conditioning<T>) -> Result<Tensor<T>> {
        self.forward_plain(0..self.cfg.layers, 0, x, taus, cond, None)
    }

    /// Flow-matching loss of group `k` on one batch and the gradient of
    /// every trainable parameter it reached. The context pathway runs on
    /// the tape, so trainable context parameters receive gradients too.
    pub fn loss_and_grads(
        &self,
        k: usize,
        x_t: &Tensor<T>,
        u: &Tensor<T>,
        taus: &[f64],
        labels: &[Option<usize>],
    ) -> Result<(f64, Vec<(usize, Tensor<T>)>)> {
        self.check_group(k)?;
        let (entries, index) = dedup_labels(labels);
        self.check_entries(&entries)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, true);
        let ctx = self.context_states(&b, &entries)?;
        let plan = Plan {
            layers: self.schedule.layers_of(k),
            adapter: k,
        };
        let v = self.run_layers(&b, plan, x_t, taus, &ctx, &index, None)?;
        let loss = v.mse(tape.constant(u.clone()))?;
        let loss_value = loss.value().item().as_f64();
        let mut grads = tape.backward(loss)?;
        let out = b
            .bound()
            .into_iter()
            .filter(|(id, _)| self.store.get(*id).trainable)
            .filter_map(|(id, var)| grads.take(var).map(|g| (id, g)))
            .collect();
        Ok((loss_value, out))
    }

    /// Only the loss, without a backward pass.
    pub fn loss(
        &self,
        k: usize,
        x_t: &Tensor<T>,
        u: &Tensor<T>,
        taus: &[f64],
        labels: &[Option<usize>],
    ) -> Result<f64> {
        self.check_group(k)?;
        let cond = self.condition(labels)?;
        let v = self.expert_forward(k, x_t, taus, &cond)?;
        let tape = Tape::new();
        let l = tape.constant(v).mse(tape.constant(u.clone()))?;
        let value = l.value().item().as_f64();
        Ok(value)
    }

    /// Parameter ids read by one sampling step of group `k` (the context
    /// pathway is cached and not counted).
    pub fn activated_param_ids(&self, k: usize) -> Result<Vec<usize>> {
        self.check_group(k)?;
        let cond = self.condition_uniform(None, 1)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let ctx = self.cached_context(&tape, &cond)?;
        let iv = self.schedule.infer_intervals[k];
        let x = Tensor::zeros(&[1, self.cfg.tokens(), self.cfg.latent_dim]);
        let plan = Plan {
            layers: self.schedule.layers_of(k),
            adapter: k,
        };
        let before = self.layer_executions();
        self.run_layers(&b, plan, &x, &[(iv.hi + iv.lo) / 2.0], &ctx, &cond.index, None)?;
        self.executions.store(before, Ordering::Relaxed);
        Ok(b.touched())
    }

    /// Scalar parameters read per sampling step by group `k`.
    pub fn activated_params_per_step(&self, k: usize) -> Result<usize> {
        Ok(self
            .activated_param_ids(k)?
            .into_iter()
            .map(|id| self.store.get(id).value.len())
            .sum())
    }

    /// `(name, shape, trainable, role)` for every parameter.
    pub fn census(&self) -> Vec<(String, Vec<usize>, bool, Role)> {
        self.store
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.trainable, p.role))
            .collect()
    }

    /// Gate values `[1, H]` of layer `l` at timestep `tau`, or `None` when the
    /// layer has no residual slot.
    pub fn gate_at(&self, l: usize, tau: f64) -> Result<Option<Tensor<T>>> {
        let Some(gid) = self.layers.get(l).and_then(|ids| ids.gate) else {
            return Ok(None);
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store, false);
        let h_t = self.time_embed(&b, &[tau])?;
        let g = crate::attention::gate(h_t, b.get(gid))?;
        let out = (*g.value()).clone();
        Ok(Some(out))
    }

    /// Whether layer `l` owns a residual gate.
    pub fn has_gate(&self, l: usize) -> bool {
        self.layers.get(l).is_some_and(|ids| ids.gate.is_some())
    }

    /// Overwrites the generative weights of every layer in each group with
    /// those of the group's first layer.
    pub fn tie_group_layers(&mut self) {
        for k in 0..self.cfg.groups {
            let range = self.schedule.layers_of(k);
            let first = self.layers[range.start];
            for l in range.skip(1) {
                let ids = self.layers[l];
                let pairs = [
                    (first.gen.wq, ids.gen.wq),
                    (first.gen.wk, ids.gen.wk),
                    (first.gen.wv, ids.gen.wv),
                    (first.gen.wo, ids.gen.wo),
                    (first.gen_ffn[0], ids.gen_ffn[0]),
                    (first.gen_ffn[1], ids.gen_ffn[1]),
                ];
                for (src, dst) in pairs {
                    if src != dst {
                        let v = self.store.get(src).value.clone();
                        *self.store.value_mut(dst) = v;
                    }
                }
            }
        }
    }
}

fn push_attn<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    [q, k, v, o]: [Tensor<T>; 4],
    trainable: bool,
    role: Role,
) -> AttnIds {
    AttnIds {
        wq: store.push(format!("{prefix}.wq"), q, trainable, role),
        wk: store.push(format!("{prefix}.wk"), k, trainable, role),
        wv: store.push(format!("{prefix}.wv"), v, trainable, role),
        wo: store.push(format!("{prefix}.wo"), o, trainable, role),
    }
}

/// Sinusoidal features `[cos(τ f_j), sin(τ f_j)]` with
/// `f_j = 10000^(−j/(F/2))`, shape `[B, F]`.
pub fn sinusoidal<T: Real>(taus: &[f64], dim: usize) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(taus.len() * dim);
    for &tau in taus {
        let freq = |j: usize| (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        out.extend((0..half).map(|j| (tau * freq(j)).cos()));
        out.extend((0..half).map(|j| (tau * freq(j)).sin()));
    }
    Tensor::from_f64(&[taus.len(), dim], &out)
}

/// Distinct entries (classes ascending, null last) and each label's slot.
fn dedup_labels(labels: &[Option<usize>]) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut entries: Vec<Option<usize>> = labels.to_vec();
    entries.sort_by_key(|e| e.map_or(usize::MAX, |c| c));
    entries.dedup();
    let index = labels
        .iter()
        .map(|l| entries.iter().position(|e| e == l).expect("present"))
        .collect();
    (entries, index)
}

impl<T: Real> VelocityField<T> for Model<T> {
    type Cond = Conditioning<T>;

    fn groups(&self) -> usize {
        self.cfg.groups
    }

    fn velocity(&self, group: usize, x: &Tensor<T>, tau: f64, cond: &Self::Cond) -> Result<Tensor<T>> {
        let taus = vec![tau; x.shape().first().copied().unwrap_or(0)];
        self.expert_forward(group, x, &taus, cond)
    }
}

/// A velocity field that reruns the context pathway on every call instead
/// of reading a cache.
pub struct Uncached<'m, T: Real>(pub &'m Model<T>);

impl<T: Real> VelocityField<T> for Uncached<'_, T> {
    type Cond = Vec<Option<usize>>;

    fn groups(&self) -> usize {
        self.0.cfg.groups
    }

    fn velocity(&self, group: usize, x: &Tensor<T>, tau: f64, labels: &Self::Cond) -> Result<Tensor<T>> {
        let cond = self.0.condition(labels)?;
        self.0.velocity(group, x, tau, &cond)
    }
}
