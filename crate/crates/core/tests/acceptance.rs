//! End-to-end acceptance checks, one line per criterion.
//!
//! `LATTE_ACCEPT_STEPS` shortens the learning check for development runs;
//! a shortened run is reported as such and never counts as a pass. Failures
//! are reported but only fail the process when `LATTE_ACCEPT_STRICT` is set.

use latte::data::{generate as gen_split, Dataset, DatasetSpec, Normalizer, Split};
use latte::eval::{analyze_gates, analyze_similarity, bench, class_purity, evaluate, generate};
use latte::flowmatch::{initial_noise, sample, tau_of_t, SamplerConfig};
use latte::model::{check_config, loss_grad_check, Checkpoint, CheckpointMeta, Model, ModelConfig, Uncached, Variant};
use latte::rng::Rng;
use latte::schedule::TimestepSchedule;
use latte::tensor::{op_suite, Tensor};
use latte::train::{TrainConfig, Trainer};
use latte::{Error, Real};
use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: latte::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn probe<T: Real>(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<T> {
    let n = b * cfg.tokens() * cfg.latent_dim;
    Tensor::from_f64(&[b, cfg.tokens(), cfg.latent_dim], &Rng::new(seed).normals(n)).unwrap()
}

fn small(groups: usize) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 2,
        ffn_mult: 2,
        time_freq_dim: 16,
        grid_h: 2,
        grid_w: 2,
        latent_dim: 3,
        groups,
        ..ModelConfig::default()
    }
}

fn gradients() -> Outcome {
    let mut worst_op = 0.0f64;
    let mut worst_loss = 0.0f64;
    for seed in 0..10 {
        for (name, err) in lift(op_suite(seed))? {
            ensure(err <= 1e-4, || format!("op {name} seed {seed}: {err:.2e}"))?;
            worst_op = worst_op.max(err);
        }
        for variant in [Variant::Couple, Variant::Blend] {
            let cfg = ModelConfig {
                variant,
                ..check_config()
            };
            for k in 0..cfg.groups {
                for c in lift(loss_grad_check(&cfg, k, 0.4, 6, 1e-6, seed))? {
                    ensure(c.worst <= 1e-4, || {
                        format!("{variant:?} group {k} seed {seed} {}: {:.2e}", c.name, c.worst)
                    })?;
                    worst_loss = worst_loss.max(c.worst);
                }
            }
        }
    }
    Ok(format!(
        "worst op {worst_op:.1e}, worst loss parameter {worst_loss:.1e}"
    ))
}

fn schedule() -> Outcome {
    let s = lift(TimestepSchedule::build(28, 4, 1000, 100))?;
    let strict = [(1000.0, 750.25), (750.25, 500.5), (500.5, 250.75), (250.75, 0.0)];
    let train = [(1000.0, 700.0), (700.0, 450.0), (450.0, 200.0), (200.0, 0.0)];
    for (k, ((iv, tv), (si, ti))) in s
        .infer_intervals
        .iter()
        .zip(&s.train_intervals)
        .zip(strict.iter().zip(&train))
        .enumerate()
    {
        ensure((iv.hi, iv.lo) == *si, || format!("strict interval {k}: {iv:?}"))?;
        ensure((tv.hi, tv.lo) == *ti, || format!("training interval {k}: {tv:?}"))?;
    }
    let probes = [(1000.0, 0), (750.25, 0), (500.5, 1), (250.75, 2), (0.0, 3)];
    for (tau, want) in probes {
        let got = lift(s.route(tau))?;
        ensure(got == want, || format!("route({tau}) = {got}, want {want}"))?;
    }
    ensure(s.route(1000.5).is_err() && s.route(-0.5).is_err(), || {
        "out-of-range tau accepted".into()
    })?;
    Ok("intervals exact, probes route to groups 0,0,1,2,3".into())
}

fn complexity() -> Outcome {
    let steps = 40;
    let full = |groups| ModelConfig {
        layers: 28,
        groups,
        hidden: 16,
        heads: 2,
        ffn_mult: 1,
        time_freq_dim: 8,
        ..ModelConfig::default()
    };
    let mut counts = Vec::new();
    for groups in [4, 1] {
        let m = lift(Model::<f32>::build(&full(groups), &mut Rng::new(0)))?;
        let sampler = SamplerConfig {
            steps,
            cfg_scale: 1.0,
            seed: 0,
        };
        lift(generate(&m, &[Some(0)], &sampler))?;
        counts.push(m.layer_executions());
    }
    ensure(counts == [280, 1120], || {
        format!("layer executions per branch {counts:?}")
    })?;

    let expert = lift(Model::<f32>::build(&ModelConfig::default(), &mut Rng::new(0)))?;
    let vanilla = lift(Model::<f32>::build(&ModelConfig::default().vanilla(), &mut Rng::new(0)))?;
    let r = lift(bench(&expert, &vanilla, &SamplerConfig::default(), 20, 3))?;
    ensure(r.execution_ratio == 4.0, || {
        format!("execution ratio {}", r.execution_ratio)
    })?;
    ensure(r.speedup >= 2.0, || format!("speedup {:.2}", r.speedup))?;
    Ok(format!(
        "280 vs 1120 executions per branch; speedup {:.2}x ({:.2} ms vs {:.2} ms)",
        r.speedup, r.expert_ms, r.vanilla_ms
    ))
}

fn cache() -> Outcome {
    let mut worst = 0.0f64;
    for variant in [Variant::Couple, Variant::Blend] {
        let cfg = ModelConfig { variant, ..small(4) };
        let m = lift(Model::<f32>::build(&cfg, &mut Rng::new(3)))?;
        let labels = vec![Some(0), Some(5), None, Some(5)];
        let sampler = SamplerConfig {
            steps: 20,
            cfg_scale: 3.0,
            seed: 7,
        };
        let shape = [labels.len(), cfg.tokens(), cfg.latent_dim];
        let cond = lift(m.condition(&labels))?;
        let uncond = lift(m.condition_uniform(None, labels.len()))?;
        let a = lift(sample(&m, &cond, &uncond, m.schedule(), &sampler, &shape))?;
        let field = Uncached(&m);
        let b = lift(sample(
            &field,
            &labels,
            &vec![None; labels.len()],
            m.schedule(),
            &sampler,
            &shape,
        ))?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst <= 1e-6, || format!("max difference {worst:.2e}"))?;
    Ok(format!("max elementwise difference {worst:.1e}"))
}

fn residual() -> Outcome {
    let cfg = small(2);
    let off = ModelConfig {
        residual_attention: false,
        ..cfg.clone()
    };
    let a = lift(Model::<f32>::build(&cfg, &mut Rng::new(9)))?;
    let b = lift(Model::<f32>::build(&off, &mut Rng::new(9)))?;
    let x: Tensor<f32> = probe(&cfg, 3, 1);
    let labels = [Some(0), None, Some(3)];
    let (ca, cb) = (lift(a.condition(&labels))?, lift(b.condition(&labels))?);
    for k in 0..cfg.groups {
        let iv = a.schedule().infer_intervals[k];
        let taus = [iv.hi, (iv.hi + iv.lo) / 2.0, iv.lo];
        let va = lift(a.expert_forward(k, &x, &taus, &ca))?;
        let vb = lift(b.expert_forward(k, &x, &taus, &cb))?;
        ensure(va.bit_eq(&vb), || format!("zero-gate output differs in group {k}"))?;
    }

    // Gate weights large enough that the residual term is far from zero
    // given the small time embedding of a fresh model.
    let mut m = a.clone();
    let mut rng = Rng::new(4);
    let gate_ids: Vec<usize> = (0..m.params().len())
        .filter(|&i| m.params().get(i).name.ends_with(".gate"))
        .collect();
    for &id in &gate_ids {
        for v in m.params_mut().value_mut(id).data_mut() {
            *v = (25.0 * rng.normal()) as f32;
        }
    }
    let cond = lift(m.condition(&labels))?;
    let (n, h) = (cfg.tokens(), cfg.heads);
    let mut worst_row = 0.0f64;
    let mut max_gate = 0.0f64;
    for k in 0..cfg.groups {
        let iv = m.schedule().infer_intervals[k];
        let taus = [iv.hi, (iv.hi + iv.lo) / 2.0, iv.lo];
        let (_, trace) = lift(m.expert_trace(k, &x, &taus, &cond))?;
        for (i, t) in trace.iter().enumerate() {
            ensure(t.prev_empty == (i == 0), || {
                format!("layer {}: residual slot state wrong", t.layer)
            })?;
            ensure(t.gate.is_some() == (i != 0), || {
                format!("layer {}: gate presence wrong", t.layer)
            })?;
            let (Some(aug), Some(g)) = (&t.augmented, &t.gate) else {
                continue;
            };
            let (aug, g) = (aug.to_f64_vec(), g.to_f64_vec());
            for bh in 0..labels.len() * h {
                for row in aug[bh * n * n..(bh + 1) * n * n].chunks(n) {
                    let sum: f64 = row.iter().sum();
                    worst_row = worst_row.max((sum - (1.0 + g[bh])).abs());
                }
            }
            for &gv in &g {
                ensure(gv.abs() < 1.0, || format!("gate {gv} outside (-1, 1)"))?;
                max_gate = max_gate.max(gv.abs());
            }
        }
    }
    for row in lift(analyze_gates(&m))? {
        if let Some(g) = row.gate {
            ensure(g.abs() < 1.0, || format!("gate {g} outside (-1, 1)"))?;
            max_gate = max_gate.max(g.abs());
        }
    }
    ensure(worst_row <= 1e-4, || format!("row sum error {worst_row:.2e}"))?;
    ensure(max_gate > 0.1, || format!("gates too small to test: {max_gate}"))?;
    Ok(format!(
        "zero gates bitwise; row sum error {worst_row:.1e}; max |g| {max_gate:.3}; empty at group starts"
    ))
}

struct Trained {
    expert: Model<f32>,
    steps: u64,
    full: bool,
}

fn train_one(cfg: &ModelConfig, tc: &TrainConfig, spec: &DatasetSpec) -> latte::Result<Model<f32>> {
    let m = Model::<f32>::build(cfg, &mut Rng::new(0))?;
    let mut t = Trainer::new(m, tc.clone(), spec.clone())?;
    t.run(|_, _| Ok(()))?;
    Ok(t.model)
}

fn w2_of(m: &Model<f32>, norm: &Normalizer, real: &Dataset) -> latte::Result<f64> {
    let sampler = SamplerConfig {
        steps: 40,
        cfg_scale: 1.0,
        seed: 1,
    };
    Ok(evaluate(m, norm, real, None, &sampler, real.len(), 0)?.sliced_w2)
}

fn learning(trained: &mut Option<Trained>) -> Outcome {
    let full_steps = 20_000;
    let steps = std::env::var("LATTE_ACCEPT_STEPS")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or(full_steps);
    let spec = DatasetSpec::default();
    let tc = TrainConfig {
        steps,
        batch: 256,
        log_every: 0,
        ..TrainConfig::default()
    };
    let expert_cfg = ModelConfig::default();
    let vanilla_cfg = expert_cfg.vanilla();
    let start = Instant::now();
    let (expert, vanilla) = std::thread::scope(|s| {
        let e = s.spawn(|| train_one(&expert_cfg, &tc, &spec));
        let v = s.spawn(|| train_one(&vanilla_cfg, &tc, &spec));
        (
            e.join().expect("expert training thread"),
            v.join().expect("vanilla training thread"),
        )
    });
    let (expert, vanilla) = (lift(expert)?, lift(vanilla)?);
    let train_secs = start.elapsed().as_secs_f64();

    let real = lift(gen_split(&spec, Split::Eval))?;
    let norm = lift(Normalizer::for_spec(&spec))?;
    let w_e = lift(w2_of(&expert, &norm, &real))?;
    let w_v = lift(w2_of(&vanilla, &norm, &real))?;
    let w_e0 = lift(w2_of(&lift(Model::build(&expert_cfg, &mut Rng::new(0)))?, &norm, &real))?;
    let w_v0 = lift(w2_of(
        &lift(Model::build(&vanilla_cfg, &mut Rng::new(0)))?,
        &norm,
        &real,
    ))?;
    let full = steps == full_steps;
    *trained = Some(Trained { expert, steps, full });
    let detail = format!(
        "{steps} steps in {train_secs:.0} s; sliced W2 expert {w_e:.4}, vanilla {w_v:.4}, untrained {w_e0:.4} / {w_v0:.4}"
    );
    ensure(w_e <= 1.3 * w_v, || format!("expert above 1.3x vanilla: {detail}"))?;
    ensure(w_e <= 0.5 * w_e0 && w_v <= 0.5 * w_v0, || {
        format!("not below half of untrained: {detail}")
    })?;
    ensure(full, || format!("shortened run, not the criterion: {detail}"))?;
    Ok(detail)
}

fn guidance(trained: &Option<Trained>) -> Outcome {
    let Some(t) = trained else {
        return Err("no trained model".into());
    };
    let m = &t.expert;
    let mc = m.config();
    let labels: Vec<Option<usize>> = (0..64).map(|i| Some(i % mc.num_classes)).collect();
    let n = labels.len();
    let sampler = SamplerConfig {
        steps: 40,
        cfg_scale: 1.0,
        seed: 3,
    };
    let guided = lift(generate(m, &labels, &sampler))?;
    let cond = lift(m.condition(&labels))?;
    let mut x: Tensor<f32> = lift(initial_noise(&[n, mc.tokens(), mc.latent_dim], sampler.seed))?;
    let dt = 1.0f32 / sampler.steps as f32;
    for k in 0..sampler.steps {
        let tau = tau_of_t(k as f64 / sampler.steps as f64);
        let g = lift(m.schedule().route(tau))?;
        let v = lift(m.expert_forward(g, &x, &vec![tau; n], &cond))?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    ensure(guided.bit_eq(&x), || {
        "s = 1 differs from conditional-only sampling".into()
    })?;

    let spec = DatasetSpec::default();
    let norm = lift(Normalizer::for_spec(&spec))?;
    let centers = spec.class_centers().expect("gauss8 has centres");
    let mut purities = Vec::new();
    for s in 1..=5 {
        let sc = SamplerConfig {
            steps: 40,
            cfg_scale: s as f64,
            seed: 5,
        };
        purities.push(lift(class_purity(m, &norm, &centers, &sc, 4000))?);
    }
    let shown: Vec<String> = purities.iter().map(|p| format!("{p:.4}")).collect();
    let detail = format!("s=1 bitwise conditional-only; purity s=1..5: {}", shown.join(", "));
    ensure(purities.windows(2).all(|w| w[1] >= w[0]), || {
        format!("purity decreases: {detail}")
    })?;
    ensure(t.full, || {
        format!("model from a shortened run ({} steps): {detail}", t.steps)
    })?;
    Ok(detail)
}

fn diagnostics() -> Outcome {
    let m = lift(Model::<f32>::build(&ModelConfig::default(), &mut Rng::new(0)))?;
    let rows = lift(analyze_gates(&m))?;
    let mc = m.config();
    let taus = 1000 / latte::eval::GATE_TAU_STEP + 1;
    ensure(rows.len() == mc.layers * mc.heads * taus, || {
        format!("{} gate rows", rows.len())
    })?;
    for r in &rows {
        let start = m.schedule().is_group_start(r.layer);
        ensure(r.gate.is_none() == start, || {
            format!("layer {} slot structure wrong", r.layer)
        })?;
        ensure(r.gate.is_none_or(|g| g == 0.0), || {
            format!("nonzero gate at layer {}", r.layer)
        })?;
    }

    let mut tied = lift(Model::<f32>::build(&ModelConfig::grid8(), &mut Rng::new(1)))?;
    tied.tie_group_layers();
    let sampler = SamplerConfig {
        steps: 40,
        cfg_scale: 5.0,
        seed: 2,
    };
    let labels: Vec<Option<usize>> = (0..8).map(Some).collect();
    let sims = lift(analyze_similarity(&tied, &sampler, &labels))?;
    ensure(!sims.is_empty(), || "no similarity rows".into())?;
    let min = sims.iter().map(|r| r.mean_s).fold(f64::INFINITY, f64::min);
    ensure(sims.iter().all(|r| r.mean_s > 0.0 && r.mean_s <= 1.0), || {
        "S outside (0, 1]".into()
    })?;
    ensure(min > 0.95, || format!("tied-weights min S {min:.4}"))?;

    let untied = lift(Model::<f32>::build(
        &ModelConfig {
            init_std: 0.3,
            ..ModelConfig::grid8()
        },
        &mut Rng::new(1),
    ))?;
    let loose = lift(analyze_similarity(&untied, &sampler, &labels))?;
    ensure(loose.iter().all(|r| r.mean_s > 0.0 && r.mean_s <= 1.0), || {
        "S outside (0, 1]".into()
    })?;
    let loose_min = loose.iter().map(|r| r.mean_s).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "zero gates with empty group-start slots; tied min S {min:.4}; untied min S {loose_min:.4}"
    ))
}

fn persistence() -> Outcome {
    let spec = DatasetSpec {
        n_train: 2048,
        n_eval: 256,
        ..DatasetSpec::default()
    };
    let cfg = ModelConfig {
        hidden: 32,
        heads: 2,
        ffn_mult: 2,
        time_freq_dim: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        steps: 60,
        batch: 64,
        ..TrainConfig::default()
    };
    let a = lift(train_one(&cfg, &tc, &spec))?;
    let b = lift(train_one(&cfg, &tc, &spec))?;
    let bytes = |m: &Model<f32>| Checkpoint::new(m.clone(), CheckpointMeta::new(m.config()).unwrap()).to_bytes();
    let (ba, bb) = (lift(bytes(&a))?, lift(bytes(&b))?);
    ensure(ba == bb, || "training is not reproducible".into())?;

    let sampler = SamplerConfig {
        steps: 16,
        ..SamplerConfig::default()
    };
    let labels: Vec<Option<usize>> = (0..16).map(|i| Some(i % 8)).collect();
    let s1 = lift(generate(&a, &labels, &sampler))?;
    let s2 = lift(generate(&a, &labels, &sampler))?;
    ensure(s1.bit_eq(&s2), || "sampling is not reproducible".into())?;

    let real = lift(gen_split(&spec, Split::Eval))?;
    let norm = lift(Normalizer::for_spec(&spec))?;
    let e1 = lift(evaluate(&a, &norm, &real, None, &sampler, 128, 4))?;
    let e2 = lift(evaluate(&a, &norm, &real, None, &sampler, 128, 4))?;
    ensure(
        e1.sliced_w2.to_bits() == e2.sliced_w2.to_bits() && e1.mmd_rbf.to_bits() == e2.mmd_rbf.to_bits(),
        || "evaluation is not reproducible".into(),
    )?;

    let back = Checkpoint::from_bytes(&ba).map_err(|e| e.to_string())?;
    let cond = lift(a.condition(&labels[..4]))?;
    let x: Tensor<f32> = probe(&cfg, 4, 9);
    for k in 0..cfg.groups {
        let iv = a.schedule().infer_intervals[k];
        let taus = [iv.hi, iv.lo, (iv.hi + iv.lo) / 2.0, iv.hi - 1.0];
        let va = lift(a.expert_forward(k, &x, &taus, &cond))?;
        let vb = lift(back.model.expert_forward(k, &x, &taus, &cond))?;
        ensure(va.bit_eq(&vb), || format!("reloaded group {k} differs"))?;
    }

    for cut in [0, 4, 40, ba.len() / 2, ba.len() - 1] {
        ensure(Checkpoint::from_bytes(&ba[..cut]).is_err(), || {
            format!("truncation at {cut} accepted")
        })?;
    }
    let mut flipped = ba.clone();
    let at = flipped.len() - 100;
    flipped[at] ^= 1;
    ensure(Checkpoint::from_bytes(&flipped).is_err(), || "bit flip accepted".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ltte");
    lift(Checkpoint::new(a.clone(), lift(CheckpointMeta::new(&cfg))?).save(&path))?;
    let other = ModelConfig {
        groups: 2,
        ..cfg.clone()
    };
    ensure(
        matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Checkpoint { .. })),
        || "mismatched config accepted".into(),
    )?;
    Ok("train, sample and eval bitwise repeatable; reload bitwise; corrupt and mismatched files rejected".into())
}

fn main() {
    let mut trained = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1} s]")
            }
        }
    };
    report(1, "gradients", &mut gradients);
    report(2, "schedule", &mut schedule);
    report(3, "complexity", &mut complexity);
    report(4, "cache", &mut cache);
    report(5, "residual attention", &mut residual);
    report(6, "learning", &mut || learning(&mut trained));
    report(7, "guidance", &mut || guidance(&trained));
    report(8, "diagnostics", &mut diagnostics);
    report(9, "determinism and persistence", &mut persistence);
    println!("acceptance: {} of 9 criteria pass", 9 - failed);
    if failed > 0 && std::env::var_os("LATTE_ACCEPT_STRICT").is_some() {
        std::process::exit(1);
    }
}
