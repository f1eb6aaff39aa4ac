//! Independent reference computations for quantities with a known value.

use latte::attention::{
    latte_attention_forward, rope_1d, rope_2d, AttentionInput, AttentionLayout, AttentionParams, ResidualAttentionState,
};
use latte::data::{generate, DatasetSpec, Split};
use latte::eval::{sliced_w2, w2_sorted};
use latte::model::{Model, ModelConfig};
use latte::rng::Rng;
use latte::schedule::TimestepSchedule;
use latte::tensor::{grad_check, grad_check_norm, Tape, Tensor, Var};
use latte::train::{TrainConfig, Trainer};

fn random<T: latte::Real>(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = rng.normals(n).into_iter().map(|x| x * scale).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

#[test]
fn softmax_of_ten_and_zero() {
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_f64(&[2], &[10.0, 0.0]).unwrap());
    let p = v.softmax().unwrap().value();
    let e = 10f64.exp();
    assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((p.data()[0] - 0.99995).abs() < 1e-5);
}

#[test]
fn large_matmul_matches_triple_loop() {
    // Big enough to take the blocked kernel path.
    let mut rng = Rng::new(5);
    let (m, k, n) = (33, 47, 29);
    let a: Tensor<f64> = random(&[m, k], &mut rng, 1.0);
    let b: Tensor<f64> = random(&[k, n], &mut rng, 1.0);
    let tape = Tape::new();
    let c = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap()
        .value();
    for i in 0..m {
        for j in 0..n {
            let expect: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
            assert!((c.data()[i * n + j] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn single_precision_mse_gradient() {
    let mut rng = Rng::new(2);
    let x: Tensor<f32> = random(&[4, 3], &mut rng, 1.0);
    let y: Tensor<f32> = random(&[4, 2], &mut rng, 1.0);
    let w: Tensor<f32> = random(&[3, 2], &mut rng, 1.0);
    let err = grad_check(
        |wv: Var<'_, f32>| {
            wv.tape()
                .constant(x.clone())
                .matmul(wv)?
                .mse(wv.tape().constant(y.clone()))
        },
        &w,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_then_sum_of_squares_gradient() {
    let mut rng = Rng::new(4);
    let x: Tensor<f64> = random(&[3, 5], &mut rng, 1.0);
    let err = grad_check(
        |v| {
            let p = v.softmax()?;
            Ok(p.mul(p)?.sum())
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn single_precision_attention_layer_gradient() {
    // Per-coordinate relative error in f32 is dominated by rounding in the
    // loss on near-zero coordinates, so this compares whole gradients.
    let (b, side, h, dh, nc) = (2, 2, 2, 4, 3);
    let (n, d) = (side * side, h * dh);
    let image = rope_2d::<f32>(side, side, dh).unwrap();
    let ctx_rope = rope_1d::<f32>(&(0..nc).collect::<Vec<_>>(), dh).unwrap();
    let q_rope = rope_1d::<f32>(&vec![nc; n], dh).unwrap();
    let layout = AttentionLayout {
        batch: b,
        tokens: n,
        heads: h,
        context_tokens: nc,
        image_rope: &image,
        context_rope: &ctx_rope,
        query_context_rope: &q_rope,
        residual: true,
    };
    let mut rng = Rng::new(8);
    let ws: Vec<Tensor<f32>> = (0..4).map(|_| random(&[d, d], &mut rng, 0.5)).collect();
    let gate: Tensor<f32> = random(&[d, h], &mut rng, 0.5);
    let ctx: Tensor<f32> = random(&[nc, d], &mut rng, 1.0);
    let h_t: Tensor<f32> = random(&[b, d], &mut rng, 1.0);
    let target: Tensor<f32> = random(&[b * n, d], &mut rng, 1.0);
    let x: Tensor<f32> = random(&[b * n, d], &mut rng, 1.0);
    let idx = [0, 0];
    let err = grad_check_norm(
        |xv: Var<'_, f32>| {
            let t = xv.tape();
            let p = AttentionParams {
                wq: t.constant(ws[0].clone()),
                wk: t.constant(ws[1].clone()),
                wv: t.constant(ws[2].clone()),
                wo: t.constant(ws[3].clone()),
                gate: t.constant(gate.clone()),
            };
            let input = |prev| AttentionInput {
                x: xv,
                context: t.constant(ctx.clone()),
                context_index: &idx,
                h_t: t.constant(h_t.clone()),
                prev,
            };
            let out = latte_attention_forward(input(ResidualAttentionState::empty()), p, &layout)?;
            out.out.mse(t.constant(target.clone()))
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn group_draw_frequencies_are_uniform() {
    let s = TimestepSchedule::build(28, 4, 1000, 100).unwrap();
    let mut rng = Rng::new(0);
    let draws = 1_000_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let (g, t) = s.sample_train_timestep(&mut rng);
        assert!(s.train_intervals[g].contains(1000.0 * (1.0 - t)));
        counts[g] += 1;
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn sliced_w2_of_shifted_gaussians_matches_quantile_oracle() {
    // In 1-D every direction is ±1, so the sliced distance is the plain
    // 1-D distance, computed here by pairing order statistics directly.
    let n = 4000;
    let mut rng = Rng::new(3);
    let delta = 0.7;
    let a = rng.normals(n);
    let b: Vec<f64> = rng.normals(n).into_iter().map(|x| x + delta).collect();
    let (mut sa, mut sb) = (a.clone(), b.clone());
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let oracle = (sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sw = sliced_w2(&a, &b, 1, 8, &mut Rng::new(0)).unwrap();
    assert!((sw - oracle).abs() < 1e-12);
    assert!((sw - delta).abs() < 0.08, "{sw}");

    // In 2-D with a shift along x, each direction u sees a shift δ·|u_x|;
    // the mean of |u_x| over the circle is 2/π.
    let pts =
        |rng: &mut Rng, shift: f64| -> Vec<f64> { (0..n).flat_map(|_| [rng.normal() + shift, rng.normal()]).collect() };
    let shift = 2.0;
    let (p, q) = (pts(&mut rng, 0.0), pts(&mut rng, shift));
    let sw2 = sliced_w2(&p, &q, 2, 512, &mut Rng::new(1)).unwrap();
    assert!((sw2 - shift * 2.0 / std::f64::consts::PI).abs() < 0.1, "{sw2}");
    assert!(w2_sorted(&sa, &sa) == 0.0);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 2,
        time_freq_dim: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn initial_loss_matches_velocity_second_moment() {
    let spec = DatasetSpec {
        n_train: 8192,
        ..DatasetSpec::default()
    };
    let m = Model::<f32>::build(&tiny_model(), &mut Rng::new(0)).unwrap();
    let cfg = TrainConfig {
        batch: 512,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(m, cfg, spec).unwrap();
    // Monte Carlo estimate of E‖x1 − x0‖² per coordinate on the normalized set.
    let data = t.train_set().clone();
    let mut rng = Rng::new(9);
    let draws = 20_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let x1 = data.get(rng.below(data.len()));
        for &v in x1 {
            acc += (v - rng.normal()).powi(2);
        }
    }
    let expect = acc / (draws * data.dim()) as f64;
    let loss: f64 = (0..8).map(|_| t.train_step().unwrap().loss).sum::<f64>() / 8.0;
    assert!((loss - expect).abs() / expect < 0.1, "loss {loss} vs {expect}");
    assert!((expect - 2.0).abs() < 0.1);
}

#[test]
fn condition_drop_rate_and_group_balance() {
    let spec = DatasetSpec {
        n_train: 2048,
        ..DatasetSpec::default()
    };
    let cfg = ModelConfig {
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        time_freq_dim: 8,
        ..ModelConfig::default()
    };
    let m = Model::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
    let tc = TrainConfig {
        batch: 50,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(m, tc, spec).unwrap();
    let steps = 400u64;
    let mut dropped = 0.0;
    for _ in 0..steps {
        dropped += t.train_step().unwrap().dropped;
    }
    let rate = dropped / steps as f64;
    assert!((rate - 0.1).abs() < 0.01, "{rate}");
    let per = steps as f64 / 4.0;
    let bound = 1.5 * 3.0 * per.sqrt();
    for &c in t.group_steps() {
        assert!((c as f64 - per).abs() <= bound, "{:?}", t.group_steps());
    }
}

#[test]
fn gauss8_loss_halves_within_default_budget() {
    let spec = DatasetSpec::default();
    let m = Model::<f32>::build(&ModelConfig::default(), &mut Rng::new(0)).unwrap();
    let mut t = Trainer::new(m, TrainConfig::default(), spec).unwrap();
    let mut first = Vec::new();
    let mut last = Vec::new();
    let total = t.cfg.steps;
    t.run(|_, m| {
        if m.step <= 100 {
            first.push(m.loss);
        }
        if m.step > total - 100 {
            last.push(m.loss);
        }
        Ok(())
    })
    .unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&first), mean(&last));
    assert!(b <= 0.5 * a, "first {a:.4} last {b:.4}");
}

#[test]
fn gauss8_eval_split_is_disjoint_from_training() {
    let spec = DatasetSpec {
        n_train: 64,
        n_eval: 64,
        ..DatasetSpec::default()
    };
    let a = generate(&spec, Split::Train).unwrap();
    let b = generate(&spec, Split::Eval).unwrap();
    assert!(a.samples.iter().zip(&b.samples).any(|(x, y)| x != y));
}
