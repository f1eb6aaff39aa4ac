use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::rc::Rc;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the worst coordinate's
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
///
/// `f` is re-run on a fresh tape for every probe, so it must be
/// deterministic.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let (analytic, numeric) = gradients(f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max))
}

/// Like [`grad_check`] but with the whole-vector error
/// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, which stays meaningful
/// in single precision where tiny coordinates are swamped by rounding.
pub fn grad_check_norm<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let (analytic, numeric) = gradients(f, x, eps)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    Ok(norm(&diff) / (norm(&analytic) + norm(&numeric) + 1e-12))
}

fn gradients<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let loss = f(xv)?;
        let grads = tape.backward(loss)?;
        grads
            .get(xv)
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |probe: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let out = f(tape.var(probe))?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.item().as_f64())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let base = x.data()[i].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::from_f64_lossy(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::from_f64_lossy(base - eps);
        // Divide by the step actually realized after rounding to T.
        let h = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / h);
    }
    Ok((analytic, numeric))
}

/// Central-difference step used by [`op_suite`].
pub const SUITE_EPS: f64 = 1e-6;

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &rng.normals(n)).expect("positive shape")
}

type Case = Box<dyn for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>>;
type Weights = std::collections::HashMap<Vec<usize>, Rc<Tensor<f64>>>;

fn contract<'t>(v: Var<'t, f64>, weights: &Weights) -> Result<Var<'t, f64>> {
    let w = weights.get(&v.shape()).expect("weights for every case shape");
    Ok(v.mul(v.tape().constant((**w).clone()))?.sum())
}

/// Worst relative gradient error of every differentiable tape primitive on
/// random `f64` inputs drawn from `seed`. Each case maps a `[3, 4]` input
/// to a scalar by contracting the op's output with fixed random weights.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(seed);
    let x = rand_t(&[3, 4], &mut rng);
    let other = Rc::new(rand_t(&[3, 4], &mut rng));
    let row = Rc::new(rand_t(&[4], &mut rng));
    let rhs = Rc::new(rand_t(&[4, 5], &mut rng));
    let angles: Vec<f64> = rng.normals(2).into_iter().flat_map(|a| [a, a]).collect();
    let cos = Rc::new(Tensor::from_fn(&[4], |i| angles[i].cos()));
    let sin = Rc::new(Tensor::from_fn(&[4], |i| angles[i].sin()));
    let mut weights = Weights::new();
    for shape in [
        vec![3, 4],
        vec![4],
        vec![3, 5],
        vec![2, 3, 3],
        vec![2, 3, 2],
        vec![4, 4],
        vec![5, 4],
    ] {
        weights.insert(shape.clone(), Rc::new(rand_t(&shape, &mut rng)));
    }
    let weights = Rc::new(weights);
    let k = |t: &Rc<Tensor<f64>>| Rc::clone(t);
    macro_rules! case {
        ($name:expr, |$v:ident| $body:expr) => {{
            let weights = Rc::clone(&weights);
            let f: Case = Box::new(move |$v: Var<'_, f64>| contract($body, &weights));
            ($name, f)
        }};
    }
    let (o1, o2, o3, r, m) = (k(&other), k(&other), k(&other), k(&row), k(&rhs));
    let (c, s) = (k(&cos), k(&sin));
    let cases: Vec<(&'static str, Case)> = vec![
        case!("add", |v| v.add(v.tape().constant((*o1).clone()))?.mul(v)?),
        case!("add_broadcast", |v| v
            .mul(v)?
            .add(v.tape().constant((*r).clone()))?
            .tanh()),
        case!("sub", |v| v.tape().constant((*o2).clone()).sub(v)?.mul(v)?),
        case!("mul_broadcast", |v| v.mul(v.index_select(&[1])?.reshape(&[4])?)?),
        case!("scale", |v| v.scale(-1.7).mul(v)?),
        case!("tanh", |v| v.tanh()),
        case!("gelu", |v| v.scale(2.0).gelu()),
        case!("silu", |v| v.scale(2.0).silu()),
        case!("rms_norm", |v| v.rms_norm()),
        case!("softmax", |v| v.scale(2.0).softmax()?),
        case!("matmul", |v| v.matmul(v.tape().constant((*m).clone()))?),
        case!("matmul_both", |v| v.matmul(v.permute(&[1, 0])?)?.matmul(v)?),
        case!("bmm", |v| {
            let a = v.reshape(&[2, 3, 2])?;
            a.bmm(v.reshape(&[2, 2, 3])?, false)?
        }),
        case!("bmm_transposed", |v| {
            let a = v.reshape(&[2, 3, 2])?;
            a.bmm(a.tanh(), true)?
        }),
        case!("permute", |v| v
            .reshape(&[2, 3, 2])?
            .permute(&[2, 0, 1])?
            .reshape(&[3, 4])?
            .mul(v)?),
        case!("index_select", |v| v.index_select(&[2, 0, 2, 1])?.gelu()),
        case!("rotate_pairs", |v| v.rotate_pairs(&c, &s)?.mul(v)?),
        case!("scale_by", |v| v.scale_by(
            v.index_select(&[0])?.reshape(&[4])?.index_select(&[0, 1, 3])?.tanh()
        )?),
        case!("concat", |v| v
            .tape()
            .concat(&[v.index_select(&[0, 2])?.gelu(), v.tanh()])?),
    ];
    let mut out: Vec<(&'static str, f64)> = cases
        .iter()
        .map(|(name, f)| Ok((*name, grad_check(|v| f(v), &x, SUITE_EPS)?)))
        .collect::<Result<_>>()?;
    out.push((
        "mse",
        grad_check(|v| v.mse(v.tape().constant((*o3).clone())), &x, SUITE_EPS)?,
    ));
    out.push(("mean", grad_check(|v| Ok(v.mul(v)?.mean()), &x, SUITE_EPS)?));
    out.push(("sum", grad_check(|v| Ok(v.tanh().sum()), &x, SUITE_EPS)?));
    Ok(out)
}
