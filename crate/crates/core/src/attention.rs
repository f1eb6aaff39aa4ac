//! Image self-attention with timestep-gated residual maps, image→context
//! cross-attention, rotary tables, and the adjacent-layer map similarity.
//!
//! Self-attention and cross-attention use separate softmaxes and their
//! outputs are summed before the output projection. The residual term is
//! added only to the image self-attention map:
//!
//! ```text
//! A^{l+1} = softmax(Q Kᵀ / √d_head)          per head, image keys only
//! Ã^{l+1} = A^{l+1} + g_h(t) · A^l           g(t) = tanh(h_t W_t)
//! ```
//!
//! The map handed to the next layer is always the un-augmented `A^{l+1}`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};
use std::rc::Rc;

const ROPE_BASE: f64 = 10_000.0;

/// Cosine/sine tables of shape `[tokens, head_dim]`, each angle repeated
/// over its rotation pair.
#[derive(Clone, Debug)]
pub struct RotaryTable<T> {
    pub cos: Rc<Tensor<T>>,
    pub sin: Rc<Tensor<T>>,
}

impl<T: Real> RotaryTable<T> {
    fn from_angles(tokens: usize, head_dim: usize, angle: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut cos = Vec::with_capacity(tokens * head_dim);
        let mut sin = Vec::with_capacity(tokens * head_dim);
        for tok in 0..tokens {
            for p in 0..head_dim / 2 {
                let a = angle(tok, p);
                let (s, c) = a.sin_cos();
                cos.extend([c, c]);
                sin.extend([s, s]);
            }
        }
        Ok(Self {
            cos: Rc::new(Tensor::from_f64(&[tokens, head_dim], &cos)?),
            sin: Rc::new(Tensor::from_f64(&[tokens, head_dim], &sin)?),
        })
    }

    pub fn tokens(&self) -> usize {
        self.cos.shape()[0]
    }

    /// Applies the rotation to a plain `[tokens, head_dim]` tensor.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.cos.shape() {
            return Err(Error::dim("RotaryTable::apply", x.shape(), self.cos.shape()));
        }
        let (c, s) = (self.cos.data(), self.sin.data());
        let mut out = x.clone();
        let d = out.data_mut();
        for p in (0..d.len()).step_by(2) {
            let (x0, x1) = (x.data()[p], x.data()[p + 1]);
            d[p] = x0 * c[p] - x1 * s[p];
            d[p + 1] = x1 * c[p + 1] + x0 * s[p + 1];
        }
        Ok(out)
    }
}

/// 2D rotary table for a row-major `grid_h × grid_w` token grid: the first
/// half of each head rotates with the row index, the second half with the
/// column index.
pub fn rope_2d<T: Real>(grid_h: usize, grid_w: usize, head_dim: usize) -> Result<RotaryTable<T>> {
    rope_2d_at(grid_h, grid_w, head_dim, (0, 0))
}

/// [`rope_2d`] with the grid's top-left token placed at `origin`.
pub fn rope_2d_at<T: Real>(
    grid_h: usize,
    grid_w: usize,
    head_dim: usize,
    origin: (usize, usize),
) -> Result<RotaryTable<T>> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D rotary encoding needs head_dim divisible by 4, got {head_dim}"
        )));
    }
    let quarter = head_dim / 4;
    RotaryTable::from_angles(grid_h * grid_w, head_dim, |tok, pair| {
        let (row, col) = (tok / grid_w + origin.0, tok % grid_w + origin.1);
        let (pos, j) = if pair < quarter {
            (row, pair)
        } else {
            (col, pair - quarter)
        };
        pos as f64 * ROPE_BASE.powf(-(j as f64) / quarter as f64)
    })
}

/// 1D rotary table for the given sequence positions.
pub fn rope_1d<T: Real>(positions: &[usize], head_dim: usize) -> Result<RotaryTable<T>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary encoding needs an even head_dim, got {head_dim}"
        )));
    }
    let half = head_dim / 2;
    RotaryTable::from_angles(positions.len(), head_dim, |tok, pair| {
        positions[tok] as f64 * ROPE_BASE.powf(-(pair as f64) / half as f64)
    })
}

/// Head-wise residual gate `g = tanh(h_t W_t)`: `[B, d] · [d, H] -> [B, H]`.
pub fn gate<'t, T: Real>(h_t: Var<'t, T>, w_t: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(h_t.matmul(w_t)?.tanh())
}

/// Plain-tensor gate evaluation for analysis code.
pub fn gate_values<T: Real>(h_t: &Tensor<T>, w_t: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = crate::tensor::Tape::new();
    let g = gate(tape.constant(h_t.clone()), tape.constant(w_t.clone()))?;
    Ok((*g.value()).clone())
}

/// Previous layer's un-augmented self-attention map `[B·H, N, N]`, or
/// nothing at the first layer of an expert group.
#[derive(Clone, Copy)]
pub struct ResidualAttentionState<'t, T> {
    prev: Option<Var<'t, T>>,
}

impl<'t, T: Real> ResidualAttentionState<'t, T> {
    pub fn empty() -> Self {
        Self { prev: None }
    }

    pub fn from_map(map: Var<'t, T>) -> Self {
        Self { prev: Some(map) }
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }

    pub fn map(&self) -> Option<Var<'t, T>> {
        self.prev
    }
}

/// Per-layer attention weights, all `[d, d]` except `gate` (`[d, H]`).
#[derive(Clone, Copy)]
pub struct AttentionParams<'t, T> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub gate: Var<'t, T>,
}

/// Static shape information and position tables for one forward pass.
pub struct AttentionLayout<'a, T> {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub context_tokens: usize,
    /// Image tokens, `[tokens, head_dim]`.
    pub image_rope: &'a RotaryTable<T>,
    /// Context keys, `[context_tokens, head_dim]`.
    pub context_rope: &'a RotaryTable<T>,
    /// Image queries against context keys, `[tokens, head_dim]`.
    pub query_context_rope: &'a RotaryTable<T>,
    /// When false the residual path is compiled out entirely.
    pub residual: bool,
}

pub struct AttentionInput<'t, 'a, T> {
    /// Normalized image hidden states `[B·N, d]`.
    pub x: Var<'t, T>,
    /// Context states for this layer, one block of `context_tokens` rows per
    /// distinct conditioning entry: `[U·N_c, d]`.
    pub context: Var<'t, T>,
    /// Which context block each sample uses (`len == B`).
    pub context_index: &'a [usize],
    /// Timestep embedding `[B, d]`.
    pub h_t: Var<'t, T>,
    pub prev: ResidualAttentionState<'t, T>,
}

pub struct AttentionOutput<'t, T> {
    /// `[B·N, d]` after the output projection.
    pub out: Var<'t, T>,
    /// Un-augmented self-attention map `[B·H, N, N]`.
    pub map: Var<'t, T>,
    /// `Ã` when the residual was applied.
    pub augmented: Option<Var<'t, T>>,
    /// Gate values `[B, H]` when the residual was applied.
    pub gate: Option<Var<'t, T>>,
}

/// One LaTtE attention block.
pub fn latte_attention_forward<'t, T: Real>(
    input: AttentionInput<'t, '_, T>,
    params: AttentionParams<'t, T>,
    layout: &AttentionLayout<'_, T>,
) -> Result<AttentionOutput<'t, T>> {
    let AttentionLayout {
        batch: b,
        tokens: n,
        heads: h,
        context_tokens: nc,
        ..
    } = *layout;
    let xs = input.x.shape();
    if xs.len() != 2 || xs[0] != b * n {
        return Err(Error::dim("latte_attention_forward", &xs, &[b * n]));
    }
    let d = xs[1];
    if !d.is_multiple_of(h) {
        return Err(Error::Config(format!("hidden {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    if input.context_index.len() != b {
        return Err(Error::dim("context_index", &[input.context_index.len()], &[b]));
    }
    let cs = input.context.shape();
    if cs.len() != 2 || cs[1] != d || !cs[0].is_multiple_of(nc) {
        return Err(Error::dim("context", &cs, &[nc, d]));
    }
    let u = cs[0] / nc;
    let inv_sqrt = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let heads_of = |t: Var<'t, T>, rows: usize, toks: usize| -> Result<Var<'t, T>> {
        t.reshape(&[rows, toks, h, dh])?.permute(&[0, 2, 1, 3])
    };

    let qh = heads_of(input.x.matmul(params.wq)?, b, n)?;
    let kh = heads_of(input.x.matmul(params.wk)?, b, n)?;
    let vh = heads_of(input.x.matmul(params.wv)?, b, n)?;

    let rope = layout.image_rope;
    let q_self = qh.rotate_pairs(&rope.cos, &rope.sin)?.reshape(&[b * h, n, dh])?;
    let k_self = kh.rotate_pairs(&rope.cos, &rope.sin)?.reshape(&[b * h, n, dh])?;
    let map = q_self.bmm(k_self, true)?.scale(inv_sqrt).softmax()?;

    let (attn, augmented, gate_out) = match (layout.residual, input.prev.map()) {
        (true, Some(prev)) => {
            let ps = prev.shape();
            if ps != [b * h, n, n] {
                return Err(Error::dim("residual attention", &ps, &[b * h, n, n]));
            }
            let g = gate(input.h_t, params.gate)?;
            let aug = map.add(prev.scale_by(g.reshape(&[b * h])?)?)?;
            (aug, Some(aug), Some(g))
        }
        _ => (map, None, None),
    };
    let self_out = attn.bmm(vh.reshape(&[b * h, n, dh])?, false)?;

    let ctx = input.context.rms_norm();
    let cr = layout.context_rope;
    let kc = heads_of(ctx.matmul(params.wk)?, u, nc)?
        .rotate_pairs(&cr.cos, &cr.sin)?
        .index_select(input.context_index)?
        .reshape(&[b * h, nc, dh])?;
    let vc = heads_of(ctx.matmul(params.wv)?, u, nc)?
        .index_select(input.context_index)?
        .reshape(&[b * h, nc, dh])?;
    let qr = layout.query_context_rope;
    let q_cross = qh.rotate_pairs(&qr.cos, &qr.sin)?.reshape(&[b * h, n, dh])?;
    let cross_map = q_cross.bmm(kc, true)?.scale(inv_sqrt).softmax()?;
    let cross_out = cross_map.bmm(vc, false)?;

    let merged = self_out
        .add(cross_out)?
        .reshape(&[b, h, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * n, d])?;
    Ok(AttentionOutput {
        out: merged.matmul(params.wo)?,
        map,
        augmented,
        gate: gate_out,
    })
}

/// Sequential similarity of two `[N, N]` maps: one minus the row-mean total
/// variation between row-softmaxed maps. Lies in `(0, 1]`.
pub fn similarity<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::dim("similarity", a.shape(), b.shape()));
    }
    Ok(similarity_rows(&a.to_f64_vec(), &b.to_f64_vec(), a.last_dim()))
}

/// [`similarity`] on raw row-major buffers with `cols` columns.
pub fn similarity_rows(a: &[f64], b: &[f64], cols: usize) -> f64 {
    let softmax = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    };
    let rows = a.len() / cols;
    let total_tv: f64 = a
        .chunks(cols)
        .zip(b.chunks(cols))
        .map(|(ra, rb)| {
            let (pa, pb) = (softmax(ra), softmax(rb));
            0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>()
        })
        .sum();
    1.0 - total_tv / rows as f64
}
