//! Scaled dot-product and multi-head attention on plain tensors and on
//! the autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Added to attention scores at disallowed positions. Large enough that
/// `exp` underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e9;

/// `softmax(Q Kᵀ / √d + mask) V`, with `d` the column count of `Q`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (_, d) = q.dims2("attention")?;
    let (mk, _) = k.dims2("attention")?;
    let (mv, _) = v.dims2("attention")?;
    if mk != mv {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = q.matmul_t(k)?.map(|x| x * scale);
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax_rows()?.matmul(v)
}

/// Per-head query/key/value projections (each `d × d/h`) and the output
/// projection `W^O` (`d × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

impl MultiHeadParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

/// Concatenates per-head projections side by side so all heads are
/// projected with one product.
pub(crate) fn concat_heads(parts: &[Tensor]) -> Result<Tensor> {
    let (r, _) = parts[0].dims2("concat_heads")?;
    let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; r * total];
    for i in 0..r {
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            out[i * total + off..i * total + off + w].copy_from_slice(p.row(i));
            off += w;
        }
    }
    Tensor::new(vec![r, total], out)
}

pub(crate) fn column_block(x: &Tensor, start: usize, width: usize) -> Tensor {
    let r = x.rows();
    let mut out = Vec::with_capacity(r * width);
    for i in 0..r {
        out.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Tensor::new(vec![r, width], out).expect("block shape")
}

/// `Concat(head_1, …, head_h) W^O` where `head_i` attends from `queries`
/// to `keys_values` through the i-th projections.
pub fn multi_head(
    queries: &Tensor,
    keys_values: &Tensor,
    params: &MultiHeadParams,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let h = params.heads();
    if h == 0 {
        return Err(TensorError::Invalid("multi_head: no heads".into()));
    }
    let dh = params.wq[0].cols();
    let q = queries.matmul(&concat_heads(&params.wq)?)?;
    let k = keys_values.matmul(&concat_heads(&params.wk)?)?;
    let v = keys_values.matmul(&concat_heads(&params.wv)?)?;
    let heads = (0..h)
        .map(|i| {
            attention(
                &column_block(&q, i * dh, dh),
                &column_block(&k, i * dh, dh),
                &column_block(&v, i * dh, dh),
                mask,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    concat_heads(&heads)?.matmul(&params.wo)
}

/// Tape version of [`attention`]; the mask is a constant.
pub fn attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = tape.value(q).dims2("attention")?.1;
    let scale = 1.0 / (d as f64).sqrt();
    let scores = tape.matmul_t(q, k)?;
    let mut scores = tape.scale(scores, scale);
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax_rows(scores)?;
    tape.matmul(probs, v)
}

/// `rows × cols` mask hiding key positions `j > i` (decoder self-attention).
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_VALUE;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Mask hiding padded key positions from every query row, optionally
/// combined with a causal mask. `None` when nothing is hidden.
pub fn build_mask(queries: usize, key_pad: &[bool], causal: bool) -> Option<Tensor> {
    let keys = key_pad.len();
    if !causal && !key_pad.iter().any(|&p| p) {
        return None;
    }
    let mut data = vec![0.0; queries * keys];
    for i in 0..queries {
        for j in 0..keys {
            if key_pad[j] || (causal && j > i) {
                data[i * keys + j] = MASK_VALUE;
            }
        }
    }
    Some(Tensor::new(vec![queries, keys], data).expect("mask shape"))
}
