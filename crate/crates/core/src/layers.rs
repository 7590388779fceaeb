//! Pre-norm transformer building blocks shared by both encoders.

use crate::error::Result;
use crate::numerics::{Array, ParamStore, Real, Tape, Var};

/// Parameter leaves of one transformer layer, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Names and shapes of one layer's parameters under `prefix`.
pub fn layer_param_shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    let hidden = 4 * d;
    [
        ("ln1.gain", vec![1, d]),
        ("ln1.bias", vec![1, d]),
        ("attn.wq", vec![d, d]),
        ("attn.bq", vec![1, d]),
        ("attn.wk", vec![d, d]),
        ("attn.bk", vec![1, d]),
        ("attn.wv", vec![d, d]),
        ("attn.bv", vec![1, d]),
        ("attn.wo", vec![d, d]),
        ("attn.bo", vec![1, d]),
        ("ln2.gain", vec![1, d]),
        ("ln2.bias", vec![1, d]),
        ("ffn.w1", vec![d, hidden]),
        ("ffn.b1", vec![1, hidden]),
        ("ffn.w2", vec![hidden, d]),
        ("ffn.b2", vec![1, d]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{prefix}.{n}"), s))
    .collect()
}

impl LayerVars {
    pub fn bind<T: Real>(tape: &Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let p = |n: &str| tape.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            ln1_g: p("ln1.gain")?,
            ln1_b: p("ln1.bias")?,
            wq: p("attn.wq")?,
            bq: p("attn.bq")?,
            wk: p("attn.wk")?,
            bk: p("attn.bk")?,
            wv: p("attn.wv")?,
            bv: p("attn.bv")?,
            wo: p("attn.wo")?,
            bo: p("attn.bo")?,
            ln2_g: p("ln2.gain")?,
            ln2_b: p("ln2.bias")?,
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
        })
    }
}

/// `x·W + b` with a `1×n` bias row.
pub fn linear<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn norm1<T: Real>(tape: &Tape<T>, l: &LayerVars, x: Var) -> Result<Var> {
    tape.layer_norm(x, l.ln1_g, l.ln1_b)
}

/// Query, key and value projections of already-normalised rows.
pub fn qkv<T: Real>(tape: &Tape<T>, l: &LayerVars, xn: Var) -> Result<(Var, Var, Var)> {
    Ok((
        linear(tape, xn, l.wq, l.bq)?,
        linear(tape, xn, l.wk, l.bk)?,
        linear(tape, xn, l.wv, l.bv)?,
    ))
}

/// Multi-head scaled dot-product attention. Returns the concatenated head
/// outputs (before the output projection) and each head's `N_q × N_k`
/// attention matrix.
pub fn attend<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for i in 0..heads {
        let (qi, ki, vi) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, i * dh, dh)?,
                tape.slice_cols(k, i * dh, dh)?,
                tape.slice_cols(v, i * dh, dh)?,
            )
        };
        let scores = tape.scale(tape.matmul_nt(qi, ki)?, scale);
        let a = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(a, vi)?);
        attn.push(a);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((o, attn))
}

/// Output projection plus residual, then the FFN sub-block with residual.
pub fn finish<T: Real>(tape: &Tape<T>, l: &LayerVars, x: Var, o: Var) -> Result<Var> {
    let x1 = tape.add(x, linear(tape, o, l.wo, l.bo)?)?;
    let h = tape.layer_norm(x1, l.ln2_g, l.ln2_b)?;
    let h = tape.gelu(linear(tape, h, l.w1, l.b1)?);
    tape.add(x1, linear(tape, h, l.w2, l.b2)?)
}

/// One pre-norm self-attention layer over the whole sequence.
pub fn mhsa_layer<T: Real>(
    tape: &Tape<T>,
    l: &LayerVars,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let xn = norm1(tape, l, x)?;
    let (q, k, v) = qkv(tape, l, xn)?;
    let (o, attn) = attend(tape, q, k, v, heads)?;
    Ok((finish(tape, l, x, o)?, attn))
}

/// Stacks per-head attention matrices into `h × N_q × N_k`, keeping only
/// `rows` and `cols`.
pub fn stack_heads<T: Real>(
    tape: &Tape<T>,
    attn: &[Var],
    rows: &[usize],
    cols: &[usize],
) -> Array<T> {
    let mut data = Vec::with_capacity(attn.len() * rows.len() * cols.len());
    for &a in attn {
        let av = tape.value(a);
        for &r in rows {
            let row = av.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
    }
    Array::new(&[attn.len(), rows.len(), cols.len()], data).expect("consistent shape")
}
