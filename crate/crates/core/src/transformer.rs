//! Post-norm transformer encoder and the two-block cross-attention decoder.

use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Dims {
    pub fn new(d: usize, heads: usize, ffn: usize) -> Result<Self> {
        check_heads(d, heads)?;
        if ffn < d {
            return Err(Error::Config(format!(
                "feed-forward width {ffn} is smaller than model width {d}"
            )));
        }
        Ok(Dims { d, heads, ffn })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

pub fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize) -> Result<Self> {
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), init.fan_in(&[d, d], d));
        Ok(AttentionParams {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, dims: Dims) -> Result<Self> {
        let (d, f) = (dims.d, dims.ffn);
        Ok(FfnParams {
            w1: store.add(format!("{prefix}.w1"), init.fan_in(&[d, f], d))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[f]))?,
            w2: store.add(format!("{prefix}.w2"), init.fan_in(&[f, d], f))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }
}

/// Scaled dot-product attention over `heads` column blocks of already
/// projected `q`, `k`, `v`, concatenated and multiplied by `wo`. Each head's
/// weight matrix is appended to `g.attention`.
pub fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, wo: Var) -> Result<Var> {
    let d = *g.tape.shape(q).last().unwrap_or(&0);
    check_heads(d, heads)?;
    let lk = g.tape.shape(k)[0];
    if g.tape.shape(v)[0] != lk {
        return Err(Error::Contract(format!(
            "{} keys but {} values",
            lk,
            g.tape.shape(v)[0]
        )));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.tape.slice_cols(q, a, b)?;
        let kh = g.tape.slice_cols(k, a, b)?;
        let vh = g.tape.slice_cols(v, a, b)?;
        let kt = g.tape.transpose(kh)?;
        let logits = g.tape.matmul(qh, kt)?;
        let logits = g.tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let weights = g.tape.softmax_rows(logits)?;
        g.attention.push(weights);
        outs.push(g.tape.matmul(weights, vh)?);
    }
    let cat = g.tape.concat_cols(&outs)?;
    g.tape.matmul(cat, wo)
}

/// Multi-head attention with queries from `queries`, keys and values from
/// `keys` and `values`.
pub fn mha(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.tape.matmul(queries, wq)?;
    let k = g.tape.matmul(keys, wk)?;
    let v = g.tape.matmul(values, wv)?;
    attention_core(g, q, k, v, heads, wo)
}

/// `max(0, x·W1 + b1)·W2 + b2`.
pub fn ffn(g: &mut Graph, x: Var, p: &FfnParams) -> Result<Var> {
    let h = g.tape.matmul(x, g.vars[p.w1])?;
    let h = g.tape.add_bias(h, g.vars[p.b1])?;
    let h = g.tape.relu(h);
    let y = g.tape.matmul(h, g.vars[p.w2])?;
    g.tape.add_bias(y, g.vars[p.b2])
}

pub fn norm(g: &mut Graph, x: Var, p: &NormParams) -> Result<Var> {
    g.tape.layer_norm(x, g.vars[p.gain], g.vars[p.bias], LN_EPS)
}

/// `LN(sublayer + residual)`.
fn add_norm(g: &mut Graph, sublayer: Var, residual: Var, p: &NormParams) -> Result<Var> {
    let s = g.tape.add(sublayer, residual)?;
    norm(g, s, p)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: AttentionParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: Dims,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dims: Dims,
        n_layers: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let pre = format!("{prefix}.{i}");
            layers.push(EncoderLayer {
                attention: AttentionParams::new(store, init, &format!("{pre}.attn"), dims.d)?,
                ffn: FfnParams::new(store, init, &format!("{pre}.ffn"), dims)?,
                norm1: NormParams::new(store, &format!("{pre}.ln1"), dims.d)?,
                norm2: NormParams::new(store, &format!("{pre}.ln2"), dims.d)?,
            });
        }
        Ok(Encoder { dims, layers })
    }

    /// Per layer: `u = LN(mha(z, z, z) + z)`, `y = LN(ffn(u) + u)`.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let mut z = z;
        for layer in &self.layers {
            let a = mha(g, z, z, z, &layer.attention, self.dims.heads)?;
            let u = add_norm(g, a, z, &layer.norm1)?;
            let f = ffn(g, u, &layer.ffn)?;
            z = add_norm(g, f, u, &layer.norm2)?;
        }
        Ok(z)
    }
}

/// One decoder layer. Block 1 is cross-attention with content queries and
/// style keys/values; block 2 attends again over block 1's projected keys and
/// values, taking its own input directly as queries, so it only owns an
/// output projection.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub cross: AttentionParams,
    pub second_wo: ParamId,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub norm3: NormParams,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dims: Dims,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        dims: Dims,
        n_layers: usize,
    ) -> Result<Self> {
        let d = dims.d;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let pre = format!("{prefix}.{i}");
            layers.push(DecoderLayer {
                cross: AttentionParams::new(store, init, &format!("{pre}.cross"), d)?,
                second_wo: store.add(format!("{pre}.second.wo"), init.fan_in(&[d, d], d))?,
                ffn: FfnParams::new(store, init, &format!("{pre}.ffn"), dims)?,
                norm1: NormParams::new(store, &format!("{pre}.ln1"), d)?,
                norm2: NormParams::new(store, &format!("{pre}.ln2"), d)?,
                norm3: NormParams::new(store, &format!("{pre}.ln3"), d)?,
            });
        }
        Ok(Decoder { dims, layers })
    }

    pub fn forward(&self, g: &mut Graph, content: Var, style: Var) -> Result<Var> {
        let (lc, ls) = (g.tape.shape(content)[0], g.tape.shape(style)[0]);
        if lc != ls {
            return Err(Error::Contract(format!(
                "content has {lc} tokens but style has {ls}"
            )));
        }
        let heads = self.dims.heads;
        let mut x = content;
        for layer in &self.layers {
            let p = &layer.cross;
            let q1 = g.tape.matmul(x, g.vars[p.wq])?;
            let k1 = g.tape.matmul(style, g.vars[p.wk])?;
            let v1 = g.tape.matmul(style, g.vars[p.wv])?;
            let a = attention_core(g, q1, k1, v1, heads, g.vars[p.wo])?;
            let x0 = add_norm(g, a, x, &layer.norm1)?;
            let a = attention_core(g, x0, k1, v1, heads, g.vars[layer.second_wo])?;
            let x1 = add_norm(g, a, x0, &layer.norm2)?;
            let f = ffn(g, x1, &layer.ffn)?;
            x = add_norm(g, f, x1, &layer.norm3)?;
        }
        Ok(x)
    }
}
