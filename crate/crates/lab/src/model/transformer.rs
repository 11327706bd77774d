//! Post-norm transformer encoder and decoder in the DETR layout: positional
//! encodings are added to queries and keys inside every attention block,
//! never to values.

use candle_core::Tensor;

use super::params::{softmax, Init, LayerNorm, Linear, ParamStore};
use crate::error::Result;

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let lin = |s: &mut ParamStore, part: &str| {
            Linear::new(s, &format!("{name}.{part}"), dim, dim, Init::xavier(dim, dim))
        };
        Ok(Self {
            q: lin(store, "q_proj")?,
            k: lin(store, "k_proj")?,
            v: lin(store, "v_proj")?,
            out: lin(store, "out_proj")?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query (B, Nq, D)`, `key`/`value (B, Nk, D)` to `(B, Nq, D)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let mixed = softmax(&scores)?.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        self.out.forward(&merged)
    }
}

struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.linear1"), dim, hidden, Init::fan_in(dim))?,
            down: Linear::new(store, &format!("{name}.linear2"), hidden, dim, Init::fan_in(hidden))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

fn with_pos(x: &Tensor, pos: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_add(pos)?)
}

pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward(&self, src: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qk = with_pos(src, pos)?;
        let src = self.norm1.forward(&(src + self.attn.forward(&qk, &qk, src)?)?)?;
        self.norm2.forward(&(&src + self.ffn.forward(&src)?)?)
    }
}

pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        })
    }

    pub fn forward(
        &self,
        tgt: &Tensor,
        memory: &Tensor,
        pos: &Tensor,
        query_pos: &Tensor,
    ) -> Result<Tensor> {
        let qk = with_pos(tgt, query_pos)?;
        let tgt = self.norm1.forward(&(tgt + self.self_attn.forward(&qk, &qk, tgt)?)?)?;
        let attended = self.cross_attn.forward(
            &with_pos(&tgt, query_pos)?,
            &with_pos(memory, pos)?,
            memory,
        )?;
        let tgt = self.norm2.forward(&(&tgt + attended)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }
}
