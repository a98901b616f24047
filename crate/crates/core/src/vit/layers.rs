//! Transformer building blocks over `[batch, tokens, width]` tensors. All ops
//! are composed from primitives candle can differentiate.

use candle_core::{Tensor, D};

use super::params::ParamStore;
use crate::error::Result;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn load(p: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: p.get(&format!("{name}.weight"))?.as_tensor().clone(),
            b: p.get(&format!("{name}.bias"))?.as_tensor().clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 2 { x.matmul(&self.w)? } else { x.broadcast_matmul(&self.w)? };
        Ok(y.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn load(p: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: p.get(&format!("{name}.gamma"))?.as_tensor().clone(),
            beta: p.get(&format!("{name}.beta"))?.as_tensor().clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis; the max shift is treated as
/// a constant, which leaves the gradient unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl Attention {
    pub fn load(p: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::load(p, &format!("{name}.wq"))?,
            wk: Linear::load(p, &format!("{name}.wk"))?,
            wv: Linear::load(p, &format!("{name}.wv"))?,
            wo: Linear::load(p, &format!("{name}.wo"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, width) = x.dims3()?;
        let dh = width / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((n, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.wq.forward(x)?)?;
        let k = split(self.wk.forward(x)?)?;
        let v = split(self.wv.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, t, width))?;
        self.wo.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn load(p: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self { fc1: Linear::load(p, &format!("{name}.fc1"))?, fc2: Linear::load(p, &format!("{name}.fc2"))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn load(p: &ParamStore, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::load(p, &format!("{name}.norm1"))?,
            attn: Attention::load(p, &format!("{name}.attn"), heads)?,
            norm2: LayerNorm::load(p, &format!("{name}.norm2"))?,
            mlp: Mlp::load(p, &format!("{name}.mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}
