use hoi_autograd::{Graph, ParamId, Var};

use super::{Init, Linear};
use crate::error::{Error, Result};

/// Scaled dot-product attention split across `heads` equal slices of the
/// model width, followed by an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width must be divisible by heads");
        let mut s = init.sub(name);
        Self {
            query: Linear::new(&mut s, "query", width, width),
            key: Linear::new(&mut s, "key", width, width),
            value: Linear::new(&mut s, "value", width, width),
            out: Linear::new(&mut s, "out", width, width),
            heads,
            width,
        }
    }

    /// `mask`, when given, is `S_q×S_k` row-major with `true` for keys a
    /// query may attend to.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&[bool]>) -> Var {
        let q = self.query.forward(g, xq);
        let k = self.key.forward(g, xkv);
        let v = self.value.forward(g, xkv);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, mask);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, joined)
    }

    /// Shape-checked [`forward`](Self::forward).
    pub fn try_forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (sq, wq) = g.shape(xq);
        let (sk, wk) = g.shape(xkv);
        if wq != self.width {
            return Err(Error::shape("attention query", self.width, wq));
        }
        if wk != self.width {
            return Err(Error::shape("attention key/value", self.width, wk));
        }
        if sk == 0 {
            return Err(Error::shape("attention key/value rows", "at least 1", 0));
        }
        if let Some(m) = mask {
            if m.len() != sq * sk {
                return Err(Error::shape("attention mask", sq * sk, m.len()));
            }
            if let Some(r) = (0..sq).find(|&r| !m[r * sk..(r + 1) * sk].iter().any(|&b| b)) {
                return Err(Error::shape("attention mask", "an unmasked key in every row", format!("row {r} fully masked")));
            }
        }
        Ok(self.forward(g, xq, xkv, mask))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out].iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
