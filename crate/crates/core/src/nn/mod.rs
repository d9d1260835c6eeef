//! Sequence-network building blocks on top of the autograd graph:
//! linear maps, layer normalization, multi-head attention, encoder and
//! decoder blocks, timestep and positional embeddings.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`]; calling `forward`
//! records operations onto a [`Graph`].

mod attention;
pub mod checkpoint;

pub use attention::MultiHeadAttention;

use hoi_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Hidden width of every feed-forward sublayer, as a multiple of the model width.
pub const FFN_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { width: 256, heads: 4, encoder_layers: 8, decoder_layers: 8 }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("width {} must be even for sinusoidal embeddings", self.width)));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("at least one decoder layer is required".into()));
        }
        Ok(())
    }
}

/// Parameter registration scope: a name prefix, the store, and the
/// initialization generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    /// Child scope `prefix.name`.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value).expect("parameter names are unique by construction")
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.tensor(name, Tensor::filled(rows, cols, value))
    }
}

/// `x W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform initialization `U(±1/√in)`.
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut s = init.sub(name);
        let weight = s.uniform("weight", in_dim, out_dim, bound);
        let bias = s.uniform("bias", 1, out_dim, bound);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Affine connector whose weight and bias start at exactly zero, so its
/// output is zero for any input until it is trained.
#[derive(Clone, Debug)]
pub struct ZeroLinear(pub Linear);

impl ZeroLinear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.filled("weight", in_dim, out_dim, 0.0);
        let bias = s.filled("bias", 1, out_dim, 0.0);
        Self(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.0.forward(g, x)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.0.weight, self.0.bias]
    }
}

/// Checked affine map for plain tensors.
pub fn zero_linear_apply(store: &ParamStore, z: &ZeroLinear, x: &Tensor) -> Result<Tensor> {
    if x.cols() != z.0.in_dim {
        return Err(Error::shape("zero_linear_apply", z.0.in_dim, x.cols()));
    }
    let mut y = x.matmul(store.get(z.0.weight));
    let b = store.get(z.0.bias);
    for r in 0..y.rows() {
        for (o, v) in y.row_mut(r).iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        let mut s = init.sub(name);
        let gamma = s.filled("gamma", 1, width, 1.0);
        let beta = s.filled("beta", 1, width, 0.0);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        let mut s = init.sub(name);
        let up = Linear::new(&mut s, "up", width, FFN_MULT * width);
        let down = Linear::new(&mut s, "down", FFN_MULT * width, width);
        Self { up, down }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention and feed-forward with residuals.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            norm_attn: LayerNorm::new(&mut s, "norm_attn", width),
            attn: MultiHeadAttention::new(&mut s, "attn", width, heads),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", width),
            ff: FeedForward::new(&mut s, "ff", width),
        }
    }

    /// `mask` is a key mask of length `S` shared by every query row.
    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<&[bool]>) -> Var {
        let rows = g.shape(x).0;
        let full = key_mask.map(|m| expand_key_mask(m, rows));
        let h = self.norm_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, full.as_deref());
        let x = g.add(x, a);
        let h = self.norm_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Repeats a length-`S_k` key mask for `rows` queries.
pub fn expand_key_mask(mask: &[bool], rows: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * mask.len());
    for _ in 0..rows {
        out.extend_from_slice(mask);
    }
    out
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

/// Pre-norm decoder block: self-attention, then one cross-attention per
/// context (the query is the running stream, keys and values come from the
/// context), then a feed-forward sublayer; each with a residual connection.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Vec<CrossAttention>,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, name: &str, width: usize, heads: usize, contexts: usize) -> Self {
        let mut s = init.sub(name);
        let norm_self = LayerNorm::new(&mut s, "norm_self", width);
        let self_attn = MultiHeadAttention::new(&mut s, "self_attn", width, heads);
        let cross = (0..contexts)
            .map(|i| CrossAttention {
                norm: LayerNorm::new(&mut s, &format!("norm_cross{i}"), width),
                attn: MultiHeadAttention::new(&mut s, &format!("cross{i}"), width, heads),
            })
            .collect();
        let norm_ff = LayerNorm::new(&mut s, "norm_ff", width);
        let ff = FeedForward::new(&mut s, "ff", width);
        Self { norm_self, self_attn, cross, norm_ff, ff }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, contexts: &[Var]) -> Var {
        assert_eq!(contexts.len(), self.cross.len(), "one context per cross-attention");
        let h = self.norm_self.forward(g, x);
        let a = self.self_attn.forward(g, h, h, None);
        let mut x = g.add(x, a);
        for (c, &ctx) in self.cross.iter().zip(contexts) {
            let h = c.norm.forward(g, x);
            let a = c.attn.forward(g, h, ctx, None);
            x = g.add(x, a);
        }
        let h = self.norm_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_self.gamma, self.norm_self.beta];
        ids.extend(self.self_attn.param_ids());
        for c in &self.cross {
            ids.extend([c.norm.gamma, c.norm.beta]);
            ids.extend(c.attn.param_ids());
        }
        ids.extend([self.norm_ff.gamma, self.norm_ff.beta]);
        ids.extend([self.ff.up.weight, self.ff.up.bias, self.ff.down.weight, self.ff.down.bias]);
        ids
    }
}

/// `[sin(p f_0), cos(p f_0), sin(p f_1), cos(p f_1), …]` with
/// `f_i = 10000^(-i / (width/2))`.
pub fn sinusoid(position: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (position * f).sin();
        out[2 * i + 1] = (position * f).cos();
    }
    out
}

/// Fixed sinusoidal encoding of frame indices `0..rows`.
pub fn positional_encoding(rows: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, width);
    for r in 0..rows {
        t.row_mut(r).copy_from_slice(&sinusoid(r as f64, width));
    }
    t
}

/// Sinusoidal features of the step index followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub l1: Linear,
    pub l2: Linear,
    pub width: usize,
    pub steps: usize,
}

impl TimestepEmbedding {
    pub fn new(init: &mut Init, name: &str, width: usize, steps: usize) -> Self {
        let mut s = init.sub(name);
        let l1 = Linear::new(&mut s, "l1", width, width);
        let l2 = Linear::new(&mut s, "l2", width, width);
        Self { l1, l2, width, steps }
    }

    /// `index` is zero-based, `0 <= index < steps`; returns `1×width`.
    pub fn forward(&self, g: &mut Graph, index: usize) -> Result<Var> {
        if index >= self.steps {
            return Err(Error::Range { what: "timestep index", value: index, valid: format!("0..{}", self.steps) });
        }
        let raw = g.input(Tensor::row_vector(sinusoid(index as f64, self.width)));
        let h = self.l1.forward(g, raw);
        let h = g.silu(h);
        Ok(self.l2.forward(g, h))
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.l1.weight, self.l1.bias, self.l2.weight, self.l2.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scope(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Vec<ParamId> {
        let mut init = Init::new(store, rng, "m");
        let z = ZeroLinear::new(&mut init, "z", 3, 2);
        z.param_ids().to_vec()
    }

    #[test]
    fn zero_linear_is_zero_for_any_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng, "m");
        let z = ZeroLinear::new(&mut init, "z", 3, 2);
        let x = Tensor::from_rows(&[vec![1e30, -2.0, 3.5], vec![0.1, 0.2, 0.3]]);
        let y = zero_linear_apply(&store, &z, &x).unwrap();
        assert!(y.data().iter().all(|v| v.to_bits() == 0));
        assert!(zero_linear_apply(&store, &z, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn zero_linear_with_identity_weight_passes_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng, "m");
        let z = ZeroLinear::new(&mut init, "z", 3, 3);
        *store.get_mut(z.0.weight) = Tensor::identity(3);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]);
        assert_eq!(zero_linear_apply(&store, &z, &x).unwrap(), x);
    }

    #[test]
    fn zero_linear_moves_after_one_step() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = scope(&mut store, &mut rng);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let grads = {
            let mut g = Graph::new(&store);
            let z = ZeroLinear(Linear { weight: ids[0], bias: ids[1], in_dim: 3, out_dim: 2 });
            let xi = g.input(x.clone());
            let y = z.forward(&mut g, xi);
            let target = g.input(Tensor::from_rows(&[vec![1.0, -1.0]]));
            let d = g.sub(y, target);
            let sq = g.mul(d, d);
            let loss = g.sum(sq);
            g.backward(loss)
        };
        let mut adam = hoi_autograd::Adam::new(1e-2);
        adam.step(&mut store, &grads);
        let z = ZeroLinear(Linear { weight: ids[0], bias: ids[1], in_dim: 3, out_dim: 2 });
        let y = zero_linear_apply(&store, &z, &x).unwrap();
        assert!(y.max_abs() > 0.0);
    }

    #[test]
    fn raw_sinusoid_at_zero_alternates() {
        let s = sinusoid(0.0, 8);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn timestep_embedding_distinguishes_steps_and_checks_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut store, &mut rng, "");
        let te = TimestepEmbedding::new(&mut init, "time", 8, 10);
        let mut g = Graph::new(&store);
        let a = te.forward(&mut g, 0).unwrap();
        let b = te.forward(&mut g, 1).unwrap();
        let a2 = te.forward(&mut g, 0).unwrap();
        let diff = g.value(a).zip_map(g.value(b), |x, y| x - y).sum_sq();
        assert!(diff > 0.0);
        assert_eq!(g.value(a), g.value(a2));
        assert!(matches!(te.forward(&mut g, 10), Err(Error::Range { .. })));
    }

    #[test]
    fn block_config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        assert!(BlockConfig { width: 30, heads: 4, ..Default::default() }.validate().is_err());
        assert!(BlockConfig { width: 9, heads: 3, ..Default::default() }.validate().is_err());
        assert!(BlockConfig { decoder_layers: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn decoder_block_without_cross_output_reduces_to_self_and_ffn() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init::new(&mut store, &mut rng, "");
        let with_cross = DecoderBlock::new(&mut init, "a", 8, 2, 1);
        let x = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let out_proj = &with_cross.cross[0].attn.out;
        *store.get_mut(out_proj.weight) = Tensor::zeros(8, 8);
        *store.get_mut(out_proj.bias) = Tensor::zeros(1, 8);
        let mut g = Graph::new(&store);
        let xi = g.input(x);
        let ctx = g.input(Tensor::zeros(2, 8));
        let full = with_cross.forward(&mut g, xi, &[ctx]);
        // Same block evaluated without its cross-attention sublayer.
        let h = with_cross.norm_self.forward(&mut g, xi);
        let a = with_cross.self_attn.forward(&mut g, h, h, None);
        let y = g.add(xi, a);
        let h = with_cross.norm_ff.forward(&mut g, y);
        let f = with_cross.ff.forward(&mut g, h);
        let reduced = g.add(y, f);
        assert_eq!(g.shape(full), (3, 8));
        assert_eq!(g.value(full), g.value(reduced));
    }
}
