//! Object dynamics branch: history encoder with a point-cloud shape token,
//! contact aggregation through learnable tokens, and a decoder whose blocks
//! cross-attend first to the history and then to the contact tokens.

use hoi_autograd::{Graph, ParamId, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dims, Prepared};
use crate::him::Him;
use crate::nn::{
    expand_key_mask, positional_encoding, BlockConfig, DecoderBlock, EncoderLayer, FeedForward, Init, LayerNorm, Linear,
    MultiHeadAttention, TimestepEmbedding,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// One aggregation per forward pass, shared by every decoder block.
    #[default]
    Shared,
    /// A separate aggregator (own tokens and attention) per decoder block.
    PerLayer,
}

/// Per-point MLP, max-pool over points, final projection.
#[derive(Clone, Debug)]
pub struct ShapeEncoder {
    pub point1: Linear,
    pub point2: Linear,
    pub out: Linear,
}

impl ShapeEncoder {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            point1: Linear::new(&mut s, "point1", 3, width),
            point2: Linear::new(&mut s, "point2", width, width),
            out: Linear::new(&mut s, "out", width, width),
        }
    }

    /// `M × 3 → 1 × width`
    pub fn forward(&self, g: &mut Graph, cloud: &Tensor) -> Result<Var> {
        if cloud.cols() != 3 || cloud.rows() == 0 {
            return Err(Error::shape("shape point cloud", "M×3 with M ≥ 1", format!("{}×{}", cloud.rows(), cloud.cols())));
        }
        let x = g.input(cloud.clone());
        let h = self.point1.forward(g, x);
        let h = g.silu(h);
        let h = self.point2.forward(g, h);
        let pooled = g.max_rows(h);
        Ok(self.out.forward(g, pooled))
    }
}

/// Self-attention over embedded contact entries together with `Q`
/// learnable tokens; only the token rows are returned.
#[derive(Clone, Debug)]
pub struct ContactAggregator {
    pub entry: Linear,
    pub group_embed: ParamId,
    pub tokens: ParamId,
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub out_norm: LayerNorm,
    pub groups: usize,
    pub num_tokens: usize,
    pub width: usize,
}

impl ContactAggregator {
    pub fn new(init: &mut Init, name: &str, cfg: &BlockConfig, dims: &Dims, num_tokens: usize) -> Self {
        let w = cfg.width;
        let mut s = init.sub(name);
        let entry = Linear::new(&mut s, "entry", 3 * dims.subset_size, w);
        let group_embed = s.uniform("group_embed", dims.groups, w, 1.0 / (w as f64).sqrt());
        let tokens = s.uniform("tokens", num_tokens, w, 1.0);
        Self {
            entry,
            group_embed,
            tokens,
            norm_attn: LayerNorm::new(&mut s, "norm_attn", w),
            attn: MultiHeadAttention::new(&mut s, "attn", w, cfg.heads),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", w),
            ff: FeedForward::new(&mut s, "ff", w),
            out_norm: LayerNorm::new(&mut s, "norm", w),
            groups: dims.groups,
            num_tokens,
            width: w,
        }
    }

    /// `hist` is `(T_p·N) × 3k` (frame-major, then group) with one mask flag
    /// per row; returns `Q × width`.
    pub fn forward(&self, g: &mut Graph, hist: &Tensor, mask: &[bool]) -> Result<Var> {
        if hist.rows() != mask.len() || !hist.rows().is_multiple_of(self.groups) {
            return Err(Error::shape("contact history", format!("{} mask flags, multiple of {} rows", hist.rows(), self.groups), mask.len()));
        }
        if hist.cols() != self.entry.in_dim {
            return Err(Error::shape("contact history width", self.entry.in_dim, hist.cols()));
        }
        let rows = hist.rows();
        let frames = rows / self.groups;
        let mut onehot = Tensor::zeros(rows, self.groups);
        let mut pos = Tensor::zeros(rows, self.width);
        let frame_pos = positional_encoding(frames, self.width);
        for r in 0..rows {
            onehot.set(r, r % self.groups, 1.0);
            pos.row_mut(r).copy_from_slice(frame_pos.row(r / self.groups));
        }
        let h = g.input(hist.clone());
        let e = self.entry.forward(g, h);
        let oh = g.input(onehot);
        let ge = g.param(self.group_embed);
        let ge = g.matmul(oh, ge);
        let e = g.add(e, ge);
        let p = g.input(pos);
        let entries = g.add(e, p);
        let tokens = g.param(self.tokens);
        let all = g.concat_rows(&[entries, tokens]);
        let normed = self.norm_attn.forward(g, all);
        let queries = g.slice_rows(normed, rows, self.num_tokens);
        let mut keys = mask.to_vec();
        keys.extend(std::iter::repeat_n(true, self.num_tokens));
        let full = expand_key_mask(&keys, self.num_tokens);
        let a = self.attn.forward(g, queries, normed, Some(&full));
        let x = g.add(tokens, a);
        let hn = self.norm_ff.forward(g, x);
        let f = self.ff.forward(g, hn);
        let x = g.add(x, f);
        Ok(self.out_norm.forward(g, x))
    }
}

/// Object-side conditioning computed once per sequence.
#[derive(Clone, Debug)]
pub struct ObjectContext {
    /// `(1 + T_p) × width`: shape token then encoded history.
    pub history: Var,
    /// One `Q × width` token set, or one per decoder block.
    pub contact_tokens: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ObjectBranch {
    pub shape: ShapeEncoder,
    pub cond_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub aggregators: Vec<ContactAggregator>,
    pub in_proj: Linear,
    pub time: TimestepEmbedding,
    pub blocks: Vec<DecoderBlock>,
    pub out_norm: LayerNorm,
    pub head: Linear,
    pub dims: Dims,
    pub width: usize,
}

impl ObjectBranch {
    pub const PREFIX: &'static str = "object";

    pub fn new(init: &mut Init, cfg: &BlockConfig, dims: Dims, steps: usize, num_tokens: usize, mode: AggregationMode) -> Self {
        let w = cfg.width;
        let mut enc = init.sub("encoder");
        let shape = ShapeEncoder::new(&mut enc, "shape", w);
        let cond_proj = Linear::new(&mut enc, "cond_proj", dims.object_cond(), w);
        let encoder = (0..cfg.encoder_layers).map(|i| EncoderLayer::new(&mut enc, &format!("layer{i}"), w, cfg.heads)).collect();
        let encoder_norm = LayerNorm::new(&mut enc, "norm", w);
        let count = match mode {
            AggregationMode::Shared => 1,
            AggregationMode::PerLayer => cfg.decoder_layers,
        };
        let mut agg = init.sub("contact");
        let aggregators =
            (0..count).map(|i| ContactAggregator::new(&mut agg, &format!("agg{i}"), cfg, &dims, num_tokens)).collect();
        let mut dec = init.sub("decoder");
        let in_proj = Linear::new(&mut dec, "in_proj", 9, w);
        let time = TimestepEmbedding::new(&mut dec, "time", w, steps);
        let blocks = (0..cfg.decoder_layers).map(|i| DecoderBlock::new(&mut dec, &format!("block{i}"), w, cfg.heads, 2)).collect();
        let out_norm = LayerNorm::new(&mut dec, "norm", w);
        let head = Linear::new(&mut dec, "head", w, 9);
        Self { shape, cond_proj, encoder, encoder_norm, aggregators, in_proj, time, blocks, out_norm, head, dims, width: w }
    }

    pub fn embed_shape(&self, g: &mut Graph, cloud: &Tensor) -> Result<Var> {
        self.shape.forward(g, cloud)
    }

    /// Encodes past human and object poses with the shape token prepended.
    pub fn encode_conditions(&self, g: &mut Graph, ex: &Prepared) -> Result<Var> {
        let cond = &ex.object_cond;
        if cond.shape() != (self.dims.past_len, self.dims.object_cond()) {
            return Err(Error::shape("object conditions", format!("{}×{}", self.dims.past_len, self.dims.object_cond()), format!("{:?}", cond.shape())));
        }
        let shape = self.embed_shape(g, &ex.rest_cloud)?;
        let c = g.input(cond.clone());
        let x = self.cond_proj.forward(g, c);
        let pos = g.input(positional_encoding(cond.rows(), self.width));
        let x = g.add(x, pos);
        let mut x = g.concat_rows(&[shape, x]);
        for layer in &self.encoder {
            x = layer.forward(g, x, None);
        }
        Ok(self.encoder_norm.forward(g, x))
    }

    pub fn aggregate_contacts(&self, g: &mut Graph, ex: &Prepared) -> Result<Vec<Var>> {
        self.aggregators.iter().map(|a| a.forward(g, &ex.contact_hist, &ex.contact_hist_mask)).collect()
    }

    pub fn context(&self, g: &mut Graph, ex: &Prepared) -> Result<ObjectContext> {
        Ok(ObjectContext { history: self.encode_conditions(g, ex)?, contact_tokens: self.aggregate_contacts(g, ex)? })
    }

    /// Input embedding of the noised object state: projection, frame
    /// positions and the timestep embedding.
    pub(crate) fn embed_input(
        g: &mut Graph,
        in_proj: &Linear,
        time: &TimestepEmbedding,
        width: usize,
        o_t: Var,
        t: usize,
    ) -> Result<Var> {
        if t == 0 {
            return Err(Error::Range { what: "diffusion step", value: 0, valid: format!("1..={}", time.steps) });
        }
        let rows = g.shape(o_t).0;
        let temb = time.forward(g, t - 1)?;
        let x = in_proj.forward(g, o_t);
        let pos = g.input(positional_encoding(rows, width));
        let x = g.add(x, pos);
        Ok(g.add_row(x, temb))
    }

    pub(crate) fn tokens_for(&self, ctx: &ObjectContext, layer: usize) -> Var {
        if ctx.contact_tokens.len() == 1 {
            ctx.contact_tokens[0]
        } else {
            ctx.contact_tokens[layer]
        }
    }

    /// Clean object motion `T × 9` from the noised `o_t`. With `him`, the
    /// interaction module runs alongside and is fused into every block.
    pub fn predict(&self, g: &mut Graph, o_t: Var, t: usize, ctx: &ObjectContext, him: Option<(&Him, Var)>) -> Result<Var> {
        let (rows, cols) = g.shape(o_t);
        if (rows, cols) != (self.dims.frames(), 9) {
            return Err(Error::shape("object state", format!("{}×9", self.dims.frames()), format!("{rows}×{cols}")));
        }
        if ctx.contact_tokens.len() != self.aggregators.len() {
            return Err(Error::shape("contact token sets", self.aggregators.len(), ctx.contact_tokens.len()));
        }
        let x = Self::embed_input(g, &self.in_proj, &self.time, self.width, o_t, t)?;
        let x = match him {
            None => {
                let mut x = x;
                for (l, block) in self.blocks.iter().enumerate() {
                    let tok = self.tokens_for(ctx, l);
                    x = block.forward(g, x, &[ctx.history, tok]);
                }
                x
            }
            Some((him, hf)) => him.run(g, self, x, o_t, t, ctx, hf)?,
        };
        let h = self.out_norm.forward(g, x);
        Ok(self.head.forward(g, h))
    }

    /// Parameters of the denoising decoder trunk that the interaction
    /// module copies, in a fixed order.
    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_proj.weight, self.in_proj.bias];
        ids.extend(self.time.param_ids());
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }
}

