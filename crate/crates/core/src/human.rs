//! Human dynamics branch: a transformer encoder over the observed history
//! and a decoder that maps the noised `[pose, contacts]` sequence back to its
//! clean value.

use hoi_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::features::{Dims, Prepared};
use crate::nn::{positional_encoding, BlockConfig, DecoderBlock, EncoderLayer, Init, LayerNorm, Linear, TimestepEmbedding};

/// History encoder plus single-context denoising decoder. Used for the
/// human branch and for the single-branch baseline.
#[derive(Clone, Debug)]
pub struct HistoryDenoiser {
    pub cond_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub in_proj: Linear,
    pub time: TimestepEmbedding,
    pub blocks: Vec<DecoderBlock>,
    pub out_norm: LayerNorm,
    pub head: Linear,
    pub state_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
}

/// Decoder output and the normalized hidden states that feed the head.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseOutput {
    pub x0_hat: Var,
    pub hidden: Var,
}

impl HistoryDenoiser {
    pub fn new(init: &mut Init, cfg: &BlockConfig, cond_dim: usize, state_dim: usize, steps: usize) -> Self {
        let w = cfg.width;
        let mut enc = init.sub("encoder");
        let cond_proj = Linear::new(&mut enc, "cond_proj", cond_dim, w);
        let encoder = (0..cfg.encoder_layers).map(|i| EncoderLayer::new(&mut enc, &format!("layer{i}"), w, cfg.heads)).collect();
        let encoder_norm = LayerNorm::new(&mut enc, "norm", w);
        let mut dec = init.sub("decoder");
        let in_proj = Linear::new(&mut dec, "in_proj", state_dim, w);
        let time = TimestepEmbedding::new(&mut dec, "time", w, steps);
        let blocks = (0..cfg.decoder_layers).map(|i| DecoderBlock::new(&mut dec, &format!("block{i}"), w, cfg.heads, 1)).collect();
        let out_norm = LayerNorm::new(&mut dec, "norm", w);
        let head = Linear::new(&mut dec, "head", w, state_dim);
        Self { cond_proj, encoder, encoder_norm, in_proj, time, blocks, out_norm, head, state_dim, cond_dim, width: w }
    }

    /// `T_p × cond_dim → T_p × width`
    pub fn encode(&self, g: &mut Graph, cond: &Tensor) -> Result<Var> {
        if cond.cols() != self.cond_dim {
            return Err(Error::shape("history conditions", self.cond_dim, cond.cols()));
        }
        let c = g.input(cond.clone());
        let x = self.cond_proj.forward(g, c);
        let pos = g.input(positional_encoding(cond.rows(), self.width));
        let mut x = g.add(x, pos);
        for layer in &self.encoder {
            x = layer.forward(g, x, None);
        }
        Ok(self.encoder_norm.forward(g, x))
    }

    /// `t` is the 1-based diffusion step.
    pub fn predict(&self, g: &mut Graph, x_t: Var, t: usize, context: Var) -> Result<DenoiseOutput> {
        let (rows, cols) = g.shape(x_t);
        if cols != self.state_dim {
            return Err(Error::shape("noised state", self.state_dim, cols));
        }
        if t == 0 {
            return Err(Error::Range { what: "diffusion step", value: 0, valid: format!("1..={}", self.time.steps) });
        }
        let temb = self.time.forward(g, t - 1)?;
        let x = self.in_proj.forward(g, x_t);
        let pos = g.input(positional_encoding(rows, self.width));
        let x = g.add(x, pos);
        let mut x = g.add_row(x, temb);
        for block in &self.blocks {
            x = block.forward(g, x, &[context]);
        }
        let hidden = self.out_norm.forward(g, x);
        let x0_hat = self.head.forward(g, hidden);
        Ok(DenoiseOutput { x0_hat, hidden })
    }
}

/// Human branch: conditions are past poses, object poses, contacts and
/// contact masks; the state is `[pose, contacts]` over all frames.
#[derive(Clone, Debug)]
pub struct HumanBranch {
    pub net: HistoryDenoiser,
    pub dims: Dims,
}

impl HumanBranch {
    pub const PREFIX: &'static str = "human";

    pub fn new(init: &mut Init, cfg: &BlockConfig, dims: Dims, steps: usize) -> Self {
        let net = HistoryDenoiser::new(init, cfg, dims.human_cond(), dims.human_state(), steps);
        Self { net, dims }
    }

    pub fn encode_conditions(&self, g: &mut Graph, ex: &Prepared) -> Result<Var> {
        if ex.human_cond.rows() != self.dims.past_len {
            return Err(Error::shape("human history frames", self.dims.past_len, ex.human_cond.rows()));
        }
        self.net.encode(g, &ex.human_cond)
    }

    /// Returns the clean-state prediction (`[pose, contacts]` per frame) and
    /// the final-layer hidden states.
    pub fn predict(&self, g: &mut Graph, x_t: Var, t: usize, context: Var) -> Result<DenoiseOutput> {
        let rows = g.shape(x_t).0;
        if rows != self.dims.frames() {
            return Err(Error::shape("human frames", self.dims.frames(), rows));
        }
        self.net.predict(g, x_t, t, context)
    }

    /// Splits a prediction into its pose and contact channels.
    pub fn split(&self, g: &mut Graph, out: Var) -> (Var, Var) {
        let (dh, dc) = (self.dims.dim_h(), self.dims.dim_c());
        (g.slice_cols(out, 0, dh), g.slice_cols(out, dh, dc))
    }
}
