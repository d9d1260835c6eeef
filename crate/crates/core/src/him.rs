//! Human-driven interaction module: a trainable copy of the object decoder
//! trunk that receives human-branch features through zero-initialized
//! connectors and is fused back into the object stream additively.
//!
//! Per decoder layer `l`:
//! `z' = z + In_l(hf)`, `z ← HimBlock_l(z')`, `x ← ObjBlock_l(x) + Out_l(z)`.
//! With [`HimFusion::FinalOnly`] a single output connector is applied after
//! the last layer instead.

use hoi_autograd::{Graph, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, DecoderBlock, Init, Linear, TimestepEmbedding, ZeroLinear};
use crate::object::{ObjectBranch, ObjectContext};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HimFusion {
    #[default]
    PerLayer,
    FinalOnly,
}

#[derive(Clone, Debug)]
pub struct Him {
    pub in_proj: Linear,
    pub time: TimestepEmbedding,
    pub blocks: Vec<DecoderBlock>,
    pub in_connectors: Vec<ZeroLinear>,
    pub out_connectors: Vec<ZeroLinear>,
    pub fusion: HimFusion,
    pub width: usize,
    pub human_width: usize,
}

impl Him {
    pub const PREFIX: &'static str = "him";

    /// Same trunk layout as the object decoder; weights are filled in by
    /// [`init_him`].
    pub fn new(init: &mut Init, cfg: &BlockConfig, human_width: usize, steps: usize, fusion: HimFusion) -> Self {
        let w = cfg.width;
        let mut dec = init.sub("decoder");
        let in_proj = Linear::new(&mut dec, "in_proj", 9, w);
        let time = TimestepEmbedding::new(&mut dec, "time", w, steps);
        let blocks = (0..cfg.decoder_layers).map(|i| DecoderBlock::new(&mut dec, &format!("block{i}"), w, cfg.heads, 2)).collect();
        let mut conn = init.sub("connector");
        let in_connectors =
            (0..cfg.decoder_layers).map(|i| ZeroLinear::new(&mut conn, &format!("in{i}"), human_width, w)).collect();
        let outs = match fusion {
            HimFusion::PerLayer => cfg.decoder_layers,
            HimFusion::FinalOnly => 1,
        };
        let out_connectors = (0..outs).map(|i| ZeroLinear::new(&mut conn, &format!("out{i}"), w, w)).collect();
        Self { in_proj, time, blocks, in_connectors, out_connectors, fusion, width: w, human_width }
    }

    /// Copied trunk parameters, in the order of
    /// [`ObjectBranch::trunk_param_ids`].
    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_proj.weight, self.in_proj.bias];
        ids.extend(self.time.param_ids());
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }

    pub fn connector_param_ids(&self) -> Vec<ParamId> {
        self.in_connectors.iter().chain(&self.out_connectors).flat_map(ZeroLinear::param_ids).collect()
    }

    pub fn in_bias_ids(&self) -> Vec<ParamId> {
        self.in_connectors.iter().map(|c| c.0.bias).collect()
    }

    pub fn out_connector_ids(&self) -> Vec<ParamId> {
        self.out_connectors.iter().flat_map(ZeroLinear::param_ids).collect()
    }

    /// Runs the object decoder trunk with the interaction stream alongside.
    /// `x` is the embedded object input; `hf` holds `T × human_width`
    /// human features.
    pub(crate) fn run(
        &self,
        g: &mut Graph,
        object: &ObjectBranch,
        x: Var,
        o_t: Var,
        t: usize,
        ctx: &ObjectContext,
        hf: Var,
    ) -> Result<Var> {
        let (rows, cols) = g.shape(hf);
        if (rows, cols) != (object.dims.frames(), self.human_width) {
            return Err(Error::shape(
                "human features",
                format!("{}×{}", object.dims.frames(), self.human_width),
                format!("{rows}×{cols}"),
            ));
        }
        let mut z = ObjectBranch::embed_input(g, &self.in_proj, &self.time, self.width, o_t, t)?;
        let mut x = x;
        for (l, (obj_block, him_block)) in object.blocks.iter().zip(&self.blocks).enumerate() {
            let tok = object.tokens_for(ctx, l);
            let inj = self.in_connectors[l].forward(g, hf);
            let zin = g.add(z, inj);
            z = him_block.forward(g, zin, &[ctx.history, tok]);
            x = obj_block.forward(g, x, &[ctx.history, tok]);
            if self.fusion == HimFusion::PerLayer {
                let fused = self.out_connectors[l].forward(g, z);
                x = g.add(x, fused);
            }
        }
        if self.fusion == HimFusion::FinalOnly {
            let fused = self.out_connectors[0].forward(g, z);
            x = g.add(x, fused);
        }
        Ok(x)
    }
}

/// Copies the object decoder trunk into the interaction module and zeroes
/// every connector. The object branch is not modified.
pub fn init_him(store: &mut ParamStore, object: &ObjectBranch, him: &Him) {
    let src = object.trunk_param_ids();
    let dst = him.trunk_param_ids();
    assert_eq!(src.len(), dst.len(), "interaction module must mirror the object trunk");
    for (s, d) in src.into_iter().zip(dst) {
        let value = store.get(s).clone();
        assert_eq!(value.shape(), store.get(d).shape(), "mirrored parameter shapes");
        *store.get_mut(d) = value;
    }
    for id in him.connector_param_ids() {
        let t = store.get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
