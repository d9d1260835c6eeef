//! Complete forecasting models: the decoupled human/object model with the
//! interaction module, a single-branch baseline that denoises human and
//! object state jointly, and a ground-truth oracle used as a test double.

use std::collections::BTreeSet;
use std::rc::Rc;

use hoi_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{HoiSequence, HumanPose, ObjectPose};
use crate::diffusion::{gaussian, make_schedule, q_sample, sample_loop, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::features::{clamp_past, prepare, Dims, Prepared};
use crate::geometry::{RigidTransform, Vec3};
use crate::him::{init_him, Him, HimFusion};
use crate::human::{DenoiseOutput, HistoryDenoiser, HumanBranch};
use crate::losses::{combine, loss_consistency, masked_mse, mse, LossTerms, LossWeights};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{BlockConfig, Init};
use crate::object::{AggregationMode, ObjectBranch, ObjectContext};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWindow {
    /// Past and future frames are noised and reconstructed.
    #[default]
    Full,
    /// Past frames of the noised state are replaced by their clean values.
    FutureOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub human: BlockConfig,
    pub object: BlockConfig,
    /// Number of learnable contact tokens.
    pub contact_tokens: usize,
    pub aggregation: AggregationMode,
    pub him_fusion: HimFusion,
    pub noise_window: NoiseWindow,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            human: BlockConfig::default(),
            object: BlockConfig::default(),
            contact_tokens: 8,
            aggregation: AggregationMode::Shared,
            him_fusion: HimFusion::PerLayer,
            noise_window: NoiseWindow::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.human.validate()?;
        self.object.validate()?;
        if self.contact_tokens == 0 {
            return Err(Error::Config("contact_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 100, schedule: ScheduleKind::Cosine }
    }
}

/// Predicted future frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub human: Vec<HumanPose>,
    pub object: Vec<ObjectPose>,
    /// `future_len × N·k` contact points predicted by the human side.
    pub contacts_human: Vec<Vec<Vec3>>,
    /// Rigid map of the rest-pose contact points by the predicted object poses.
    pub contacts_object: Vec<Vec<Vec3>>,
}

pub trait Forecaster {
    /// Samples future frames for `seq` given its observed past.
    fn forecast(&self, seq: &HoiSequence, seed: u64) -> Result<Forecast>;
}

/// Trainable denoising model.
pub trait DiffusionModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn dims(&self) -> &Dims;
    fn schedule(&self) -> &NoiseSchedule;
    /// Loss terms for one sequence at step `t`; noise is drawn from `rng`.
    fn losses(&self, g: &mut Graph, ex: &Prepared, t: usize, rng: &mut ChaCha8Rng, w: &LossWeights) -> Result<LossTerms>;
    /// Trainable-parameter mask for the given groups; groups the model does
    /// not have contribute nothing.
    fn trainable(&self, groups: &[ParamGroup]) -> Rc<[bool]>;
    /// Hook run before a stage's first step.
    fn begin_stage(&mut self, stage: u8);
    fn checkpoint(&self, stage: u8) -> Checkpoint;
}

/// Parameter sets named by training stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Human,
    Object,
    Him,
}

fn prefix_mask(store: &ParamStore, prefixes: &[&str]) -> Rc<[bool]> {
    store.iter().map(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(&format!("{p}.")))).collect()
}

/// Decodes `T × (dim_h + dim_c + 9)` into the future frames.
fn decode_forecast(x: &Tensor, dims: &Dims, rest_contacts: &[Vec3]) -> Result<Forecast> {
    let (dh, dc) = (dims.dim_h(), dims.dim_c());
    let mut out = Forecast { human: Vec::new(), object: Vec::new(), contacts_human: Vec::new(), contacts_object: Vec::new() };
    for f in dims.past_len..dims.frames() {
        let row = x.row(f);
        out.human.push(HumanPose::from_flat(&row[..dh], dims.joints));
        out.contacts_human.push(row[dh..dh + dc].chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect());
        let raw = ObjectPose::from_flat(&row[dh + dc..]);
        let tf = raw.transform()?;
        out.contacts_object.push(rest_contacts.iter().map(|p| tf.apply(p)).collect());
        out.object.push(ObjectPose::from_transform(&tf));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoopMeta {
    model: ModelConfig,
    diffusion: DiffusionConfig,
    dims: Dims,
    use_him: bool,
    him_active: bool,
}

/// Human branch, object branch and interaction module over one parameter
/// store with prefixes `human.`, `object.` and `him.`.
#[derive(Clone, Debug)]
pub struct CoopModel {
    pub config: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub human: HumanBranch,
    pub object: ObjectBranch,
    pub him: Him,
    /// Whether the three-stage plan includes the interaction module.
    pub use_him: bool,
    /// Whether the interaction module takes part in the forward pass.
    pub him_active: bool,
    schedule: NoiseSchedule,
}

/// Encoded conditions of both branches.
#[derive(Clone, Debug)]
pub struct CoopContext {
    pub human: Var,
    pub object: ObjectContext,
}

impl CoopModel {
    pub const KIND: &'static str = "decoupled";

    pub fn new(config: &ModelConfig, diffusion: &DiffusionConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let schedule = make_schedule(diffusion.steps, diffusion.schedule)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let human = HumanBranch::new(&mut Init::new(&mut store, &mut rng, HumanBranch::PREFIX), &config.human, dims, diffusion.steps);
        let object = ObjectBranch::new(
            &mut Init::new(&mut store, &mut rng, ObjectBranch::PREFIX),
            &config.object,
            dims,
            diffusion.steps,
            config.contact_tokens,
            config.aggregation,
        );
        let him = Him::new(
            &mut Init::new(&mut store, &mut rng, Him::PREFIX),
            &config.object,
            config.human.width,
            diffusion.steps,
            config.him_fusion,
        );
        init_him(&mut store, &object, &him);
        Ok(Self {
            config: config.clone(),
            diffusion: diffusion.clone(),
            dims,
            store,
            human,
            object,
            him,
            use_him: true,
            him_active: false,
            schedule,
        })
    }

    /// Copies the trained object trunk into the interaction module, zeroes
    /// its connectors and switches it on.
    pub fn init_him(&mut self) {
        init_him(&mut self.store, &self.object, &self.him);
        self.him_active = true;
    }

    pub fn context(&self, g: &mut Graph, ex: &Prepared) -> Result<CoopContext> {
        Ok(CoopContext { human: self.human.encode_conditions(g, ex)?, object: self.object.context(g, ex)? })
    }

    /// Runs both denoisers on the noised states; the human branch's final
    /// hidden states drive the interaction module when it is active.
    pub fn denoise(&self, g: &mut Graph, ctx: &CoopContext, x_h: Var, x_o: Var, t: usize) -> Result<(DenoiseOutput, Var)> {
        let h = self.human.predict(g, x_h, t, ctx.human)?;
        let him = if self.him_active { Some((&self.him, h.hidden)) } else { None };
        let o = self.object.predict(g, x_o, t, &ctx.object, him)?;
        Ok((h, o))
    }

    /// Same as [`denoise`](Self::denoise) with externally supplied human
    /// features for the interaction module.
    pub fn predict_object_with(&self, g: &mut Graph, ctx: &ObjectContext, x_o: Var, t: usize, hf: Option<Var>) -> Result<Var> {
        let him = hf.map(|hf| (&self.him, hf));
        self.object.predict(g, x_o, t, ctx, him)
    }

    /// Loss terms for given noise draws.
    pub fn losses_with_noise(
        &self,
        g: &mut Graph,
        ex: &Prepared,
        t: usize,
        eps_h: &Tensor,
        eps_o: &Tensor,
        w: &LossWeights,
    ) -> Result<LossTerms> {
        let mut xh = q_sample(&ex.human_x0, t, eps_h, &self.schedule)?;
        let mut xo = q_sample(&ex.object_x0, t, eps_o, &self.schedule)?;
        if self.config.noise_window == NoiseWindow::FutureOnly {
            clamp_past(&mut xh, &ex.human_x0, self.dims.past_len);
            clamp_past(&mut xo, &ex.object_x0, self.dims.past_len);
        }
        let ctx = self.context(g, ex)?;
        let (xh, xo) = (g.input(xh), g.input(xo));
        let (h, o) = self.denoise(g, &ctx, xh, xo, t)?;
        let lh = masked_mse(g, h.x0_hat, &ex.human_x0, &ex.human_mask)?;
        let lo = mse(g, o, &ex.object_x0)?;
        let (_, ch) = self.human.split(g, h.x0_hat);
        let lc = loss_consistency(g, ch, o, &ex.rest_contacts, &ex.contact_mask)?;
        Ok(combine(g, lh, lo, lc, w))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Self::KIND {
            return Err(Error::Checkpoint(format!("expected a `{}` checkpoint, found `{}`", Self::KIND, ckpt.kind)));
        }
        let meta: CoopMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint(format!("model description: {e}")))?;
        let mut m = Self::new(&meta.model, &meta.diffusion, meta.dims, 0)?;
        load_params(&mut m.store, &ckpt.params)?;
        m.use_him = meta.use_him;
        m.him_active = meta.him_active;
        Ok(m)
    }
}

/// Replaces every value of `dst` by the same-named entry of `src`; both
/// must hold exactly the same names and shapes.
fn load_params(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let a: BTreeSet<&str> = dst.iter().map(|(_, n, _)| n).collect();
    let b: BTreeSet<&str> = src.iter().map(|(_, n, _)| n).collect();
    if a != b {
        let missing: Vec<_> = a.difference(&b).take(3).collect();
        let extra: Vec<_> = b.difference(&a).take(3).collect();
        return Err(Error::Checkpoint(format!("parameter set differs (missing {missing:?}, unexpected {extra:?})")));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let v = src.by_name(&name).expect("names checked above");
        if v.shape() != dst.get(id).shape() {
            return Err(Error::Checkpoint(format!("shape of `{name}`: {:?} vs {:?}", v.shape(), dst.get(id).shape())));
        }
        *dst.get_mut(id) = v.clone();
    }
    Ok(())
}

impl DiffusionModel for CoopModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dims(&self) -> &Dims {
        &self.dims
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn losses(&self, g: &mut Graph, ex: &Prepared, t: usize, rng: &mut ChaCha8Rng, w: &LossWeights) -> Result<LossTerms> {
        let eps_h = gaussian(ex.human_x0.rows(), ex.human_x0.cols(), rng);
        let eps_o = gaussian(ex.object_x0.rows(), ex.object_x0.cols(), rng);
        self.losses_with_noise(g, ex, t, &eps_h, &eps_o, w)
    }

    fn trainable(&self, groups: &[ParamGroup]) -> Rc<[bool]> {
        let prefixes: Vec<&str> = groups
            .iter()
            .filter_map(|g| match g {
                ParamGroup::Human => Some(HumanBranch::PREFIX),
                ParamGroup::Object => Some(ObjectBranch::PREFIX),
                ParamGroup::Him => self.use_him.then_some(Him::PREFIX),
            })
            .collect();
        prefix_mask(&self.store, &prefixes)
    }

    fn begin_stage(&mut self, stage: u8) {
        if stage == 2 && self.use_him {
            self.init_him();
        }
    }

    fn checkpoint(&self, stage: u8) -> Checkpoint {
        let meta = CoopMeta {
            model: self.config.clone(),
            diffusion: self.diffusion.clone(),
            dims: self.dims,
            use_him: self.use_him,
            him_active: self.him_active,
        };
        Checkpoint {
            kind: Self::KIND.into(),
            stage,
            meta: serde_json::to_value(meta).expect("model description serializes"),
            params: self.store.clone(),
        }
    }
}

/// Tensor copies of encoded conditions, reusable across denoising steps.
struct FrozenContext {
    human: Tensor,
    history: Tensor,
    tokens: Vec<Tensor>,
}

impl Forecaster for CoopModel {
    fn forecast(&self, seq: &HoiSequence, seed: u64) -> Result<Forecast> {
        let ex = prepare(seq, &self.dims)?;
        let frozen = {
            let mut g = Graph::new(&self.store);
            let c = self.context(&mut g, &ex)?;
            FrozenContext {
                human: g.value(c.human).clone(),
                history: g.value(c.object.history).clone(),
                tokens: c.object.contact_tokens.iter().map(|&v| g.value(v).clone()).collect(),
            }
        };
        let clean = Tensor::concat_cols(&[&ex.human_x0, &ex.object_x0]);
        let dhc = self.dims.human_state();
        let window = self.config.noise_window;
        let denoiser = |x: &Tensor, t: usize| -> Result<Tensor> {
            let mut x = x.clone();
            if window == NoiseWindow::FutureOnly {
                clamp_past(&mut x, &clean, self.dims.past_len);
            }
            let mut g = Graph::new(&self.store);
            let ctx = CoopContext {
                human: g.input(frozen.human.clone()),
                object: ObjectContext {
                    history: g.input(frozen.history.clone()),
                    contact_tokens: frozen.tokens.iter().map(|t| g.input(t.clone())).collect(),
                },
            };
            let xh = g.input(x.slice_cols(0, dhc));
            let xo = g.input(x.slice_cols(dhc, 9));
            let (h, o) = self.denoise(&mut g, &ctx, xh, xo, t)?;
            Ok(Tensor::concat_cols(&[g.value(h.x0_hat), g.value(o)]))
        };
        let x0 = sample_loop(denoiser, clean.shape(), &self.schedule, seed)?;
        decode_forecast(&x0, &self.dims, &ex.rest_contacts)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointMeta {
    block: BlockConfig,
    diffusion: DiffusionConfig,
    dims: Dims,
    noise_window: NoiseWindow,
}

/// Single denoiser over the concatenated `[pose, contacts, object]` state,
/// conditioned on the same history as the human branch.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub block: BlockConfig,
    pub diffusion: DiffusionConfig,
    pub dims: Dims,
    pub noise_window: NoiseWindow,
    pub store: ParamStore,
    pub net: HistoryDenoiser,
    schedule: NoiseSchedule,
}

impl JointModel {
    pub const KIND: &'static str = "joint";
    pub const PREFIX: &'static str = "joint";

    pub fn new(block: &BlockConfig, diffusion: &DiffusionConfig, dims: Dims, noise_window: NoiseWindow, seed: u64) -> Result<Self> {
        block.validate()?;
        dims.validate()?;
        let schedule = make_schedule(diffusion.steps, diffusion.schedule)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = HistoryDenoiser::new(
            &mut Init::new(&mut store, &mut rng, Self::PREFIX),
            block,
            dims.human_cond(),
            dims.human_state() + ObjectPose::DIM,
            diffusion.steps,
        );
        Ok(Self { block: block.clone(), diffusion: diffusion.clone(), dims, noise_window, store, net, schedule })
    }

    fn clean(ex: &Prepared) -> Tensor {
        Tensor::concat_cols(&[&ex.human_x0, &ex.object_x0])
    }

    pub fn losses_with_noise(&self, g: &mut Graph, ex: &Prepared, t: usize, eps: &Tensor, w: &LossWeights) -> Result<LossTerms> {
        let clean = Self::clean(ex);
        let mut x = q_sample(&clean, t, eps, &self.schedule)?;
        if self.noise_window == NoiseWindow::FutureOnly {
            clamp_past(&mut x, &clean, self.dims.past_len);
        }
        let ctx = self.net.encode(g, &ex.human_cond)?;
        let x = g.input(x);
        let out = self.net.predict(g, x, t, ctx)?.x0_hat;
        let (dhc, dh, dc) = (self.dims.human_state(), self.dims.dim_h(), self.dims.dim_c());
        let h = g.slice_cols(out, 0, dhc);
        let o = g.slice_cols(out, dhc, ObjectPose::DIM);
        let lh = masked_mse(g, h, &ex.human_x0, &ex.human_mask)?;
        let lo = mse(g, o, &ex.object_x0)?;
        let ch = g.slice_cols(out, dh, dc);
        let lc = loss_consistency(g, ch, o, &ex.rest_contacts, &ex.contact_mask)?;
        Ok(combine(g, lh, lo, lc, w))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Self::KIND {
            return Err(Error::Checkpoint(format!("expected a `{}` checkpoint, found `{}`", Self::KIND, ckpt.kind)));
        }
        let meta: JointMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint(format!("model description: {e}")))?;
        let mut m = Self::new(&meta.block, &meta.diffusion, meta.dims, meta.noise_window, 0)?;
        load_params(&mut m.store, &ckpt.params)?;
        Ok(m)
    }
}

impl DiffusionModel for JointModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn dims(&self) -> &Dims {
        &self.dims
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn losses(&self, g: &mut Graph, ex: &Prepared, t: usize, rng: &mut ChaCha8Rng, w: &LossWeights) -> Result<LossTerms> {
        let eps = gaussian(self.dims.frames(), self.dims.human_state() + ObjectPose::DIM, rng);
        self.losses_with_noise(g, ex, t, &eps, w)
    }

    fn trainable(&self, groups: &[ParamGroup]) -> Rc<[bool]> {
        let any = groups.iter().any(|g| matches!(g, ParamGroup::Human | ParamGroup::Object));
        prefix_mask(&self.store, if any { &[Self::PREFIX] } else { &[] })
    }

    fn begin_stage(&mut self, _stage: u8) {}

    fn checkpoint(&self, stage: u8) -> Checkpoint {
        let meta = JointMeta { block: self.block.clone(), diffusion: self.diffusion.clone(), dims: self.dims, noise_window: self.noise_window };
        Checkpoint {
            kind: Self::KIND.into(),
            stage,
            meta: serde_json::to_value(meta).expect("model description serializes"),
            params: self.store.clone(),
        }
    }
}

impl Forecaster for JointModel {
    fn forecast(&self, seq: &HoiSequence, seed: u64) -> Result<Forecast> {
        let ex = prepare(seq, &self.dims)?;
        let ctx = {
            let mut g = Graph::new(&self.store);
            let c = self.net.encode(&mut g, &ex.human_cond)?;
            g.value(c).clone()
        };
        let clean = Self::clean(&ex);
        let denoiser = |x: &Tensor, t: usize| -> Result<Tensor> {
            let mut x = x.clone();
            if self.noise_window == NoiseWindow::FutureOnly {
                clamp_past(&mut x, &clean, self.dims.past_len);
            }
            let mut g = Graph::new(&self.store);
            let c = g.input(ctx.clone());
            let xi = g.input(x);
            let out = self.net.predict(&mut g, xi, t, c)?;
            Ok(g.value(out.x0_hat).clone())
        };
        let x0 = sample_loop(denoiser, clean.shape(), &self.schedule, seed)?;
        decode_forecast(&x0, &self.dims, &ex.rest_contacts)
    }
}

/// Returns the recorded future frames; contacts on both sides are the rigid
/// map of the true object poses.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthOracle;

impl GroundTruthOracle {
    pub const KIND: &'static str = "oracle";

    pub fn checkpoint() -> Checkpoint {
        Checkpoint { kind: Self::KIND.into(), stage: 0, meta: serde_json::json!({}), params: ParamStore::new() }
    }
}

impl Forecaster for GroundTruthOracle {
    fn forecast(&self, seq: &HoiSequence, _seed: u64) -> Result<Forecast> {
        let k = seq.subset_size().unwrap_or(1);
        let rest = seq.rest_contacts(k);
        let mut out = Forecast { human: Vec::new(), object: Vec::new(), contacts_human: Vec::new(), contacts_object: Vec::new() };
        for f in seq.past_len..seq.len() {
            let tf: RigidTransform = seq.object[f].transform()?;
            let c: Vec<Vec3> = rest.iter().map(|p| tf.apply(p)).collect();
            out.human.push(seq.human[f].clone());
            out.object.push(seq.object[f]);
            out.contacts_human.push(c.clone());
            out.contacts_object.push(c);
        }
        Ok(out)
    }
}

/// Rebuilds whichever model a checkpoint describes.
pub fn forecaster_from_checkpoint(ckpt: &Checkpoint) -> Result<Box<dyn Forecaster>> {
    match ckpt.kind.as_str() {
        CoopModel::KIND => Ok(Box::new(CoopModel::from_checkpoint(ckpt)?)),
        JointModel::KIND => Ok(Box::new(JointModel::from_checkpoint(ckpt)?)),
        GroundTruthOracle::KIND => Ok(Box::new(GroundTruthOracle)),
        other => Err(Error::Checkpoint(format!("unknown model kind `{other}`"))),
    }
}
