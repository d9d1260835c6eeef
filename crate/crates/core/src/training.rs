//! Three-stage optimization: both branches first, then the interaction module
//! alone with the branches frozen, then everything together.

use std::fmt;
use std::str::FromStr;

use hoi_autograd::{clip_grad_norm, Adam, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Prepared;
use crate::losses::{LossValues, LossWeights};
use crate::model::{DiffusionModel, ParamGroup};
use crate::nn::checkpoint::snap_to_f32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { steps: 1000, learning_rate: 1e-4 }
    }
}

/// One stage of the schedule. The trainable groups are fixed by the stage
/// number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub steps: usize,
    pub learning_rate: f64,
}

impl StagePlan {
    pub fn trainable(&self) -> &'static [ParamGroup] {
        match self.stage {
            1 => &[ParamGroup::Human, ParamGroup::Object],
            2 => &[ParamGroup::Him],
            _ => &[ParamGroup::Human, ParamGroup::Object, ParamGroup::Him],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stages: [StageConfig; 3],
    pub weights: LossWeights,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// A log record is kept every `log_every` steps and at the end of each
    /// stage.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: [StageConfig::default(); 3],
            weights: LossWeights::default(),
            batch_size: 8,
            clip_norm: 1.0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::Config(format!("stage {} learning_rate must be positive, got {}", i + 1, s.learning_rate)));
            }
        }
        Ok(())
    }

    pub fn plan(&self, stage: u8) -> StagePlan {
        let s = self.stages[usize::from(stage - 1)];
        StagePlan { stage, steps: s.steps, learning_rate: s.learning_rate }
    }
}

/// One loss-log line. Steps count globally across stages, starting at 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub losses: LossValues,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "step {} stage {} L_human {} L_object {} L_consistency {} L_all {}",
            self.step, self.stage, l.human, l.object, l.consistency, l.all
        )
    }
}

impl FromStr for LogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |field: &str, message: String| Error::Parse { line: 0, field: field.into(), message };
        let tok: Vec<&str> = line.split_whitespace().collect();
        let keys = ["step", "stage", "L_human", "L_object", "L_consistency", "L_all"];
        if tok.len() != 12 {
            return Err(bad("log", format!("expected 12 tokens, got {}", tok.len())));
        }
        for (i, k) in keys.iter().enumerate() {
            if tok[2 * i] != *k {
                return Err(bad(k, format!("found `{}`", tok[2 * i])));
            }
        }
        let num = |i: usize| -> Result<f64> { tok[2 * i + 1].parse().map_err(|e| bad(keys[i], format!("{e}"))) };
        Ok(Self {
            step: tok[1].parse().map_err(|e| bad("step", format!("{e}")))?,
            stage: tok[3].parse().map_err(|e| bad("stage", format!("{e}")))?,
            losses: LossValues { human: num(2)?, object: num(3)?, consistency: num(4)?, all: num(5)? },
        })
    }
}

/// Whether `stage` has any parameters to update for this model.
pub fn stage_runs<M: DiffusionModel + ?Sized>(model: &M, plan: &StagePlan) -> bool {
    plan.steps > 0 && model.trainable(plan.trainable()).iter().any(|&b| b)
}

fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(stage));
    rng
}

/// Runs one stage. `step0` is the global step count before the stage.
/// Parameters are rounded to `f32` at the end so the stored checkpoint is
/// exactly the state the next stage continues from.
pub fn run_stage<M: DiffusionModel + ?Sized>(
    model: &mut M,
    data: &[Prepared],
    cfg: &TrainConfig,
    stage: u8,
    seed: u64,
    step0: u64,
    log: &mut dyn FnMut(LogRecord),
) -> Result<u64> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let plan = cfg.plan(stage);
    model.begin_stage(stage);
    if !stage_runs(model, &plan) {
        return Ok(step0);
    }
    let mask = model.trainable(plan.trainable());
    let mut rng = stage_rng(seed, stage);
    let mut adam = Adam::new(plan.learning_rate);
    let steps = model.schedule().steps();
    let inv = 1.0 / cfg.batch_size as f64;
    let mut step = step0;
    for i in 0..plan.steps {
        step += 1;
        let mut total = LossValues::default();
        let mut grads = None;
        for _ in 0..cfg.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=steps);
            let mut g = Graph::with_trainable(model.store(), mask.clone());
            let terms = model.losses(&mut g, ex, t, &mut rng, &cfg.weights)?;
            let v = terms.values(&g);
            if !v.all.is_finite() {
                return Err(Error::NanLoss { stage, step });
            }
            total.add(&v);
            let gr = g.backward(terms.all);
            match grads.as_mut() {
                None => grads = Some(gr),
                Some(acc) => acc.accumulate(gr),
            }
        }
        let mut grads = grads.expect("batch_size is at least 1");
        grads.scale(inv);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        adam.step(model.store_mut(), &grads);
        if (i + 1) % cfg.log_every == 0 || i + 1 == plan.steps {
            log(LogRecord { step, stage, losses: total.scaled(inv) });
        }
    }
    snap_to_f32(model.store_mut());
    Ok(step)
}

/// Global step count after the stages before `first_stage`.
pub fn steps_before<M: DiffusionModel + ?Sized>(model: &M, cfg: &TrainConfig, first_stage: u8) -> u64 {
    (1..first_stage).map(|s| cfg.plan(s)).filter(|p| stage_runs(model, p)).map(|p| p.steps as u64).sum()
}

/// Runs stages `first_stage..=3`, calling `on_stage` after each with the
/// stage number and the records it produced.
pub fn train<M: DiffusionModel + ?Sized>(
    model: &mut M,
    data: &[Prepared],
    cfg: &TrainConfig,
    seed: u64,
    first_stage: u8,
    on_stage: &mut dyn FnMut(u8, &M, &[LogRecord]) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if !(1..=3).contains(&first_stage) {
        return Err(Error::Range { what: "first stage", value: usize::from(first_stage), valid: "1..=3".into() });
    }
    let mut step = steps_before(model, cfg, first_stage);
    let mut all = Vec::new();
    for stage in first_stage..=3 {
        let mut records = Vec::new();
        step = run_stage(model, data, cfg, stage, seed, step, &mut |r| records.push(r))?;
        on_stage(stage, model, &records)?;
        all.extend(records);
    }
    Ok(all)
}

/// Mean loss terms over every sequence at fixed, seed-determined steps and
/// noise draws.
pub fn evaluate_loss<M: DiffusionModel + ?Sized>(
    model: &M,
    data: &[Prepared],
    weights: &LossWeights,
    seed: u64,
    draws: usize,
) -> Result<LossValues> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = model.schedule().steps();
    let mut total = LossValues::default();
    let mut n = 0usize;
    for ex in data {
        for _ in 0..draws {
            let t = rng.random_range(1..=steps);
            let mut g = Graph::new(model.store());
            let terms = model.losses(&mut g, ex, t, &mut rng, weights)?;
            total.add(&terms.values(&g));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("no loss draws requested".into()));
    }
    Ok(total.scaled(1.0 / n as f64))
}
