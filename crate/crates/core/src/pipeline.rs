//! End-to-end operations behind the command-line tool. Each function is
//! deterministic under its inputs and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_dataset, HoiSequence, PredictedContacts};
use crate::error::{Error, Result};
use crate::features::{prepare, Dims, Prepared};
use crate::geometry::Vec3;
use crate::losses::LossWeights;
use crate::metrics::{evaluate, EvalReport, Metrics};
use crate::model::{forecaster_from_checkpoint, CoopModel, DiffusionModel, Forecast, Forecaster, JointModel};
use crate::nn::checkpoint::{self, Checkpoint};
use crate::training::{train, LogRecord, TrainConfig};

pub const LOG_FILE: &str = "loss.log";

pub fn stage_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

pub fn generate(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<HoiSequence>> {
    if count == 0 {
        return Err(Error::Config("empty dataset requested".into()));
    }
    generate_dataset(&cfg.data.generator, count, seed)
}

/// One-line description of sequence count and contact statistics.
pub fn dataset_summary(seqs: &[HoiSequence]) -> String {
    let frames: usize = seqs.iter().map(HoiSequence::len).sum();
    let contact_frames: usize = seqs.iter().map(|s| s.contact.active_frames()).sum();
    let active: usize = seqs.iter().flat_map(|s| &s.contact.mask).map(|m| m.iter().filter(|&&b| b).count()).sum();
    let per_frame = if contact_frames > 0 { active as f64 / contact_frames as f64 } else { 0.0 };
    format!(
        "{} sequences, {frames} frames, {contact_frames} frames in contact, {per_frame:.2} active groups per contact frame",
        seqs.len()
    )
}

pub fn prepare_all(seqs: &[HoiSequence], dims: &Dims) -> Result<Vec<Prepared>> {
    seqs.iter().map(|s| prepare(s, dims)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// First stage run by this call.
    pub first_stage: u8,
    /// Log records produced by this call.
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Latest stage checkpoint present in `dir`.
pub fn latest_stage(dir: &Path) -> Option<u8> {
    (1..=3).rev().find(|&s| stage_checkpoint_path(dir, s).is_file())
}

/// Trains the decoupled model through all stages, writing a checkpoint per
/// stage and appending to the loss log. With `resume`, continues after the
/// latest stage checkpoint in `out_dir` and drops log lines of stages that
/// had not finished.
pub fn train_run(cfg: &RunConfig, data: &[HoiSequence], out_dir: &Path, seed: u64, resume: bool) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let dims = cfg.dims();
    let prepared = prepare_all(data, &dims)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let done = if resume { latest_stage(out_dir) } else { None };
    let (mut model, first_stage) = match done {
        Some(stage) => {
            let ckpt = checkpoint::load(&stage_checkpoint_path(out_dir, stage))?;
            let model = CoopModel::from_checkpoint(&ckpt)?;
            let kept = match fs::read_to_string(&log_path) {
                Ok(text) => keep_completed(&text, stage)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
                Err(e) => return Err(Error::io(&log_path, e)),
            };
            fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
            (model, stage + 1)
        }
        None => {
            fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
            (CoopModel::new(&cfg.model, &cfg.diffusion, dims, seed)?, 1)
        }
    };
    let mut checkpoints = Vec::new();
    if first_stage > 3 {
        return Ok(TrainSummary { first_stage, records: Vec::new(), checkpoints });
    }
    let mut on_stage = |stage: u8, m: &CoopModel, records: &[LogRecord]| -> Result<()> {
        let mut text = String::new();
        for r in records {
            let _ = writeln!(text, "{r}");
        }
        let mut f = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        let path = stage_checkpoint_path(out_dir, stage);
        checkpoint::save(&path, &m.checkpoint(stage))?;
        checkpoints.push(path);
        Ok(())
    };
    let records = train(&mut model, &prepared, &cfg.training, seed, first_stage, &mut on_stage)?;
    Ok(TrainSummary { first_stage, records, checkpoints })
}

fn keep_completed(log: &str, last_stage: u8) -> Result<String> {
    let mut out = String::new();
    for (i, line) in log.lines().enumerate() {
        let r: LogRecord = line.parse().map_err(|e| match e {
            Error::Parse { field, message, .. } => Error::Parse { line: i + 1, field, message },
            other => other,
        })?;
        if r.stage <= last_stage {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Replaces the future frames of `seq` by `forecast` and attaches the
/// predicted contact trajectories.
pub fn apply_forecast(seq: &HoiSequence, forecast: Forecast) -> HoiSequence {
    let mut out = seq.clone();
    let past = seq.past_len;
    out.human.truncate(past);
    out.human.extend(forecast.human);
    out.object.truncate(past);
    out.object.extend(forecast.object);
    out.prediction =
        Some(PredictedContacts { contacts_human: forecast.contacts_human, contacts_object: forecast.contacts_object });
    out
}

/// Forecasts every sequence; per-sequence seeds are drawn in order from a
/// generator seeded with `seed`.
pub fn sample_with(model: &dyn Forecaster, data: &[HoiSequence], seed: u64) -> Result<Vec<HoiSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|seq| {
            let s: u64 = rng.random();
            Ok(apply_forecast(seq, model.forecast(seq, s)?))
        })
        .collect()
}

pub fn sample_run(ckpt: &Checkpoint, data: &[HoiSequence], seed: u64) -> Result<Vec<HoiSequence>> {
    sample_with(forecaster_from_checkpoint(ckpt)?.as_ref(), data, seed)
}

pub fn eval_run(ckpt: &Checkpoint, data: &[HoiSequence], seed: u64, samples_per_sequence: usize) -> Result<EvalReport> {
    evaluate(forecaster_from_checkpoint(ckpt)?.as_ref(), data, seed, samples_per_sequence)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Held-out metrics, one entry per seed.
    pub metrics: Vec<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    /// Per seed: whether the full model, right after its interaction module
    /// was initialized, forecast exactly what the model without it did.
    pub him_identity: Vec<bool>,
}

pub const VARIANT_NAMES: [&str; 4] = ["joint", "decoupled", "decoupled+ccc", "decoupled+ccc+him"];

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "variant", "seed", "MPJPE-H", "Trans.", "Rot.", "Pene.", "Gap"
        );
        for v in &self.variants {
            for (seed, m) in self.seeds.iter().zip(&v.metrics) {
                let gap = m.contact_gap.map_or("-".to_string(), |g| format!("{g:.2}"));
                let _ = writeln!(
                    s,
                    "{:<18} {seed:>6} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {gap:>10}",
                    v.name, m.mpjpe_h, m.trans_err, m.rot_err, m.pene
                );
            }
        }
        for (seed, ok) in self.seeds.iter().zip(&self.him_identity) {
            let _ = writeln!(s, "seed {seed}: interaction module identity at init {}", if *ok { "holds" } else { "FAILS" });
        }
        s
    }
}

/// Trains and evaluates the four ablation variants for every configured
/// seed. The last `cfg.data.holdout` sequences are held out.
///
/// Variants: a single denoiser over the joint state; the decoupled model
/// without the consistency term; with it; with it and the interaction
/// module. The last two share their first stage.
pub fn ablate(cfg: &RunConfig, data: &[HoiSequence], progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let holdout = cfg.data.holdout;
    if holdout == 0 || data.len() <= holdout {
        return Err(Error::Config(format!("need more than {holdout} sequences and a nonzero holdout, got {}", data.len())));
    }
    let (train_seqs, eval_seqs) = data.split_at(data.len() - holdout);
    let dims = cfg.dims();
    let prepared = prepare_all(train_seqs, &dims)?;
    let samples = cfg.eval.samples_per_sequence;
    let no_ccc = TrainConfig { weights: LossWeights { lambda_c: 0.0, ..cfg.training.weights }, ..cfg.training.clone() };
    let mut variants: Vec<VariantResult> =
        VARIANT_NAMES.iter().map(|n| VariantResult { name: (*n).into(), metrics: Vec::new() }).collect();
    let mut him_identity = Vec::new();
    let mut none = |_: u8, _: &_, _: &[LogRecord]| Ok(());
    for &seed in &cfg.ablation.seeds {
        progress(&format!("seed {seed}: joint"));
        let mut joint = JointModel::new(&cfg.model.human, &cfg.diffusion, dims, cfg.model.noise_window, seed)?;
        train(&mut joint, &prepared, &no_ccc, seed, 1, &mut |_, _, _| Ok(()))?;
        variants[0].metrics.push(evaluate(&joint, eval_seqs, seed, samples)?.mean);

        progress(&format!("seed {seed}: decoupled"));
        let mut plain = CoopModel::new(&cfg.model, &cfg.diffusion, dims, seed)?;
        plain.use_him = false;
        train(&mut plain, &prepared, &no_ccc, seed, 1, &mut none)?;
        variants[1].metrics.push(evaluate(&plain, eval_seqs, seed, samples)?.mean);

        progress(&format!("seed {seed}: decoupled+ccc"));
        let mut base = CoopModel::new(&cfg.model, &cfg.diffusion, dims, seed)?;
        let stage1 = TrainConfig {
            stages: [cfg.training.stages[0], Default::default(), Default::default()],
            ..cfg.training.clone()
        };
        crate::training::run_stage(&mut base, &prepared, &stage1, 1, seed, 0, &mut |_| {})?;
        let mut ccc = base.clone();
        ccc.use_him = false;
        let mut full = base;
        full.init_him();
        let mut same = true;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seq in eval_seqs {
            let s: u64 = rng.random();
            same &= ccc.forecast(seq, s)? == full.forecast(seq, s)?;
        }
        him_identity.push(same);
        train(&mut ccc, &prepared, &cfg.training, seed, 2, &mut none)?;
        variants[2].metrics.push(evaluate(&ccc, eval_seqs, seed, samples)?.mean);

        progress(&format!("seed {seed}: decoupled+ccc+him"));
        train(&mut full, &prepared, &cfg.training, seed, 2, &mut none)?;
        variants[3].metrics.push(evaluate(&full, eval_seqs, seed, samples)?.mean);
    }
    Ok(AblationReport { seeds: cfg.ablation.seeds.clone(), variants, him_identity })
}

pub const PLOT_SIZE: f64 = 400.0;
pub const PLOT_MARGIN: f64 = 20.0;

/// Front-view projection (x right, y up) of every point into the plot
/// canvas, fitted to the bounding box of all points.
pub struct Projection {
    min: (f64, f64),
    scale: f64,
}

impl Projection {
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points {
            lo = (lo.0.min(p.x), lo.1.min(p.y));
            hi = (hi.0.max(p.x), hi.1.max(p.y));
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1);
        let scale = if span > 0.0 { (PLOT_SIZE - 2.0 * PLOT_MARGIN) / span } else { 1.0 };
        Self { min: lo, scale }
    }

    pub fn apply(&self, p: &Vec3) -> (f64, f64) {
        (PLOT_MARGIN + (p.x - self.min.0) * self.scale, PLOT_SIZE - PLOT_MARGIN - (p.y - self.min.1) * self.scale)
    }
}

fn polyline(s: &mut String, attr: &str, proj: &Projection, pts: &[Vec3]) {
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = proj.apply(p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    let _ = writeln!(s, "<polyline {attr} points=\"{}\"/>", coords.join(" "));
}

/// Joint and centroid trajectories: the full ground-truth sequence in gray
/// and the predicted future in red.
pub fn plot_svg(pred: &HoiSequence, gt: &HoiSequence) -> Result<String> {
    let frames = |s: &HoiSequence| s.human.len().min(s.object.len());
    if frames(pred) != gt.len() || frames(gt) != gt.len() || pred.num_joints() != gt.num_joints() || pred.past_len != gt.past_len
    {
        return Err(Error::shape("prediction and ground truth", format!("{} frames", gt.len()), format!("{} frames", frames(pred))));
    }
    let future = pred.past_len..pred.len();
    let all = gt
        .human
        .iter()
        .chain(&pred.human[future.clone()])
        .flat_map(|h| &h.joint_positions)
        .chain(gt.object.iter().map(|o| &o.centroid))
        .chain(pred.object[future.clone()].iter().map(|o| &o.centroid));
    let proj = Projection::fit(all);
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_SIZE}\" height=\"{PLOT_SIZE}\">");
    let _ = writeln!(s, "<rect width=\"{PLOT_SIZE}\" height=\"{PLOT_SIZE}\" fill=\"white\"/>");
    for (id, seq, frames, color) in [("gt", gt, 0..gt.len(), "#888888"), ("pred", pred, future, "#cc2222")] {
        let _ = writeln!(s, "<g id=\"{id}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1\">");
        for j in 0..seq.num_joints() {
            let pts: Vec<Vec3> = seq.human[frames.clone()].iter().map(|h| h.joint_positions[j]).collect();
            polyline(&mut s, &format!("data-joint=\"{j}\""), &proj, &pts);
        }
        let pts: Vec<Vec3> = seq.object[frames.clone()].iter().map(|o| o.centroid).collect();
        polyline(&mut s, "data-centroid=\"\" stroke-width=\"2\"", &proj, &pts);
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

/// Writes `seq_<i>.svg` per sequence pair into `out_dir`.
pub fn plot_run(preds: &[HoiSequence], gt: &[HoiSequence], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if preds.len() != gt.len() {
        return Err(Error::shape("sequence count", gt.len(), preds.len()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    preds
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| {
            let path = out_dir.join(format!("seq_{i:04}.svg"));
            fs::write(&path, plot_svg(p, g)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
