mod common;

use hoi_autograd::{Graph, ParamStore, Tensor};
use hoi_core::diffusion::gaussian;
use hoi_core::geometry::{axis_angle, matrix_to_rot6d, Vec3};
use hoi_core::losses::{loss_consistency, masked_mse, LossWeights};
use hoi_core::model::{CoopModel, DiffusionModel};
use hoi_core::nn::checkpoint;
use hoi_core::training::{evaluate_loss, run_stage, train, LogRecord, StageConfig, TrainConfig};
use hoi_core::Error;
use proptest::prelude::{prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_config(steps: [usize; 3]) -> TrainConfig {
    TrainConfig {
        stages: steps.map(|steps| StageConfig { steps, learning_rate: 1e-3 }),
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn weighted_sum_recomposes_from_its_terms() {
    let m = common::model(1);
    let ex = &common::prepared(&common::sequences(1, 3))[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eh = gaussian(ex.human_x0.rows(), ex.human_x0.cols(), &mut rng);
    let eo = gaussian(ex.object_x0.rows(), 9, &mut rng);
    let values = |w: LossWeights| {
        let mut g = Graph::new(&m.store);
        m.losses_with_noise(&mut g, ex, 4, &eh, &eo, &w).unwrap().values(&g)
    };
    let w = |h, o, c| LossWeights { lambda_h: h, lambda_o: o, lambda_c: c };
    let only_h = values(w(1.0, 0.0, 0.0));
    assert_eq!(only_h.all, only_h.human);
    assert_eq!(values(w(0.0, 0.0, 0.0)).all, 0.0);
    let ones = values(w(1.0, 1.0, 1.0));
    assert!(ones.consistency > 0.0);
    assert!((ones.all - (ones.human + ones.object + ones.consistency)).abs() < 1e-10);
    let a = values(w(1.0, 1.0, 0.25)).all;
    let b = values(w(1.0, 1.0, 2.25)).all;
    assert!((b - a - 2.0 * ones.consistency).abs() < 1e-10);
}

#[test]
fn masked_target_entries_leave_value_and_gradient_unchanged() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = store.insert("pred", gaussian(4, 6, &mut rng)).unwrap();
    let target = gaussian(4, 6, &mut rng);
    let mask = Tensor::from_vec(4, 6, (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect());
    let mut poisoned = target.clone();
    for (i, v) in poisoned.data_mut().iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = 1e6 * (i as f64 + 1.0);
        }
    }
    let run = |t: &Tensor| {
        let mut g = Graph::new(&store);
        let p = g.param(pred);
        let l = masked_mse(&mut g, p, t, &mask).unwrap();
        (g.value(l).item(), g.backward(l).get(pred).unwrap().clone())
    };
    let (va, ga) = run(&target);
    let (vb, gb) = run(&poisoned);
    assert_eq!(va.to_bits(), vb.to_bits());
    assert_eq!(ga, gb);
    for (i, v) in ga.data().iter().enumerate() {
        if i % 3 == 0 {
            assert_eq!(*v, 0.0);
        }
    }
}

/// Object poses and rest contacts of a two-frame, two-group, `k = 2` case.
fn consistency_fixture() -> (Tensor, Vec<Vec3>, Tensor) {
    let r0 = axis_angle(&Vec3::new(0.3, 1.0, -0.2), 0.7);
    let r1 = axis_angle(&Vec3::new(-1.0, 0.1, 0.4), 1.9);
    let mut rows = Vec::new();
    for (r, c) in [(r0, Vec3::new(0.1, 0.9, -0.3)), (r1, Vec3::new(-0.4, 1.1, 0.2))] {
        let mut row = c.as_slice().to_vec();
        row.extend_from_slice(&matrix_to_rot6d(&r).unwrap().to_array());
        rows.push(row);
    }
    let rest = vec![Vec3::new(0.05, 0.0, 0.02), Vec3::new(-0.03, 0.04, 0.0), Vec3::new(0.0, -0.06, 0.01), Vec3::new(0.02, 0.02, 0.02)];
    let mut exact = Tensor::zeros(2, 12);
    for (f, (r, c)) in [(r0, Vec3::new(0.1, 0.9, -0.3)), (r1, Vec3::new(-0.4, 1.1, 0.2))].into_iter().enumerate() {
        for (i, p) in rest.iter().enumerate() {
            let q = r * p + c;
            for d in 0..3 {
                exact.set(f, 3 * i + d, q[d]);
            }
        }
    }
    (Tensor::from_rows(&rows), rest, exact)
}

fn consistency(contacts: &Tensor, object: &Tensor, rest: &[Vec3], mask: &Tensor) -> (f64, Tensor) {
    let mut store = ParamStore::new();
    let c = store.insert("c", contacts.clone()).unwrap();
    let mut g = Graph::new(&store);
    let cv = g.param(c);
    let o = g.input(object.clone());
    let l = loss_consistency(&mut g, cv, o, rest, mask).unwrap();
    let grad = g.backward(l).get(c).cloned().unwrap_or_else(|| Tensor::zeros(2, 12));
    (g.value(l).item(), grad)
}

#[test]
fn consistency_is_zero_on_the_rigid_map() {
    let (object, rest, exact) = consistency_fixture();
    let (v, _) = consistency(&exact, &object, &rest, &Tensor::filled(2, 12, 1.0));
    assert!(v.abs() < 1e-24, "{v}");
}

#[test]
fn single_offset_group_costs_delta_squared_over_count() {
    let (object, rest, exact) = consistency_fixture();
    let delta = 0.013;
    let mut off = exact.clone();
    off.set(1, 7, exact.get(1, 7) + delta);
    // group 1 of frame 1 is the only counted group: 3·k = 6 entries
    let mut mask = Tensor::zeros(2, 12);
    for j in 6..12 {
        mask.set(1, j, 1.0);
    }
    let (v, _) = consistency(&off, &object, &rest, &mask);
    let mut oracle = 0.0;
    for j in 6..12 {
        let d = off.get(1, j) - exact.get(1, j);
        oracle += d * d;
    }
    oracle /= 6.0;
    assert!((v - oracle).abs() < 1e-15);
    assert!((v - delta * delta / 6.0).abs() < 1e-15);
}

#[test]
fn masked_contact_entries_get_exactly_zero_gradient() {
    let (object, rest, exact) = consistency_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = exact.zip_map(&gaussian(2, 12, &mut rng), |a, b| a + 0.1 * b);
    let mut mask = Tensor::zeros(2, 12);
    for j in 0..6 {
        mask.set(0, j, 1.0);
    }
    let (v, grad) = consistency(&noisy, &object, &rest, &mask);
    assert!(v > 0.0);
    for f in 0..2 {
        for j in 0..12 {
            let masked = mask.get(f, j) == 0.0;
            assert_eq!(masked, grad.get(f, j) == 0.0, "frame {f} entry {j}");
        }
    }
    let (zero, grad) = consistency(&noisy, &object, &rest, &Tensor::zeros(2, 12));
    assert_eq!(zero, 0.0);
    assert!(grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn consistency_reaches_both_branches() {
    let mut m = common::model(3);
    common::perturb(&mut m.store, "human.", 0.05, 1);
    let ex = &common::prepared(&common::sequences(1, 3))[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&m.store);
    let terms = m.losses(&mut g, ex, 3, &mut rng, &LossWeights::default()).unwrap();
    let grads = g.backward(terms.consistency);
    let norm = |prefix: &str| -> f64 {
        m.store.ids_with_prefix(prefix).into_iter().filter_map(|id| grads.get(id)).map(Tensor::sum_sq).sum()
    };
    assert!(norm("human.") > 0.0);
    assert!(norm("object.") > 0.0);
    assert_eq!(norm("him."), 0.0);
}

#[test]
fn stage_two_only_moves_the_interaction_module() {
    let data = common::prepared(&common::sequences(3, 3));
    let cfg = short_config([3, 3, 0]);
    let mut m = common::model(4);
    let mut step = run_stage(&mut m, &data, &cfg, 1, 7, 0, &mut |_| {}).unwrap();
    assert_eq!(step, 3);
    let human = common::checksum(&m.store, "human.");
    let object = common::checksum(&m.store, "object.");
    let mut records = Vec::new();
    step = run_stage(&mut m, &data, &cfg, 2, 7, step, &mut |r| records.push(r)).unwrap();
    assert_eq!(step, 6);
    assert!(m.him_active);
    assert_eq!(common::checksum(&m.store, "human."), human);
    assert_eq!(common::checksum(&m.store, "object."), object);
    let copied: Vec<_> = m.him.trunk_param_ids();
    assert!(copied.iter().zip(m.object.trunk_param_ids()).any(|(h, o)| m.store.get(*h) != m.store.get(o)));
    assert_eq!(records.iter().map(|r| (r.step, r.stage)).collect::<Vec<_>>(), vec![(4, 2), (5, 2), (6, 2)]);

    let ckpt = m.checkpoint(2);
    let bytes = checkpoint::to_bytes(&ckpt).unwrap();
    let back = CoopModel::from_checkpoint(&checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert!(back.him_active);
    assert_eq!(common::checksum(&back.store, ""), common::checksum(&m.store, ""));
}

#[test]
fn models_without_the_module_skip_stage_two() {
    let data = common::prepared(&common::sequences(2, 3));
    let cfg = short_config([2, 2, 2]);
    let mut m = common::model(5);
    m.use_him = false;
    let mut log = Vec::new();
    train(&mut m, &data, &cfg, 3, 1, &mut |s, _, r| {
        log.push((s, r.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(log, vec![(1, 2), (2, 0), (3, 2)]);
    assert!(!m.him_active);
}

#[test]
fn same_seed_reproduces_the_loss_log() {
    let data = common::prepared(&common::sequences(3, 3));
    let cfg = short_config([4, 3, 3]);
    let run = || {
        let mut m = common::model(6);
        let log = train(&mut m, &data, &cfg, 11, 1, &mut |_, _, _| Ok(())).unwrap();
        (log.iter().map(ToString::to_string).collect::<Vec<_>>(), common::checksum(&m.store, ""))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let mut m = common::model(6);
    let other = train(&mut m, &data, &cfg, 12, 1, &mut |_, _, _| Ok(())).unwrap();
    assert_ne!(a[0], other[0].to_string());
}

#[test]
fn non_finite_loss_names_stage_and_step() {
    let mut data = common::prepared(&common::sequences(1, 3));
    data[0].object_x0.set(2, 1, f64::NAN);
    let mut m = common::model(7);
    let err = run_stage(&mut m, &data, &short_config([5, 0, 0]), 1, 1, 0, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NanLoss { stage: 1, step: 1 }), "{err}");
    assert_eq!(err.to_string(), "non-finite loss in stage 1 at step 1");
}

#[test]
fn invalid_training_settings_are_rejected() {
    let data = common::prepared(&common::sequences(1, 3));
    let mut m = common::model(8);
    let mut cfg = short_config([1, 1, 1]);
    cfg.batch_size = 0;
    assert!(matches!(train(&mut m, &data, &cfg, 1, 1, &mut |_, _, _| Ok(())), Err(Error::Config(_))));
    let cfg = short_config([1, 1, 1]);
    assert!(matches!(train(&mut m, &[], &cfg, 1, 1, &mut |_, _, _| Ok(())), Err(Error::Config(_))));
    assert!(train(&mut m, &data, &cfg, 1, 4, &mut |_, _, _| Ok(())).is_err());
}

#[test]
fn evaluation_loss_is_deterministic() {
    let data = common::prepared(&common::sequences(2, 3));
    let m = common::model(9);
    let w = LossWeights::default();
    assert_eq!(evaluate_loss(&m, &data, &w, 3, 4).unwrap(), evaluate_loss(&m, &data, &w, 3, 4).unwrap());
}

#[test]
fn log_lines_have_the_documented_form() {
    let r = LogRecord { step: 12, stage: 2, losses: hoi_core::losses::LossValues { human: 0.5, object: 0.25, consistency: 1e-7, all: 0.75 } };
    assert_eq!(r.to_string(), "step 12 stage 2 L_human 0.5 L_object 0.25 L_consistency 0.0000001 L_all 0.75");
    assert!("step 1 stage 1 L_human 1".parse::<LogRecord>().is_err());
    assert!("step 1 stage 1 L_hmn 1 L_object 1 L_consistency 1 L_all 1".parse::<LogRecord>().is_err());
}

proptest! {
    #[test]
    fn log_lines_parse_back_exactly(step in 1u64..1_000_000, stage in 1u8..=3, h in 0.0f64..1e3, o in 0.0f64..1e3, c in 0.0f64..1e3) {
        let r = LogRecord { step, stage, losses: hoi_core::losses::LossValues { human: h, object: o, consistency: c, all: h + o + c } };
        let back: LogRecord = r.to_string().parse().unwrap();
        prop_assert_eq!(back, r);
    }
}

/// Toy-scale run: the object loss averaged over 20-step intervals of stage 2
/// falls on most intervals for every ablation seed.
#[test]
fn stage_two_lowers_the_object_loss() {
    let cfg = hoi_core::config::RunConfig::toy();
    let seqs = hoi_core::pipeline::generate(&cfg, cfg.data.count, 11).unwrap();
    let data = hoi_core::pipeline::prepare_all(&seqs, &cfg.dims()).unwrap();
    for &seed in &cfg.ablation.seeds {
        let mut m = CoopModel::new(&cfg.model, &cfg.diffusion, cfg.dims(), seed).unwrap();
        let step = run_stage(&mut m, &data, &cfg.training, 1, seed, 0, &mut |_| {}).unwrap();
        let mut records = Vec::new();
        run_stage(&mut m, &data, &cfg.training, 2, seed, step, &mut |r| records.push(r)).unwrap();
        let means: Vec<f64> =
            records.chunks(20).map(|c| c.iter().map(|r| r.losses.object).sum::<f64>() / c.len() as f64).collect();
        let falls = means.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(2 * falls > means.len() - 1, "seed {seed}: {falls} of {} intervals fall: {means:?}", means.len() - 1);
    }
}
