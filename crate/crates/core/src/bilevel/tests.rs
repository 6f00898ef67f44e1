use super::*;
use crate::minisam::ModelConfig;
use crate::synthgen::{sample_scene, standard_factors, with_domain, ClassVocabulary, FactorDomain, SceneGeometry, SceneSample};

fn scenes(n: usize, seed: u64, target: bool) -> Vec<SceneSample> {
    let vocab = ClassVocabulary::standard(3).unwrap();
    let factors = with_domain(standard_factors(), "radius", FactorDomain::Interval { lo: 2.5, hi: 4.0 });
    let geometry = SceneGeometry { height: 16, width: 16, max_entities: 2 };
    let pool = if target { vocab.target_ids() } else { vocab.base_ids() };
    (0..n).map(|i| sample_scene(mix_seed(seed, i as u64), &vocab, &factors, &pool, geometry).unwrap()).collect()
}

fn tiny(config: BiLevelConfig) -> BiLevel {
    BiLevel::new(MiniSam::new(ModelConfig::tiny()).unwrap(), config).unwrap()
}

fn tiny_config() -> BiLevelConfig {
    BiLevelConfig { batch_size: 4, epochs: 2, ..BiLevelConfig::default() }
}

fn setup(bl: &BiLevel, n: usize) -> (BiLevelState, TrainData) {
    let state = bl.initial_state(bl.model.init_params(bl.config.seed));
    let data = TrainData {
        train: prepare_train(&bl.model, &state.params, &scenes(n, 1, false), &bl.config).unwrap(),
        base: prepare_eval(&bl.model, &state.params, &scenes(4, 2, false), PromptMode::Box, 0.0, 0).unwrap(),
        target: prepare_eval(&bl.model, &state.params, &scenes(4, 3, true), PromptMode::Box, 0.0, 0).unwrap(),
    };
    (state, data)
}

/// Learner weights set to random values so no gradient term vanishes.
fn randomize_learner(state: &mut BiLevelState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in state.params.names_with_prefix(&["capl."]) {
        let (r, c) = state.params.get(&name).unwrap().dim();
        state.params.insert(name, gaussian(&mut rng, r, c, 0.3));
    }
}

fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn config_rejects_bad_values() {
    let ok = BiLevelConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        BiLevelConfig { inner_steps: 0, ..ok.clone() },
        BiLevelConfig { inner_lr: -0.1, ..ok.clone() },
        BiLevelConfig { outer_lr: 0.0, ..ok.clone() },
        BiLevelConfig { lambda_en: -1.0, ..ok.clone() },
        BiLevelConfig { lambda_xi: f64::NAN, ..ok.clone() },
        BiLevelConfig { n_t: 1, ..ok.clone() },
        BiLevelConfig { beta1: 1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert!("bogus".parse::<Arm>().is_err());
    for arm in Arm::ALL {
        assert_eq!(arm.as_str().parse::<Arm>().unwrap(), *arm);
    }
}

#[test]
fn zero_inner_lr_keeps_the_learner() {
    let bl = tiny(BiLevelConfig { inner_lr: 0.0, inner_steps: 3, ..tiny_config() });
    let (mut state, data) = setup(&bl, 4);
    randomize_learner(&mut state, 5);
    let batch: Vec<&TrainSample> = data.train.iter().collect();
    let inner = bl.inner_step(&state.params, &batch, 0).unwrap();
    let start = state.params.subset(bl.config.arm.learner_prefixes());
    for theta in &inner.thetas {
        assert_eq!(bits(theta), bits(&start));
    }
    let (_, unrolled) = bl.hypergradient(&state.params, &inner, &batch).unwrap();
    let first = tiny(BiLevelConfig { mode: HyperMode::FirstOrder, ..bl.config.clone() });
    let (_, direct) = first.hypergradient(&state.params, &inner, &batch).unwrap();
    assert_eq!(bits(&unrolled), bits(&direct));
}

#[test]
fn inner_step_descends() {
    let (mut state, data) = setup(&tiny(tiny_config()), 4);
    randomize_learner(&mut state, 9);
    let mut lr = 0.5;
    let mut descended = false;
    while lr > 1e-6 {
        let bl = tiny(BiLevelConfig { inner_lr: lr, ..tiny_config() });
        let batch: Vec<&TrainSample> = data.train.iter().collect();
        let before = bl.batch_losses(&state.params, &batch, false).unwrap().objective;
        let inner = bl.inner_step(&state.params, &batch, 0).unwrap();
        let mut after_params = state.params.clone();
        after_params.merge(inner.last());
        let after = bl.batch_losses(&after_params, &batch, false).unwrap().objective;
        assert_eq!(inner.losses[0], before);
        if after < before {
            descended = true;
            break;
        }
        lr *= 0.5;
    }
    assert!(descended);
}

#[test]
fn hypergradient_matches_differences() {
    let r = hypergrad_check(1, 0.1, 3).unwrap();
    assert!(r.model_params <= 1000, "{r:?}");
    assert!(r.coordinates > 0);
    assert!(r.max_rel_err < 1e-3, "{r:?}");
    let r0 = hypergrad_check(2, 0.0, 3).unwrap();
    assert!(r0.max_rel_err < 1e-3, "{r0:?}");
}

fn outer_curve(mode: HyperMode, steps: usize) -> Vec<f64> {
    let bl = tiny(BiLevelConfig { mode, inner_steps: 2, inner_lr: 0.1, ..tiny_config() });
    let (mut state, data) = setup(&bl, 4);
    let batch: Vec<&TrainSample> = data.train.iter().collect();
    let mut curve = vec![bl.batch_losses(&state.params, &batch, true).unwrap().objective];
    for _ in 0..steps {
        bl.outer_step(&mut state, &batch).unwrap();
    }
    curve.push(bl.batch_losses(&state.params, &batch, true).unwrap().objective);
    curve
}

#[test]
fn both_modes_reduce_the_outer_loss() {
    let unrolled = outer_curve(HyperMode::Unrolled, 50);
    let first = outer_curve(HyperMode::FirstOrder, 50);
    assert!(unrolled[1] < unrolled[0], "{unrolled:?}");
    assert!(first[1] < first[0], "{first:?}");
}

#[test]
fn unrolled_ends_no_worse_than_first_order() {
    let unrolled = outer_curve(HyperMode::Unrolled, 50);
    let first = outer_curve(HyperMode::FirstOrder, 50);
    assert!(unrolled[1] <= first[1], "unrolled {unrolled:?} first-order {first:?}");
}

#[test]
fn frozen_weights_are_untouched() {
    for ft in FineTune::ALL {
        let bl = tiny(BiLevelConfig { fine_tune: *ft, ..tiny_config() });
        let (mut state, data) = setup(&bl, 4);
        let frozen = |p: &ParamStore| {
            let trainable = bl.trainable_names(p);
            bits(p).into_iter().filter(|(k, _)| !trainable.contains(k)).collect::<Vec<_>>()
        };
        let before = frozen(&state.params);
        assert!(before.iter().any(|(k, _)| k.starts_with("trunk.")));
        let batch: Vec<&TrainSample> = data.train.iter().collect();
        for _ in 0..100 {
            bl.outer_step(&mut state, &batch).unwrap();
        }
        assert_eq!(frozen(&state.params), before, "{ft}");
        assert!(state.adam.m.iter().all(|(k, _)| !k.starts_with("trunk.")));
    }
}

#[test]
fn arms_own_the_expected_learner() {
    let p = |arm| {
        let bl = tiny(BiLevelConfig { arm, ..tiny_config() });
        let s = bl.initial_state(bl.model.init_params(0));
        bl.learner_names(&s.params)
    };
    assert!(p(Arm::Fixed).is_empty());
    assert!(p(Arm::Task).iter().all(|n| n.starts_with("capl.task.")));
    assert!(!p(Arm::Learnable).is_empty());
    assert!(p(Arm::Causal).iter().any(|n| n.starts_with("capl.entity.")));
}

#[test]
fn smoke_run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let bl = tiny(tiny_config());
    let (state, data) = setup(&bl, 8);
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), config_hash: "abc".into(), ..Default::default() };
    let out = bl.train(state, &data, &opts).unwrap();
    assert_eq!(out.log.len(), 2);
    let rows = read_epoch_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].epoch, 2);
    let last = Checkpoint::load(&dir.path().join("last"), Some("abc")).unwrap();
    assert_eq!(BiLevelState::from_checkpoint(&last).unwrap(), out.state);
    assert!(matches!(Checkpoint::load(&dir.path().join("last"), Some("xyz")), Err(Error::Checkpoint(_))));
    assert!(dir.path().join("best").exists());
}

#[test]
fn same_seed_same_log() {
    let run = || {
        let bl = tiny(tiny_config());
        let (state, data) = setup(&bl, 8);
        let out = bl.train(state, &data, &TrainOptions::default()).unwrap();
        let rows: Vec<_> = out
            .log
            .iter()
            .map(|r| (r.seg_per_group.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), r.outer.to_bits(), r.target_dice.to_bits()))
            .collect();
        (rows, bits(&out.state.params))
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_equals_uninterrupted() {
    let bl = tiny(BiLevelConfig { epochs: 3, ..tiny_config() });
    let (state, data) = setup(&bl, 8);
    let straight = bl.train(state.clone(), &data, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), config_hash: "h".into(), stop_at: Some(1), ..Default::default() };
    bl.train(state, &data, &opts).unwrap();
    let loaded = BiLevelState::from_checkpoint(&Checkpoint::load(&dir.path().join("last"), Some("h")).unwrap()).unwrap();
    assert_eq!(loaded.epoch, 1);
    let resumed = bl.train(loaded, &data, &TrainOptions { stop_at: None, ..opts }).unwrap();
    assert_eq!(bits(&resumed.state.params), bits(&straight.state.params));
    assert_eq!(resumed.state.adam, straight.state.adam);
    assert_eq!(resumed.log.len(), 3);
    for (a, b) in resumed.log.iter().zip(&straight.log) {
        assert_eq!(a.outer.to_bits(), b.outer.to_bits());
        assert_eq!(a.target_dice.to_bits(), b.target_dice.to_bits());
    }
}

#[test]
fn outer_first_schedule_runs() {
    let bl = tiny(BiLevelConfig { schedule: Schedule::OuterFirst, ..tiny_config() });
    let (mut state, data) = setup(&bl, 4);
    let batch: Vec<&TrainSample> = data.train.iter().collect();
    let r = bl.outer_step(&mut state, &batch).unwrap();
    assert_eq!(r.inner_losses.len(), 1);
    assert_eq!(state.step, 1);
}

#[test]
fn divergence_is_reported() {
    let bl = tiny(tiny_config());
    let (mut state, data) = setup(&bl, 4);
    let name = state.params.names_with_prefix(&["capl.entity.w1"])[0].clone();
    state.params.get_mut(&name).unwrap()[[0, 0]] = f64::NAN;
    let batch: Vec<&TrainSample> = data.train.iter().collect();
    assert!(matches!(bl.outer_step(&mut state, &batch), Err(Error::Divergence { .. })));
}

#[test]
fn spread_of_identical_gradients_is_zero() {
    assert_eq!(normalized_spread(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
    assert_eq!(normalized_spread(&[vec![0.0], vec![0.0]]), 0.0);
    assert!((normalized_spread(&[vec![1.0], vec![-1.0]]) - 1.0).abs() < 1e-12);
    let bl = tiny(tiny_config());
    let (state, data) = setup(&bl, 4);
    let batch: Vec<&TrainSample> = data.train.iter().collect();
    assert!(bl.confounder_gradient_variance(&state.params, &batch).unwrap().is_finite());
}

#[test]
fn epoch_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(LOG_FILE);
    let row = EpochLog {
        epoch: 1,
        seg_per_group: vec![0.25, 0.5],
        task: 0.75,
        entity: 1.5,
        outer: 2.0,
        base_dice: 0.8,
        target_dice: 0.4,
        wall_seconds: 0.1,
    };
    write_epoch_log(&path, std::slice::from_ref(&row), 2, 7, "hash").unwrap();
    assert_eq!(read_epoch_log(&path).unwrap(), vec![row]);
    assert_eq!(log_header(2)[..3], ["epoch", "l_sam_d1", "l_sam_d2"]);
    std::fs::write(&path, "epoch,l_task\n1,0.5\n").unwrap();
    assert!(matches!(read_epoch_log(&path), Err(Error::Schema { .. })));
}

