use espo_core::mdm::EstimatorForm;
use espo_core::nn::{Denoiser, ParameterSet};
use espo_core::objective::{CompletionGroup, KlEstimator, ObjectiveConfig, Variant};
use espo_core::tasks::TaskInstance;
use espo_core::train::{
    clip_grad_norm, evaluate, rollout, train_step, verify_replay, AdamW, RolloutRecord, TrainRunConfig, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainRunConfig {
    let mut c = TrainRunConfig::toy_sudoku();
    c.model.width = 8;
    c.model.layers = 1;
    c.model.init_std = 0.3;
    c.group_size = 3;
    c.batch_size = 6;
    c.inner_steps = 2;
    c.mc_samples = 1;
    c.steps = 2;
    c
}

struct Setup {
    cfg: TrainRunConfig,
    model: Denoiser,
    params: ParameterSet,
    records: Vec<RolloutRecord>,
}

fn setup(cfg: TrainRunConfig, seed: u64) -> Setup {
    let model = Denoiser::new(cfg.denoiser()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init(&mut rng);
    let vocab = cfg.task.vocab();
    let instances = cfg.task.generate_many(&mut rng, cfg.groups_per_batch()).unwrap();
    let mut spec = espo_core::train::RolloutSpec {
        vocab: &vocab,
        format: cfg.task.answer_format,
        group_size: cfg.group_size,
        completion_len: cfg.completion_len,
        sampler: cfg.sampler(false),
        plan_form: cfg.estimator,
        mc_samples: cfg.mc_samples,
        meanfield: true,
    };
    spec.sampler.temperature = 1.0;
    let records = rollout(&model, &params, &params, &instances, &spec, &mut rng, 0, 0.0).unwrap();
    Setup {
        cfg,
        model,
        params,
        records,
    }
}

fn with_rewards(records: &[RolloutRecord], rewards: &[f64]) -> Vec<CompletionGroup> {
    records
        .iter()
        .map(|r| {
            let mut g = r.group.clone();
            g.rewards = rewards.to_vec();
            g.advantages = espo_core::objective::group_advantages(rewards).unwrap();
            g
        })
        .collect()
}

#[test]
fn first_inner_step_ratio_is_exactly_one() {
    for variant in Variant::ALL {
        let s = setup(small_config(), 1);
        let groups = with_rewards(&s.records, &[1.0, 0.0, 0.0]);
        let obj = ObjectiveConfig {
            variant,
            ..ObjectiveConfig::default()
        };
        let mut params = s.params.clone();
        let mut opt = AdamW::new(s.cfg.adamw(), &params);
        let stats = train_step(&s.model, &mut params, &mut opt, &groups, &obj, 3, 0.2).unwrap();
        assert_eq!(stats.first_mean_ratio, 1.0, "{variant:?}");
        assert_eq!(stats.applied, 3);
        assert_ne!(params.array(0).data, s.params.array(0).data);
    }
}

#[test]
fn records_replay_bit_exactly() {
    let s = setup(small_config(), 2);
    let vocab = s.cfg.task.vocab();
    let mut spec = espo_core::train::RolloutSpec {
        vocab: &vocab,
        format: s.cfg.task.answer_format,
        group_size: s.cfg.group_size,
        completion_len: s.cfg.completion_len,
        sampler: s.cfg.sampler(false),
        plan_form: EstimatorForm::Coupled,
        mc_samples: 1,
        meanfield: true,
    };
    spec.sampler.temperature = 1.0;
    for r in &s.records {
        let json = serde_json::to_string(r).unwrap();
        let back: RolloutRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, r);
        verify_replay(&s.model, &s.params, &back, &spec).unwrap();
    }
    let mut tampered = s.records[0].clone();
    tampered.group.old_elbo[0].value += 1e-12;
    assert!(verify_replay(&s.model, &s.params, &tampered, &spec).is_err());
}

#[test]
fn greedy_rollouts_have_identical_completions_and_zero_advantages() {
    let cfg = small_config();
    let model = Denoiser::new(cfg.denoiser()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = model.init(&mut rng);
    let vocab = cfg.task.vocab();
    let instances = cfg.task.generate_many(&mut rng, 2).unwrap();
    let spec = espo_core::train::RolloutSpec {
        vocab: &vocab,
        format: cfg.task.answer_format,
        group_size: 4,
        completion_len: cfg.completion_len,
        sampler: cfg.sampler(true),
        plan_form: EstimatorForm::Coupled,
        mc_samples: 2,
        meanfield: false,
    };
    let records = rollout(&model, &params, &params, &instances, &spec, &mut rng, 0, 0.0).unwrap();
    for r in records {
        assert!(r.group.completions.windows(2).all(|w| w[0] == w[1]));
        assert!(r.group.advantages.iter().all(|&a| a == 0.0));
    }
}

#[test]
fn rollout_rejects_empty_instance_list() {
    let cfg = small_config();
    let model = Denoiser::new(cfg.denoiser()).unwrap();
    let params = model.init(&mut ChaCha8Rng::seed_from_u64(0));
    let vocab = cfg.task.vocab();
    let spec = espo_core::train::RolloutSpec {
        vocab: &vocab,
        format: cfg.task.answer_format,
        group_size: 2,
        completion_len: cfg.completion_len,
        sampler: cfg.sampler(false),
        plan_form: EstimatorForm::Coupled,
        mc_samples: 1,
        meanfield: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(rollout(&model, &params, &params, &[], &spec, &mut rng, 0, 0.0).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small_config();
    cfg.lr = 0.0;
    cfg.weight_decay = 0.1;
    let s = setup(cfg, 4);
    let groups = with_rewards(&s.records, &[1.0, 0.0, 1.0]);
    let mut params = s.params.clone();
    let mut opt = AdamW::new(s.cfg.adamw(), &params);
    train_step(&s.model, &mut params, &mut opt, &groups, &s.cfg.objective, 4, 0.2).unwrap();
    for (a, b) in params.arrays().iter().zip(s.params.arrays()) {
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn zero_advantages_without_kl_leave_parameters_unchanged() {
    let s = setup(small_config(), 5);
    let groups = with_rewards(&s.records, &[1.0, 1.0, 1.0]);
    for variant in Variant::ALL {
        let obj = ObjectiveConfig {
            variant,
            kl: KlEstimator::K2,
            beta: 0.0,
            ..ObjectiveConfig::default()
        };
        let mut params = s.params.clone();
        let mut opt = AdamW::new(s.cfg.adamw(), &params);
        let stats = train_step(&s.model, &mut params, &mut opt, &groups, &obj, 2, 0.2).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        for (a, b) in params.arrays().iter().zip(s.params.arrays()) {
            assert_eq!(a.data, b.data, "{variant:?}");
        }
    }
}

#[test]
fn clipping_bounds_global_norm() {
    let s = setup(small_config(), 6);
    let groups = with_rewards(&s.records, &[1.0, 0.0, 0.0]);
    let mut g = espo_core::nn::Graph::new();
    let b = g.bind(&s.params);
    let out = espo_core::objective::policy_loss(&mut g, &b, &s.model, &groups, &s.cfg.objective).unwrap();
    let mut grad = g.backward(out.loss).unwrap();
    let pre = grad.global_norm();
    let reported = clip_grad_norm(&mut grad, pre / 10.0);
    assert_eq!(reported, pre);
    assert!(grad.global_norm() <= pre / 10.0 + 1e-9);
}

#[test]
fn evaluation_is_deterministic_and_absent_for_no_instances() {
    let cfg = small_config();
    let model = Denoiser::new(cfg.denoiser()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = model.init(&mut rng);
    let vocab = cfg.task.vocab();
    let sampler = cfg.sampler(true);
    let none = evaluate(&model, &params, &vocab, cfg.task.answer_format, &[], 16, &sampler, 0).unwrap();
    assert_eq!(none.accuracy, None);

    let mut full = cfg.task.clone();
    full.sudoku_givens = 16;
    let boards: Vec<TaskInstance> = full.generate_many(&mut rng, 5).unwrap();
    for b in &boards {
        assert_eq!(b.prompt(), b.solution());
        assert_eq!(b.reward(b.solution(), cfg.task.answer_format), 1.0);
    }
    let a = evaluate(
        &model,
        &params,
        &vocab,
        cfg.task.answer_format,
        &boards,
        16,
        &sampler,
        9,
    )
    .unwrap();
    let b = evaluate(
        &model,
        &params,
        &vocab,
        cfg.task.answer_format,
        &boards,
        16,
        &sampler,
        9,
    )
    .unwrap();
    assert_eq!(a, b);
    let acc = a.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn trainer_metrics_are_reproducible_and_checkpoint_reloads() {
    std::env::set_var(espo_core::train::DETERMINISTIC_ENV, "1");
    let mut cfg = small_config();
    cfg.warm_start.steps = 2;
    cfg.warm_start.batch_size = 4;
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut buf = Vec::new();
        t.run(&mut buf, None).unwrap();
        (t, buf)
    };
    let (t1, a) = run();
    let (_, b) = run();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2);
    assert!(t1.flops_cum > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    t1.save_checkpoint(&path).unwrap();
    let loaded = espo_core::train::load_model_params(&path).unwrap();
    assert!(loaded.same_layout(&t1.params));
    for (x, y) in loaded.arrays().iter().zip(t1.params.arrays()) {
        for (u, v) in x.data.iter().zip(&y.data) {
            assert_eq!(*u, *v as f32 as f64);
        }
    }
}
