use cir_core::composers::ComposerKind;
use cir_core::datasets::{synth_generate, Dataset, Slice, SplitSpec, ORIGINAL_SPLIT, VAL_SPLIT};
use cir_core::pipeline::{
    evaluate, init_stage1, label_training_triplets, run_stage2, run_stage3, train_baselines,
    InitSource, RunConfig, Task, TrainedModel,
};
use cir_core::{DenseVec, Embedding, Error, RetrievalModel, SynthConfig, TripletExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        train_items: 120,
        test_items: 80,
        generic_pairs: 200,
        train_triplets: 150,
        test_triplets: 60,
        ..SynthConfig::default()
    };
    cfg.init.iterations = 20;
    cfg.stage2.iterations = 20;
    cfg.stage3.iterations = 20;
    cfg
}

fn setup(cfg: &RunConfig) -> (Dataset, TrainedModel) {
    let data = synth_generate(&cfg.synth).unwrap();
    let (model, _) = init_stage1(cfg, &data).unwrap();
    (data, model)
}

fn smoothed(xs: &[f64], window: usize) -> (f64, f64) {
    let head = xs[..window].iter().sum::<f64>() / window as f64;
    let tail = xs[xs.len() - window..].iter().sum::<f64>() / window as f64;
    (head, tail)
}

#[test]
fn random_init_is_deterministic() {
    let mut cfg = small_config();
    cfg.init.source = InitSource::Random;
    let (_, a) = setup(&cfg);
    let (_, b) = setup(&cfg);
    assert_eq!(a, b);
    assert_eq!(a.provenance[0].tag, "stage1:random");
}

#[test]
fn pretraining_halves_the_fir_loss() {
    let cfg = RunConfig::default();
    let data = synth_generate(&cfg.synth).unwrap();
    let (_, log) = init_stage1(&cfg, &data).unwrap();
    let (start, end) = smoothed(&log.losses(Task::Fir), 10);
    assert!(end <= 0.5 * start, "{start} -> {end}");
}

#[test]
fn checkpoint_source_loads_the_model() {
    let cfg = small_config();
    let (data, model) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let mut from = cfg.clone();
    from.init.source = InitSource::Checkpoint;
    from.init.checkpoint = Some(path);
    let (loaded, _) = init_stage1(&from, &data).unwrap();
    assert_eq!(loaded.image_encoder, model.image_encoder);
    assert_eq!(loaded.text_encoder, model.text_encoder);
}

#[test]
fn zero_stage2_iterations_leave_the_model() {
    let mut cfg = small_config();
    let (data, model) = setup(&cfg);
    cfg.stage2.iterations = 0;
    let (after, log) = run_stage2(model.clone(), &data, &cfg).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(after.image_encoder, model.image_encoder);
    assert_eq!(after.text_encoder, model.text_encoder);
    assert_eq!(after.attribute_head, model.attribute_head);
    assert_eq!(after.log_tau1, model.log_tau1);
}

#[test]
fn stage2_alternates_and_lowers_fir() {
    let mut cfg = RunConfig::default();
    cfg.stage2.iterations = 200;
    let data = synth_generate(&cfg.synth).unwrap();
    let (model, _) = init_stage1(&cfg, &data).unwrap();
    let (_, log) = run_stage2(model, &data, &cfg).unwrap();
    let tasks: Vec<Task> = log.steps.iter().take(4).map(|s| s.task).collect();
    assert_eq!(tasks, [Task::Fir, Task::Fap, Task::Fir, Task::Fap]);
    let (start, end) = smoothed(&log.losses(Task::Fir), 10);
    assert!(end < start, "{start} -> {end}");
}

#[test]
fn attribute_only_mix_leaves_the_text_encoder() {
    let mut cfg = small_config();
    let (data, model) = setup(&cfg);
    cfg.stage2.task_mix = (0, 1);
    let (after, log) = run_stage2(model.clone(), &data, &cfg).unwrap();
    assert!(log.steps.iter().all(|s| s.task == Task::Fap));
    assert_eq!(after.text_encoder, model.text_encoder);
    assert_ne!(after.image_encoder, model.image_encoder);
}

#[test]
fn stage2_rejects_mismatched_corpora() {
    let cfg = small_config();
    let (_, model) = setup(&cfg);
    let mut other = small_config();
    other.synth.attributes = 8;
    let data = synth_generate(&other.synth).unwrap();
    assert!(matches!(
        run_stage2(model, &data, &cfg),
        Err(Error::Validation(_))
    ));
}

#[test]
fn adaptive_without_labels_is_rejected_unless_lambda_is_zero() {
    let mut cfg = small_config();
    let (data, model) = setup(&cfg);
    let err = run_stage3(
        model.clone(),
        &data.train_triplets,
        &data.tables.images,
        None,
        &cfg,
    );
    assert!(err.is_err());

    cfg.loss.lambda = 0.0;
    let (trained, log) =
        run_stage3(model, &data.train_triplets, &data.tables.images, None, &cfg).unwrap();
    assert_eq!(trained.composer.kind(), ComposerKind::Adaptive);
    assert!(log.steps.iter().all(|s| s.task == Task::Cl));
}

#[test]
fn mean_composer_never_uses_kl() {
    let mut cfg = small_config();
    let (data, model) = setup(&cfg);
    cfg.stage3.composer = ComposerKind::Mean;
    let (_, log) =
        run_stage3(model, &data.train_triplets, &data.tables.images, None, &cfg).unwrap();
    assert_eq!(log.steps.len(), cfg.stage3.iterations);
    assert!(log.steps.iter().all(|s| s.task == Task::Cl));
}

#[test]
fn frozen_encoders_stay_fixed_in_stage3() {
    let mut cfg = small_config();
    let (data, model) = setup(&cfg);
    cfg.stage3.composer = ComposerKind::Mean;
    cfg.stage3.freeze_encoders = true;
    let (after, _) = run_stage3(
        model.clone(),
        &data.train_triplets,
        &data.tables.images,
        None,
        &cfg,
    )
    .unwrap();
    assert_eq!(after.image_encoder, model.image_encoder);
    assert_eq!(after.text_encoder, model.text_encoder);
    assert_ne!(after.log_tau2, model.log_tau2);
}

/// Full-size run: stage 3 beats its stage-2 starting point, and the
/// baselines split by slice.
#[test]
fn stage3_and_baselines_on_the_synthetic_corpus() {
    let cfg = RunConfig::default();
    let data = synth_generate(&cfg.synth).unwrap();
    let split = data.split(ORIGINAL_SPLIT).unwrap();
    let ev = |m: &TrainedModel, triplets: &[TripletExample]| {
        evaluate(m, triplets, &data.tables.images, split, &cfg.eval.ks)
            .unwrap()
            .rmean
    };
    let (s1, _) = init_stage1(&cfg, &data).unwrap();
    let (s12, _) = run_stage2(s1, &data, &cfg).unwrap();
    let b = train_baselines(&s12, &data.train_triplets, &data.tables.images, &cfg).unwrap();
    assert_eq!(b.image.composer.kind(), ComposerKind::ImageOnly);
    assert_eq!(b.text.composer.kind(), ComposerKind::TextOnly);
    assert_eq!(b.fusion.composer.kind(), ComposerKind::Mean);

    let slice = |s: Slice| -> Vec<TripletExample> {
        data.test_triplets
            .iter()
            .filter(|t| t.slice == Some(s))
            .cloned()
            .collect()
    };
    let (text, image) = (slice(Slice::Text), slice(Slice::Image));
    assert!(ev(&b.text, &text) > ev(&b.image, &text));
    assert!(ev(&b.image, &image) > ev(&b.text, &image));
    let all = &data.test_triplets;
    assert!(ev(&b.fusion, all) >= ev(&b.image, all).max(ev(&b.text, all)));

    let labels = label_training_triplets(&b, &data, &cfg).unwrap();
    assert_eq!(labels.n, split_len(&data, "train"));
    let (adaptive, log) = run_stage3(
        s12.clone(),
        &data.train_triplets,
        &data.tables.images,
        Some(&labels),
        &cfg,
    )
    .unwrap();
    assert!(log.steps.iter().all(|s| s.task == Task::ClKl));
    assert!(ev(&adaptive, all) > ev(&s12, all));
}

fn split_len(data: &Dataset, name: &str) -> usize {
    data.split(name).unwrap().len()
}

/// Embeds candidates and queries in attribute space, where the reference plus
/// the flip delta is the target exactly.
struct Oracle;

impl RetrievalModel for Oracle {
    fn composer_kind(&self) -> ComposerKind {
        ComposerKind::Mean
    }

    fn embed_candidate(&self, features: &DenseVec) -> cir_core::Result<Embedding> {
        let centred: Vec<f64> = features.as_slice().iter().map(|x| 2.0 * x - 1.0).collect();
        Embedding::normalize(&centred)
    }

    fn embed_query(&self, reference: &DenseVec, text: &DenseVec) -> cir_core::Result<Embedding> {
        let composed: Vec<f64> = reference
            .as_slice()
            .iter()
            .zip(text.as_slice())
            .map(|(r, t)| 2.0 * (r + t) - 1.0)
            .collect();
        Embedding::normalize(&composed)
    }
}

#[test]
fn perfect_model_reaches_full_recall() {
    let synth = SynthConfig {
        image_noise: 0.0,
        text_noise: 0.0,
        mix: [1.0, 0.0, 0.0],
        ..SynthConfig::default()
    };
    let data = synth_generate(&synth).unwrap();
    let split = data.split(ORIGINAL_SPLIT).unwrap();
    let report = evaluate(
        &Oracle,
        &data.test_triplets,
        &data.tables.images,
        split,
        &[1, 10],
    )
    .unwrap();
    assert_eq!(report.recall(ORIGINAL_SPLIT, 1), Some(100.0));
}

#[test]
fn smaller_pool_never_lowers_recall() {
    let cfg = small_config();
    let (data, model) = setup(&cfg);
    let big = data.split(ORIGINAL_SPLIT).unwrap();
    let small = data.split(VAL_SPLIT).unwrap();
    assert!(small.len() < big.len());
    let ks = [1, 5, 10, 50];
    let a = evaluate(&model, &data.test_triplets, &data.tables.images, big, &ks).unwrap();
    let b = evaluate(&model, &data.test_triplets, &data.tables.images, small, &ks).unwrap();
    for k in ks {
        assert!(
            b.recall(VAL_SPLIT, k).unwrap() >= a.recall(ORIGINAL_SPLIT, k).unwrap(),
            "K={k}"
        );
    }
}

#[test]
fn evaluation_rejects_targets_outside_the_split() {
    let cfg = small_config();
    let (data, model) = setup(&cfg);
    let t = &data.test_triplets[0];
    let split = SplitSpec::new("tiny", vec![t.reference_id.clone()]).unwrap();
    if t.target_id != t.reference_id {
        assert!(evaluate(
            &model,
            &data.test_triplets[..1],
            &data.tables.images,
            &split,
            &[1]
        )
        .is_err());
    }
}

/// With targets drawn independently of the query, a random-init model sits
/// near chance (10%) at R@10 over 100 candidates.
#[test]
fn random_init_recall_is_chance_level() {
    for seed in 0..5u64 {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.init.source = InitSource::Random;
        cfg.synth.seed = seed;
        cfg.synth.test_items = 100;
        cfg.synth.test_triplets = 200;
        let (data, model) = setup(&cfg);
        let split = data.split(ORIGINAL_SPLIT).unwrap();
        assert_eq!(split.len(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triplets: Vec<TripletExample> = data
            .test_triplets
            .iter()
            .map(|t| TripletExample {
                target_id: split.ids[rng.random_range(0..split.len())].clone(),
                ..t.clone()
            })
            .collect();
        let report = evaluate(&model, &triplets, &data.tables.images, split, &[10]).unwrap();
        let r10 = report.recall(ORIGINAL_SPLIT, 10).unwrap();
        assert!((2.0..=25.0).contains(&r10), "seed {seed}: R@10 {r10}");
    }
}
