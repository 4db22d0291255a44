//! Training checks: loss oracles, the step-decay schedule, early stopping,
//! phase wiring, and bit-for-bit reproducibility of the full pipeline.

use std::collections::BTreeSet;

use dcn::autodiff::Tape;
use dcn::data::{
    make_synthetic_dataset, sample_episode, split_classes, Dataset, DatasetSplit, EpisodeSpec,
    SplitPart,
};
use dcn::embedding::{BlockKind, EmbeddingConfig};
use dcn::eval::EpisodeScorer;
use dcn::nn::Params;
use dcn::relation::RelationConfig;
use dcn::seed::sub_rng;
use dcn::train::{
    deep_supervised_loss, deep_supervised_loss_on_tape, effective_loss_weights,
    pretrain_embedding, records_to_jsonl, train_full_pipeline, train_relation, PretrainSettings,
    RelationSettings, TrainConfig, TrainRecord, CLAMP_EPS,
};
use dcn::DcnError;
use ndarray::{array, Array2};

const REFERENCE_WEIGHTS: [f64; 4] = [0.3, 0.4, 0.5, 1.0];

/// 12-pixel workbench: 8 well-separated classes, 6 images each.
fn tiny_dataset() -> Dataset {
    make_synthetic_dataset(8, 6, 12, 0.3, 40).unwrap()
}

/// 4 / 2 / 2 classes across the three meta-splits.
fn tiny_split(ds: &Dataset) -> DatasetSplit {
    split_classes(ds, (0.5, 0.25, 0.25), 9).unwrap()
}

/// Two-stage column small enough for whole-pipeline tests.
fn tiny_embedding() -> EmbeddingConfig {
    EmbeddingConfig {
        stages: 2,
        blocks_per_stage: vec![1, 1],
        channels_per_stage: vec![3, 4],
        block_kind: BlockKind::SqueezeExcite,
        se_reduction: 4,
        stem: false,
        noise_enabled: true,
        noise_samples: 1,
        shared_epsilon: false,
        num_pretrain_classes: None,
    }
}

fn tiny_relation() -> RelationConfig {
    RelationConfig::for_embedding(&tiny_embedding())
}

/// Small deterministic budget (noise and augmentation off).
fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain: PretrainSettings {
            epochs: 2,
            batch_size: 8,
            initial_lr: 0.05,
            lr_decay_factor: 5.0,
            lr_decay_every: 60,
            momentum: 0.9,
        },
        relation: RelationSettings {
            episodes: 4,
            eval_every: 2,
            patience: 3,
            val_episodes: 2,
            initial_lr: 0.05,
            lr_decay_factor: 2.0,
            lr_decay_every: 1000,
            momentum: 0.9,
        },
        episode: EpisodeSpec::new(2, 1, 2),
        loss_weights: None,
        deep_supervision: true,
        noise: false,
        retrain: false,
        augment_pretrain: false,
        augment_relation: false,
        seed,
    }
}

fn params_equal(a: &Params, b: &Params) -> bool {
    let an: BTreeSet<&String> = a.names().collect();
    let bn: BTreeSet<&String> = b.names().collect();
    an == bn && an.iter().all(|n| a.get(n).as_ref() == b.get(n).as_ref())
}

// ---------------------------------------------------------------------------
// Loss oracles
// ---------------------------------------------------------------------------

#[test]
fn uniform_half_scores_cost_the_weighted_ln2_sum() {
    // Every score 0.5 makes each level's cross-entropy ln 2 regardless of
    // the target, so the loss collapses to (Σ w) · ln 2.
    let scores = Array2::from_elem((3, 4), 0.5);
    let expected = 2.2 * std::f64::consts::LN_2;
    for targets in [[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]] {
        let loss = deep_supervised_loss(scores.view(), &targets, &REFERENCE_WEIGHTS).unwrap();
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
    }
}

#[test]
fn asymmetric_loss_matches_a_hand_computation() {
    let scores = array![[0.9, 0.2], [0.3, 0.7]];
    let targets = [1.0, 0.0];
    let weights = [0.5, 1.0];
    let pair0 = 0.5 * -(0.9f64.ln()) + 1.0 * -(0.2f64.ln());
    let pair1 = 0.5 * -(0.7f64.ln()) + 1.0 * -(0.3f64.ln());
    let expected = (pair0 + pair1) / 2.0;
    let loss = deep_supervised_loss(scores.view(), &targets, &weights).unwrap();
    assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
}

#[test]
fn boundary_scores_are_clamped_before_the_log() {
    let expected = -CLAMP_EPS.ln();
    let sure_miss = deep_supervised_loss(array![[0.0]].view(), &[1.0], &[1.0]).unwrap();
    assert!((sure_miss - expected).abs() < 1e-9, "clamp at 0: {sure_miss}");
    let sure_hit = deep_supervised_loss(array![[1.0]].view(), &[0.0], &[1.0]).unwrap();
    assert!((sure_hit - expected).abs() < 1e-9, "clamp at 1: {sure_hit}");
}

#[test]
fn loss_rejects_malformed_inputs() {
    let scores = Array2::from_elem((2, 3), 0.5);
    let bad_targets = deep_supervised_loss(scores.view(), &[1.0], &[1.0; 3]).unwrap_err();
    assert!(bad_targets.to_string().contains("targets"), "{bad_targets}");
    let bad_weights = deep_supervised_loss(scores.view(), &[1.0, 0.0], &[1.0]).unwrap_err();
    assert!(bad_weights.to_string().contains("weights"), "{bad_weights}");
    let empty = Array2::from_elem((0, 3), 0.5);
    let no_pairs = deep_supervised_loss(empty.view(), &[], &[1.0; 3]).unwrap_err();
    assert!(no_pairs.to_string().contains("no pairs"), "{no_pairs}");
    let soft = deep_supervised_loss(scores.view(), &[1.0, 0.5], &[1.0; 3]).unwrap_err();
    assert!(soft.to_string().contains("0 or 1"), "{soft}");
}

#[test]
fn disabling_deep_supervision_keeps_only_the_last_level() {
    assert_eq!(
        effective_loss_weights(&REFERENCE_WEIGHTS, true),
        REFERENCE_WEIGHTS.to_vec()
    );
    assert_eq!(
        effective_loss_weights(&REFERENCE_WEIGHTS, false),
        vec![0.0, 0.0, 0.0, 1.0]
    );
    assert!(effective_loss_weights(&[], false).is_empty());

    // With the switch off, shallow-level scores stop mattering.
    let weights = effective_loss_weights(&[0.5, 2.0], false);
    let targets = [1.0, 0.0];
    let a = deep_supervised_loss(array![[0.9, 0.8], [0.1, 0.3]].view(), &targets, &weights).unwrap();
    let b = deep_supervised_loss(array![[0.2, 0.8], [0.6, 0.3]].view(), &targets, &weights).unwrap();
    assert_eq!(a, b);
    let c = deep_supervised_loss(array![[0.9, 0.5], [0.1, 0.3]].view(), &targets, &weights).unwrap();
    assert_ne!(a, c, "the deepest level still matters");
}

#[test]
fn tape_loss_matches_the_plain_computation() {
    let scores = array![[0.91, 0.12, 0.55], [0.33, 0.72, 0.08], [0.5, 0.5, 0.5]];
    let targets = [1.0, 0.0, 1.0];
    let weights = [0.6, 0.8, 1.0];
    let plain = deep_supervised_loss(scores.view(), &targets, &weights).unwrap();

    let tape = Tape::new();
    let v = tape.leaf(scores.clone().into_dyn());
    let loss = deep_supervised_loss_on_tape(&tape, v, &targets, &weights).unwrap();
    let on_tape = tape.value(loss).sum();
    assert!(
        (on_tape - plain).abs() < 1e-12,
        "tape {on_tape} vs plain {plain}"
    );
}

#[test]
fn tape_loss_gradient_matches_finite_differences() {
    // Scores sit well inside the clamp band, so the loss is smooth there.
    let scores = array![[0.91, 0.12, 0.55], [0.33, 0.72, 0.08]];
    let targets = [1.0, 0.0];
    let weights = [0.6, 0.8, 1.0];

    let tape = Tape::new();
    let v = tape.leaf(scores.clone().into_dyn());
    let loss = deep_supervised_loss_on_tape(&tape, v, &targets, &weights).unwrap();
    let grads = tape.backward(loss, &[v]);
    let grad = &grads[&v.id];

    let h = 1e-6;
    for idx in 0..scores.len() {
        let eval = |delta: f64| {
            let mut bumped = scores.clone();
            bumped.as_slice_mut().unwrap()[idx] += delta;
            deep_supervised_loss(bumped.view(), &targets, &weights).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let a = grad.as_slice().unwrap()[idx];
        let denom = 1.0f64.max(a.abs()).max(fd.abs());
        assert!(
            ((a - fd) / denom).abs() < 1e-6,
            "score {idx}: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn tape_loss_rejects_shape_mismatch() {
    let tape = Tape::new();
    let v = tape.leaf(Array2::from_elem((2, 3), 0.5).into_dyn());
    let err = deep_supervised_loss_on_tape(&tape, v, &[1.0, 0.0], &[1.0, 1.0]).unwrap_err();
    assert!(err.to_string().contains("do not fit"), "{err}");
}

// ---------------------------------------------------------------------------
// Config validation and the learning-rate schedule
// ---------------------------------------------------------------------------

#[test]
fn train_config_validation_collects_every_error() {
    assert!(TrainConfig::default().validate().is_ok());

    let mut tc = TrainConfig::default();
    tc.pretrain.epochs = 0;
    tc.pretrain.batch_size = 0;
    tc.pretrain.initial_lr = -1.0;
    tc.pretrain.momentum = 1.0;
    tc.relation.patience = 0;
    tc.relation.lr_decay_factor = 0.5;
    tc.loss_weights = Some(vec![-1.0]);
    let err = tc.validate().unwrap_err();
    match err {
        DcnError::InvalidConfig(errors) => {
            for needle in [
                "pretrain.epochs",
                "pretrain.batch_size",
                "pretrain.initial_lr",
                "pretrain.momentum",
                "relation.patience",
                "relation.lr_decay_factor",
                "loss_weights",
            ] {
                assert!(
                    errors.iter().any(|e| e.contains(needle)),
                    "missing complaint about {needle}: {errors:?}"
                );
            }
            assert!(errors.len() >= 7);
        }
        other => panic!("expected InvalidConfig, got {other}"),
    }
}

#[test]
fn pretraining_log_shows_the_step_decay_schedule() {
    let ds = make_synthetic_dataset(4, 4, 10, 0.5, 17).unwrap();
    let split = split_classes(&ds, (0.5, 0.25, 0.25), 3).unwrap();
    let embed = EmbeddingConfig {
        stages: 1,
        blocks_per_stage: vec![1],
        channels_per_stage: vec![3],
        noise_enabled: false,
        ..tiny_embedding()
    };
    let mut tc = tiny_train(5);
    tc.pretrain.epochs = 4;
    tc.pretrain.initial_lr = 0.1;
    tc.pretrain.lr_decay_factor = 5.0;
    tc.pretrain.lr_decay_every = 2;
    tc.pretrain.batch_size = 64;

    let out = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
    let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    assert_eq!(lrs, vec![0.1, 0.1, 0.02, 0.02]);
    assert!(out.records.iter().all(|r| r.phase == "pretrain"));
}

#[test]
fn relation_log_shows_the_step_decay_schedule() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let mut tc = tiny_train(5);
    tc.pretrain.epochs = 1;
    tc.relation.episodes = 5;
    tc.relation.eval_every = 100; // never reached: no validation in budget
    tc.relation.initial_lr = 0.05;
    tc.relation.lr_decay_factor = 2.0;
    tc.relation.lr_decay_every = 2;

    let theta = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let out = train_relation(&ds, &split, &theta.params, &theta.config, &tiny_relation(), &tc)
        .unwrap();
    let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![0.05, 0.05, 0.025, 0.025, 0.0125]);
    // Validation never ran, so the best-count falls back to the full budget.
    assert_eq!(out.best_episode_count, 5);
    assert!(out.records.iter().all(|r| r.val_acc.is_none()));
}

// ---------------------------------------------------------------------------
// Phase 1: classifier pretraining
// ---------------------------------------------------------------------------

#[test]
fn pretraining_fits_the_head_and_recenters_inputs() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let mut tc = tiny_train(11);
    tc.pretrain.epochs = 6;

    let out = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let classes = split.part_classes(SplitPart::MetaTrain);
    assert_eq!(out.classes, classes);
    assert_eq!(out.config.num_pretrain_classes, Some(classes.len()));

    // The classifier head is sized for this split's class count.
    let head = out.params.get("embed.head.fc.w");
    assert_eq!(head.shape(), &[classes.len(), 4]);

    // The input shift is this split's per-channel mean, stored as-is.
    let part_images = split.part_images(SplitPart::MetaTrain);
    let mean = ds.channel_mean(Some(&part_images));
    let shift = out.params.get("input.channel_shift");
    assert_eq!(shift.as_slice().unwrap(), &mean[..]);

    // Per-epoch log: steps 1..=epochs, starting near the ln C random-guess
    // loss and improving from there.
    assert_eq!(out.records.len(), 6);
    let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
    let first = out.records[0].loss;
    let last = out.records[5].loss;
    let guess = (classes.len() as f64).ln();
    assert!(
        (first - guess).abs() < 0.4,
        "first-epoch loss {first} should sit near ln {} = {guess}",
        classes.len()
    );
    assert!(last < first, "loss should fall: {first} -> {last}");
}

#[test]
fn pretraining_needs_at_least_two_classes() {
    let ds = make_synthetic_dataset(3, 4, 10, 0.5, 2).unwrap();
    let split = split_classes(&ds, (0.34, 0.33, 0.33), 1).unwrap();
    let err = pretrain_embedding(
        &ds,
        &split,
        SplitPart::MetaTrain,
        &tiny_embedding(),
        &tiny_train(0),
        "pretrain",
    )
    .err()
    .expect("one-class pretraining must fail");
    assert!(err.to_string().contains("at least 2"), "{err}");
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let ds = make_synthetic_dataset(4, 4, 10, 0.5, 23).unwrap();
    let split = split_classes(&ds, (0.5, 0.25, 0.25), 3).unwrap();
    let mut tc = tiny_train(1);
    tc.pretrain.epochs = 6;
    tc.pretrain.batch_size = 64;
    tc.pretrain.initial_lr = 1e200;

    let err = pretrain_embedding(
        &ds,
        &split,
        SplitPart::MetaTrain,
        &tiny_embedding(),
        &tc,
        "pretrain",
    )
    .err()
    .expect("the run must diverge");
    assert!(
        matches!(err, DcnError::Divergence { .. }),
        "expected divergence, got {err}"
    );
    assert!(err.to_string().contains("diverged in pretrain"), "{err}");
}

// ---------------------------------------------------------------------------
// Phase 2: episodic relation training
// ---------------------------------------------------------------------------

#[test]
fn relation_training_logs_validation_and_keeps_the_best_episode() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let mut tc = tiny_train(13);
    tc.pretrain.epochs = 1;
    tc.relation.episodes = 6;
    tc.relation.eval_every = 2;
    tc.relation.patience = 5; // larger than the 3 evaluations in budget
    tc.relation.val_episodes = 2;

    let theta = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let out = train_relation(&ds, &split, &theta.params, &theta.config, &tiny_relation(), &tc)
        .unwrap();

    assert_eq!(out.records.len(), 6, "patience never ran out");
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.phase, "relation");
        assert_eq!(r.step, i as u64 + 1);
        assert!(r.loss.is_finite() && r.loss > 0.0);
        if r.step % 2 == 0 {
            let acc = r.val_acc.expect("validation runs every second episode");
            assert!((0.0..=1.0).contains(&acc), "accuracy {acc}");
        } else {
            assert!(r.val_acc.is_none());
        }
    }

    // The returned episode count is the step of the last strict improvement.
    let mut best: Option<(f64, u64)> = None;
    for r in &out.records {
        if let Some(acc) = r.val_acc {
            if best.map_or(true, |(b, _)| acc > b) {
                best = Some((acc, r.step));
            }
        }
    }
    assert_eq!(out.best_episode_count, best.unwrap().1);

    // φ is its own parameter set; θ stays untouched on the side.
    assert!(!out.relation.is_empty());
    let phi: BTreeSet<&String> = out.relation.names().collect();
    let theta_names: BTreeSet<&String> = theta.params.names().collect();
    assert!(phi.is_disjoint(&theta_names));
}

#[test]
fn early_stopping_obeys_the_patience_budget() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let mut tc = tiny_train(29);
    tc.pretrain.epochs = 1;
    tc.relation.episodes = 50;
    tc.relation.eval_every = 1;
    tc.relation.patience = 1;
    tc.relation.val_episodes = 1;

    let theta = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let out = train_relation(&ds, &split, &theta.params, &theta.config, &tiny_relation(), &tc)
        .unwrap();

    // A single 4-query validation episode can only improve a handful of
    // times, so one stale evaluation must cut the 50-episode budget short.
    assert!(
        out.records.len() < 50,
        "expected an early stop, ran {} episodes",
        out.records.len()
    );

    // Replay the stopping rule over the logged accuracies.
    let mut best: Option<(f64, u64)> = None;
    let mut stale = 0usize;
    let mut stopped_at = None;
    for r in &out.records {
        let acc = r.val_acc.expect("validation runs every episode");
        if best.map_or(true, |(b, _)| acc > b) {
            best = Some((acc, r.step));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.relation.patience {
                stopped_at = Some(r.step);
                break;
            }
        }
    }
    assert_eq!(out.records.last().unwrap().step, stopped_at.unwrap());
    assert_eq!(out.best_episode_count, best.unwrap().1);
}

#[test]
fn relation_loss_decreases_on_easy_episodes() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let rel = tiny_relation();
    let mut tc = tiny_train(31);
    tc.pretrain.epochs = 4;
    tc.relation.episodes = 40;
    tc.relation.eval_every = 1000; // train straight through
    tc.relation.initial_lr = 0.1;

    let theta = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let out = train_relation(&ds, &split, &theta.params, &theta.config, &rel, &tc).unwrap();
    let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 40);

    // Untrained relation scores hover near 0.5, so the first episode costs
    // about (Σ w) · ln 2.
    let guess = rel.score_weights.iter().sum::<f64>() * std::f64::consts::LN_2;
    assert!(
        (losses[0] - guess).abs() < 0.15,
        "first loss {} should sit near {guess}",
        losses[0]
    );

    let first10 = losses[..10].iter().sum::<f64>() / 10.0;
    let last10 = losses[30..].iter().sum::<f64>() / 10.0;
    assert!(
        last10 < first10,
        "mean loss should fall: first ten {first10:.4}, last ten {last10:.4}"
    );
}

#[test]
fn loss_weight_override_must_match_the_module_count() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let mut tc = tiny_train(3);
    tc.pretrain.epochs = 1;
    tc.loss_weights = Some(vec![0.5, 0.5, 0.5]);

    let theta = pretrain_embedding(&ds, &split, SplitPart::MetaTrain, &embed, &tc, "pretrain")
        .unwrap();
    let err = train_relation(&ds, &split, &theta.params, &theta.config, &tiny_relation(), &tc)
        .err()
        .expect("mismatched weights must fail");
    assert!(
        err.to_string()
            .contains("loss_weights has 3 entries, expected stages = 2"),
        "{err}"
    );
}

// ---------------------------------------------------------------------------
// The full pipeline
// ---------------------------------------------------------------------------

#[test]
fn disabling_retraining_reuses_the_earlier_phases() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let mut tc = tiny_train(17);
    tc.retrain = false;

    let result = train_full_pipeline(&ds, &split, &tiny_embedding(), &tiny_relation(), &tc)
        .unwrap();
    assert!(params_equal(&result.model.embedding, &result.pretrain_embedding));
    assert!(params_equal(&result.model.relation, &result.phase2_relation));
    assert!(result.retrain_classes.is_none());
    let phases: BTreeSet<&str> = result.history.iter().map(|r| r.phase.as_str()).collect();
    assert_eq!(phases, BTreeSet::from(["pretrain", "relation"]));
}

#[test]
fn retraining_runs_on_the_merged_split_with_the_chosen_budget() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let mut tc = tiny_train(19);
    tc.retrain = true;

    let result = train_full_pipeline(&ds, &split, &tiny_embedding(), &tiny_relation(), &tc)
        .unwrap();

    // Phases appear as contiguous blocks in pipeline order.
    let order = ["pretrain", "relation", "retrain-pretrain", "retrain-relation"];
    let mut cursor = 0usize;
    for phase in order {
        let first = result.history.iter().position(|r| r.phase == phase);
        let first = first.unwrap_or_else(|| panic!("phase {phase} missing from history"));
        assert!(first >= cursor, "phase {phase} out of order");
        let count = result.history.iter().filter(|r| r.phase == phase).count();
        assert!(
            result.history[first..first + count].iter().all(|r| r.phase == phase),
            "phase {phase} is not contiguous"
        );
        cursor = first + count;
    }
    assert_eq!(cursor, result.history.len());

    // Retraining sees the merged train∪val classes and replays exactly the
    // episode budget that won validation, with no further validation.
    let merged = split.part_classes(SplitPart::MetaTrainVal);
    assert_eq!(result.retrain_classes.as_deref(), Some(merged.as_slice()));
    assert_eq!(
        result.model.embed_config.num_pretrain_classes,
        Some(merged.len())
    );
    let retrain_rel: Vec<&TrainRecord> = result
        .history
        .iter()
        .filter(|r| r.phase == "retrain-relation")
        .collect();
    assert_eq!(retrain_rel.len() as u64, result.best_episode_count);
    assert!(retrain_rel.iter().all(|r| r.val_acc.is_none()));

    // The deployed head is wider than the phase-1 head (6 vs 4 classes).
    let deployed = result.model.embedding.get("embed.head.fc.w");
    let phase1 = result.pretrain_embedding.get("embed.head.fc.w");
    assert_eq!(deployed.shape(), &[6, 4]);
    assert_eq!(phase1.shape(), &[4, 4]);
}

#[test]
fn identical_seeds_reproduce_the_run_bit_for_bit() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let embed = tiny_embedding();
    let rel = tiny_relation();
    // Exercise every stochastic path: sampling noise, augmentation, retrain.
    let mut tc = tiny_train(23);
    tc.pretrain.epochs = 1;
    tc.relation.episodes = 2;
    tc.relation.eval_every = 1;
    tc.relation.patience = 5;
    tc.relation.val_episodes = 1;
    tc.noise = true;
    tc.augment_pretrain = true;
    tc.augment_relation = true;
    tc.retrain = true;

    let a = train_full_pipeline(&ds, &split, &embed, &rel, &tc).unwrap();
    let b = train_full_pipeline(&ds, &split, &embed, &rel, &tc).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_episode_count, b.best_episode_count);
    assert!(params_equal(&a.model.embedding, &b.model.embedding));
    assert!(params_equal(&a.model.relation, &b.model.relation));

    let mut other = tc.clone();
    other.seed = 24;
    let c = train_full_pipeline(&ds, &split, &embed, &rel, &other).unwrap();
    assert_ne!(
        a.history, c.history,
        "a different seed must change the trajectory"
    );
}

#[test]
fn trained_model_scores_episodes_through_the_common_interface() {
    let ds = tiny_dataset();
    let split = tiny_split(&ds);
    let rel = tiny_relation();
    let mut tc = tiny_train(37);
    tc.pretrain.epochs = 1;
    tc.relation.episodes = 2;

    let result = train_full_pipeline(&ds, &split, &tiny_embedding(), &rel, &tc).unwrap();
    let model = &result.model;
    assert_eq!(model.num_levels(), 2);
    assert_eq!(model.score_weights(), rel.score_weights.as_slice());

    let mut rng = sub_rng(99, "test/episode");
    let episode = sample_episode(&ds, &split, SplitPart::MetaTest, tc.episode, &mut rng).unwrap();
    let scored = model.score_episode(&episode).unwrap();
    assert_eq!(scored.len(), episode.query.len());
    for row in &scored {
        assert_eq!(row.len(), episode.ways());
        for sv in row {
            assert_eq!(sv.per_module.len(), 2);
            assert!(sv.per_module.iter().all(|&s| (0.0..1.0).contains(&s)));
            let hand: f64 = sv
                .per_module
                .iter()
                .zip(&rel.score_weights)
                .map(|(s, w)| s * w)
                .sum();
            assert!((sv.aggregate - hand).abs() < 1e-12);
        }
    }

    // The trait object and the borrowed scorer agree exactly.
    let via_ref = model.scorer().score_episode(&episode).unwrap();
    for (a, b) in scored.iter().flatten().zip(via_ref.iter().flatten()) {
        assert_eq!(a.per_module, b.per_module);
        assert_eq!(a.aggregate, b.aggregate);
    }
}

// ---------------------------------------------------------------------------
// Log serialization
// ---------------------------------------------------------------------------

#[test]
fn records_serialize_one_json_object_per_line() {
    let records = vec![
        TrainRecord {
            phase: "pretrain".into(),
            step: 1,
            loss: 1.25,
            lr: 0.1,
            val_acc: None,
        },
        TrainRecord {
            phase: "relation".into(),
            step: 2,
            loss: 0.5,
            lr: 0.05,
            val_acc: Some(0.75),
        },
    ];
    let jsonl = records_to_jsonl(&records);
    let lines: Vec<&str> = jsonl.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(jsonl.ends_with('\n'));

    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["phase"], "pretrain");
    assert_eq!(first["step"], 1);
    assert!(
        first.get("val_acc").is_none(),
        "absent validation stays out of the log line"
    );
    let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(second["val_acc"], 0.75);

    // Lines parse back into the records they came from.
    let back: Vec<TrainRecord> = lines
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, records);
}
