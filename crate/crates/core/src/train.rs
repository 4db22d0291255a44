//! Three-phase training: classifier pretraining of the embedding column,
//! deeply supervised relation training with the embedding frozen, and an
//! early-stopped retraining pass over the merged train+validation classes.

use crate::data::{
    augment, sample_episode, Dataset, DatasetSplit, EpisodeSpec, LabeledImage, SplitPart,
};
use crate::embedding::{
    classify_logits_on_tape, embed, embed_on_tape, init_embedding_params, split_hierarchy,
    stack_images, EmbedMode, EmbeddingConfig,
};
use crate::error::{DcnError, Result};
use crate::eval::{evaluate, EpisodeScorer, ModelRef};
use crate::nn::{grads_by_name, Params, Sgd, SgdConfig, TapeParams};
use crate::relation::{
    class_prototypes, init_relation_params, relation_forward_on_tape, RelationConfig, ScoreVector,
};
use crate::seed::sub_rng;
use crate::autodiff::{Tape, Var};
use ndarray::{Array1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Relation scores are clamped to `[ε, 1-ε]` before the log-loss.
pub const CLAMP_EPS: f64 = 1e-7;

/// Phase-1 optimizer settings (plain classification of training classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Learning rate divides by this factor every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 64,
            initial_lr: 0.1,
            lr_decay_factor: 5.0,
            lr_decay_every: 60,
            momentum: 0.9,
        }
    }
}

/// Phase-2 optimizer settings (episodic relation training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSettings {
    /// Episode budget before early stopping.
    pub episodes: u64,
    /// Validate every this many episodes.
    pub eval_every: u64,
    /// Consecutive non-improving validations tolerated before stopping.
    pub patience: usize,
    /// Validation episodes per evaluation.
    pub val_episodes: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub momentum: f64,
}

impl Default for RelationSettings {
    fn default() -> Self {
        Self {
            episodes: 2000,
            eval_every: 200,
            patience: 3,
            val_episodes: 40,
            initial_lr: 0.05,
            lr_decay_factor: 2.0,
            lr_decay_every: 1000,
            momentum: 0.9,
        }
    }
}

/// Everything the three training phases need beyond the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain: PretrainSettings,
    pub relation: RelationSettings,
    /// Episode shape used for relation training and validation.
    pub episode: EpisodeSpec,
    /// Per-level loss weights; defaults to the score aggregation weights.
    pub loss_weights: Option<Vec<f64>>,
    /// `false` trains on the deepest relation score only.
    pub deep_supervision: bool,
    /// Sample the stochastic features during training passes.
    pub noise: bool,
    /// Run the third phase (merged-split retraining).
    pub retrain: bool,
    pub augment_pretrain: bool,
    pub augment_relation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainSettings::default(),
            relation: RelationSettings::default(),
            episode: EpisodeSpec::new(5, 1, 5),
            loss_weights: None,
            deep_supervision: true,
            noise: true,
            retrain: true,
            augment_pretrain: true,
            augment_relation: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if self.pretrain.epochs == 0 {
            errors.push("pretrain.epochs must be at least 1".to_string());
        }
        if self.pretrain.batch_size == 0 {
            errors.push("pretrain.batch_size must be at least 1".to_string());
        }
        if !lr_ok(self.pretrain.initial_lr) {
            errors.push("pretrain.initial_lr must be positive".to_string());
        }
        if !self.pretrain.lr_decay_factor.is_finite() || self.pretrain.lr_decay_factor < 1.0 {
            errors.push("pretrain.lr_decay_factor must be at least 1".to_string());
        }
        if self.pretrain.lr_decay_every == 0 {
            errors.push("pretrain.lr_decay_every must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.pretrain.momentum) {
            errors.push("pretrain.momentum must be in [0, 1)".to_string());
        }
        if self.relation.episodes == 0 {
            errors.push("relation.episodes must be at least 1".to_string());
        }
        if self.relation.eval_every == 0 {
            errors.push("relation.eval_every must be at least 1".to_string());
        }
        if self.relation.patience == 0 {
            errors.push("relation.patience must be at least 1".to_string());
        }
        if self.relation.val_episodes == 0 {
            errors.push("relation.val_episodes must be at least 1".to_string());
        }
        if !lr_ok(self.relation.initial_lr) {
            errors.push("relation.initial_lr must be positive".to_string());
        }
        if !self.relation.lr_decay_factor.is_finite() || self.relation.lr_decay_factor < 1.0 {
            errors.push("relation.lr_decay_factor must be at least 1".to_string());
        }
        if self.relation.lr_decay_every == 0 {
            errors.push("relation.lr_decay_every must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.relation.momentum) {
            errors.push("relation.momentum must be in [0, 1)".to_string());
        }
        if let Err(e) = self.episode.validate() {
            errors.push(e.to_string());
        }
        if let Some(w) = &self.loss_weights {
            if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                errors.push("loss_weights must be finite and non-negative".to_string());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DcnError::InvalidConfig(errors))
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub phase: String,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

/// Step-decay schedule: divide by `factor` every `every` steps.
fn lr_at(initial: f64, factor: f64, every: u64, step: u64) -> f64 {
    initial / factor.powi((step / every) as i32)
}

/// Per-level loss weights after applying the deep-supervision switch.
pub fn effective_loss_weights(weights: &[f64], deep_supervision: bool) -> Vec<f64> {
    if deep_supervision {
        weights.to_vec()
    } else {
        let mut w = vec![0.0; weights.len()];
        if let Some(last) = w.last_mut() {
            *last = 1.0;
        }
        w
    }
}

/// Deeply supervised episode loss: per-pair weighted binary cross-entropy
/// over all levels, averaged over pairs. Scores are clamped to
/// `[CLAMP_EPS, 1 - CLAMP_EPS]`.
pub fn deep_supervised_loss(
    scores: ArrayView2<f64>,
    targets: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let (p, v) = scores.dim();
    if targets.len() != p {
        return Err(DcnError::ShapeMismatch(format!(
            "{p} score rows but {} targets",
            targets.len()
        )));
    }
    if weights.len() != v {
        return Err(DcnError::ShapeMismatch(format!(
            "{v} score columns but {} weights",
            weights.len()
        )));
    }
    if p == 0 {
        return Err(DcnError::invalid("no pairs to compute a loss over"));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(DcnError::invalid("pair targets must be 0 or 1"));
    }
    let mut total = 0.0;
    for (row, &t) in scores.outer_iter().zip(targets) {
        for (col, &w) in row.iter().zip(weights) {
            let r = col.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            total += w * -(t * r.ln() + (1.0 - t) * (1.0 - r).ln());
        }
    }
    Ok(total / p as f64)
}

/// Tape version of [`deep_supervised_loss`] (same clamping and weighting).
pub fn deep_supervised_loss_on_tape(
    tape: &Tape,
    scores: Var,
    targets: &[f64],
    weights: &[f64],
) -> Result<Var> {
    let shape = tape.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || shape[1] != weights.len() {
        return Err(DcnError::ShapeMismatch(format!(
            "scores {shape:?} do not fit {} targets × {} weights",
            targets.len(),
            weights.len()
        )));
    }
    let mut target_matrix = ndarray::Array2::<f64>::zeros((targets.len(), weights.len()));
    for (mut row, &t) in target_matrix.outer_iter_mut().zip(targets) {
        row.fill(t);
    }
    let clamped = tape.clamp(scores, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let bce = tape.bce(clamped, &target_matrix.into_dyn());
    Ok(tape.weighted_mean_rows(bce, weights))
}

/// Output of phase 1: trained parameters, the head-carrying config, and the
/// classes the classifier saw.
pub struct PretrainOutput {
    pub params: Params,
    pub config: EmbeddingConfig,
    pub classes: Vec<usize>,
    pub records: Vec<TrainRecord>,
}

/// Phase 1: train the embedding column as a `C'`-way classifier over all
/// images of the given split part.
pub fn pretrain_embedding(
    dataset: &Dataset,
    split: &DatasetSplit,
    part: SplitPart,
    embed_config: &EmbeddingConfig,
    tc: &TrainConfig,
    phase: &str,
) -> Result<PretrainOutput> {
    tc.validate()?;
    let classes = split.part_classes(part);
    if classes.len() < 2 {
        return Err(DcnError::Dataset(format!(
            "{part} has {} classes; pretraining needs at least 2",
            classes.len()
        )));
    }
    let mut config = embed_config.clone();
    config.num_pretrain_classes = Some(classes.len());
    config.validate()?;

    let mut init_rng = sub_rng(tc.seed, &format!("{phase}/init"));
    let mut params = init_embedding_params(&config, &mut init_rng)?;

    // Re-center inputs around this split's mean; the shift rides along in
    // the parameter store as a constant.
    let part_images = split.part_images(part);
    let shift = dataset.channel_mean(Some(&part_images));
    params.set(
        "input.channel_shift",
        Array1::from(shift.to_vec()).into_dyn(),
    );

    let local_label: std::collections::BTreeMap<usize, usize> = classes
        .iter()
        .enumerate()
        .map(|(local, &class)| (class, local))
        .collect();

    let mode = if tc.noise && config.noise_enabled {
        EmbedMode::Sample
    } else {
        EmbedMode::Deterministic
    };
    let mut sgd = Sgd::new(SgdConfig {
        momentum: tc.pretrain.momentum,
        weight_decay: 0.0,
    });
    let mut records = Vec::with_capacity(tc.pretrain.epochs);
    let mut step: u64 = 0;
    for epoch in 0..tc.pretrain.epochs {
        let mut rng = sub_rng(tc.seed, &format!("{phase}/epoch/{epoch}"));
        let mut order = part_images.clone();
        order.shuffle(&mut rng);
        let lr = lr_at(
            tc.pretrain.initial_lr,
            tc.pretrain.lr_decay_factor,
            tc.pretrain.lr_decay_every as u64,
            epoch as u64,
        );
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.pretrain.batch_size) {
            step += 1;
            let images: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| augment(&dataset.images[i], &mut rng, tc.augment_pretrain))
                .collect();
            let refs: Vec<&LabeledImage> = images.iter().collect();
            let batch = stack_images(&refs);
            let labels: Vec<usize> = images.iter().map(|im| local_label[&im.label]).collect();

            let (loss_val, grads) = {
                let tape = Tape::new();
                let tp = TapeParams::new(&tape, &params, true);
                let hierarchy = embed_on_tape(&tape, &tp, &config, &batch, mode, &mut rng)?;
                let last = *hierarchy.levels.last().expect("validated stages ≥ 1");
                let logits = classify_logits_on_tape(&tape, &tp, last);
                let loss = tape.softmax_cross_entropy(logits, &labels);
                let loss_val = tape.value(loss).sum();
                if !loss_val.is_finite() {
                    return Err(DcnError::Divergence {
                        phase: phase.to_string(),
                        step,
                        loss: loss_val,
                    });
                }
                let grads = grads_by_name(&tape, loss, &tp.bound());
                (loss_val, grads)
            };
            sgd.step(&mut params, &grads, lr);
            epoch_loss += loss_val;
            batches += 1;
        }
        records.push(TrainRecord {
            phase: phase.to_string(),
            step: (epoch + 1) as u64,
            loss: epoch_loss / batches.max(1) as f64,
            lr,
            val_acc: None,
        });
    }
    Ok(PretrainOutput {
        params,
        config,
        classes,
        records,
    })
}

/// Output of a relation-training phase.
pub struct RelationPhaseOutput {
    pub relation: Params,
    /// Episode count at the best validation accuracy (the full budget when
    /// validation is off or never ran).
    pub best_episode_count: u64,
    pub records: Vec<TrainRecord>,
}

/// Train the relation column on episodes from `part`, with the embedding
/// frozen. With `validate` on, runs periodic meta-validation, keeps the
/// best φ, and early-stops after `patience` stale evaluations.
#[allow(clippy::too_many_arguments)]
fn run_relation_phase(
    dataset: &Dataset,
    split: &DatasetSplit,
    part: SplitPart,
    embedding: &Params,
    embed_config: &EmbeddingConfig,
    rel_config: &RelationConfig,
    tc: &TrainConfig,
    phase: &str,
    episodes: u64,
    validate: bool,
) -> Result<RelationPhaseOutput> {
    tc.validate()?;
    rel_config.validate()?;
    let weights = tc
        .loss_weights
        .clone()
        .unwrap_or_else(|| rel_config.score_weights.clone());
    if weights.len() != rel_config.stages {
        return Err(DcnError::InvalidConfig(vec![format!(
            "loss_weights has {} entries, expected stages = {}",
            weights.len(),
            rel_config.stages
        )]));
    }
    let eff_weights = effective_loss_weights(&weights, tc.deep_supervision);

    let mut init_rng = sub_rng(tc.seed, &format!("{phase}/init"));
    let mut phi = init_relation_params(rel_config, &mut init_rng)?;
    let mut ep_rng = sub_rng(tc.seed, &format!("{phase}/episodes"));

    let mode = if tc.noise && embed_config.noise_enabled {
        EmbedMode::Sample
    } else {
        EmbedMode::Deterministic
    };
    let mut sgd = Sgd::new(SgdConfig {
        momentum: tc.relation.momentum,
        weight_decay: 0.0,
    });
    let mut records = Vec::new();
    let mut best: Option<(f64, Params, u64)> = None;
    let mut stale_evals = 0usize;
    let mut episodes_run = 0u64;

    for ep in 1..=episodes {
        episodes_run = ep;
        let episode = sample_episode(dataset, split, part, tc.episode, &mut ep_rng)?;
        let ways = episode.ways();
        let support: Vec<LabeledImage> = episode
            .support
            .iter()
            .map(|im| augment(im, &mut ep_rng, tc.augment_relation))
            .collect();
        let query: Vec<LabeledImage> = episode
            .query
            .iter()
            .map(|im| augment(im, &mut ep_rng, tc.augment_relation))
            .collect();
        let all: Vec<&LabeledImage> = support.iter().chain(query.iter()).collect();
        let batch = stack_images(&all);

        // The embedding is frozen: run it off-tape and feed the features in
        // as constants.
        let features = embed(embedding, embed_config, &batch, mode, &mut ep_rng)?;
        let (support_feats, query_feats) = split_hierarchy(features, support.len());
        let protos = class_prototypes(&support_feats, &episode.support_local_labels(), ways)?;

        let query_labels = episode.query_local_labels();
        let pairs: Vec<(usize, usize)> = (0..query.len())
            .flat_map(|q| (0..ways).map(move |k| (q, k)))
            .collect();
        let targets: Vec<f64> = pairs
            .iter()
            .map(|&(q, k)| f64::from(query_labels[q] == k))
            .collect();

        let lr = lr_at(
            tc.relation.initial_lr,
            tc.relation.lr_decay_factor,
            tc.relation.lr_decay_every,
            ep - 1,
        );
        let (loss_val, grads) = {
            let tape = Tape::new();
            let tp = TapeParams::new(&tape, &phi, true);
            let q_vars: Vec<Var> = query_feats
                .levels
                .iter()
                .map(|l| tape.constant(l.clone().into_dyn()))
                .collect();
            let p_vars: Vec<Var> = protos
                .levels
                .iter()
                .map(|l| tape.constant(l.clone().into_dyn()))
                .collect();
            let scores =
                relation_forward_on_tape(&tape, &tp, rel_config, &q_vars, &p_vars, &pairs)?;
            let loss = deep_supervised_loss_on_tape(&tape, scores, &targets, &eff_weights)?;
            let loss_val = tape.value(loss).sum();
            if !loss_val.is_finite() {
                return Err(DcnError::Divergence {
                    phase: phase.to_string(),
                    step: ep,
                    loss: loss_val,
                });
            }
            let grads = grads_by_name(&tape, loss, &tp.bound());
            (loss_val, grads)
        };
        sgd.step(&mut phi, &grads, lr);
        records.push(TrainRecord {
            phase: phase.to_string(),
            step: ep,
            loss: loss_val,
            lr,
            val_acc: None,
        });

        if validate && ep % tc.relation.eval_every == 0 {
            let eval_index = ep / tc.relation.eval_every;
            let mut val_rng = sub_rng(tc.seed, &format!("{phase}/val/{eval_index}"));
            let scorer = ModelRef {
                embedding,
                relation: &phi,
                embed_config,
                rel_config,
            };
            let report = evaluate(
                &scorer,
                dataset,
                split,
                SplitPart::MetaVal,
                tc.episode,
                tc.relation.val_episodes,
                &mut val_rng,
            )?;
            let val_acc = report.mean_accuracy;
            if let Some(last) = records.last_mut() {
                last.val_acc = Some(val_acc);
            }
            let improved = best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc);
            if improved {
                best = Some((val_acc, phi.clone(), ep));
                stale_evals = 0;
            } else {
                stale_evals += 1;
                if stale_evals >= tc.relation.patience {
                    break;
                }
            }
        }
    }

    let (relation, best_episode_count) = match best {
        Some((_, best_phi, count)) if validate => (best_phi, count),
        _ => (phi, episodes_run),
    };
    Ok(RelationPhaseOutput {
        relation,
        best_episode_count,
        records,
    })
}

/// Phase 2: train φ on meta-train episodes with validation-based early
/// stopping; returns the best φ and the episode count that achieved it.
pub fn train_relation(
    dataset: &Dataset,
    split: &DatasetSplit,
    embedding: &Params,
    embed_config: &EmbeddingConfig,
    rel_config: &RelationConfig,
    tc: &TrainConfig,
) -> Result<RelationPhaseOutput> {
    run_relation_phase(
        dataset,
        split,
        SplitPart::MetaTrain,
        embedding,
        embed_config,
        rel_config,
        tc,
        "relation",
        tc.relation.episodes,
        true,
    )
}

/// A deployable model: both parameter sets plus their architectures.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub embedding: Params,
    pub relation: Params,
    pub embed_config: EmbeddingConfig,
    pub rel_config: RelationConfig,
}

impl TrainedModel {
    pub fn scorer(&self) -> ModelRef<'_> {
        ModelRef {
            embedding: &self.embedding,
            relation: &self.relation,
            embed_config: &self.embed_config,
            rel_config: &self.rel_config,
        }
    }
}

impl EpisodeScorer for TrainedModel {
    fn num_levels(&self) -> usize {
        self.rel_config.stages
    }

    fn score_weights(&self) -> &[f64] {
        &self.rel_config.score_weights
    }

    fn score_episode(&self, episode: &crate::data::Episode) -> Result<Vec<Vec<ScoreVector>>> {
        self.scorer().score_episode(episode)
    }
}

/// Everything the full pipeline produces.
pub struct PipelineResult {
    /// Phase-1 embedding (θ after classifier pretraining on meta-train).
    pub pretrain_embedding: Params,
    pub pretrain_embed_config: EmbeddingConfig,
    pub pretrain_classes: Vec<usize>,
    /// Phase-2 relation parameters at the best validation accuracy.
    pub phase2_relation: Params,
    pub best_episode_count: u64,
    /// Classes of the merged retraining split (when phase 3 ran).
    pub retrain_classes: Option<Vec<usize>>,
    /// The deployable model (the retrained one when `retrain` is set).
    pub model: TrainedModel,
    pub history: Vec<TrainRecord>,
}

/// Run all phases end to end.
pub fn train_full_pipeline(
    dataset: &Dataset,
    split: &DatasetSplit,
    embed_config: &EmbeddingConfig,
    rel_config: &RelationConfig,
    tc: &TrainConfig,
) -> Result<PipelineResult> {
    tc.validate()?;
    let phase1 = pretrain_embedding(
        dataset,
        split,
        SplitPart::MetaTrain,
        embed_config,
        tc,
        "pretrain",
    )?;
    let mut history = phase1.records;

    let phase2 = train_relation(
        dataset,
        split,
        &phase1.params,
        &phase1.config,
        rel_config,
        tc,
    )?;
    history.extend(phase2.records.iter().cloned());

    let mut retrain_classes = None;
    let model = if tc.retrain {
        let p1 = pretrain_embedding(
            dataset,
            split,
            SplitPart::MetaTrainVal,
            embed_config,
            tc,
            "retrain-pretrain",
        )?;
        history.extend(p1.records.iter().cloned());
        let p2 = run_relation_phase(
            dataset,
            split,
            SplitPart::MetaTrainVal,
            &p1.params,
            &p1.config,
            rel_config,
            tc,
            "retrain-relation",
            phase2.best_episode_count,
            false,
        )?;
        history.extend(p2.records.iter().cloned());
        retrain_classes = Some(p1.classes);
        TrainedModel {
            embedding: p1.params,
            relation: p2.relation,
            embed_config: p1.config,
            rel_config: rel_config.clone(),
        }
    } else {
        TrainedModel {
            embedding: phase1.params.clone(),
            relation: phase2.relation.clone(),
            embed_config: phase1.config.clone(),
            rel_config: rel_config.clone(),
        }
    };

    Ok(PipelineResult {
        pretrain_embedding: phase1.params,
        pretrain_embed_config: phase1.config,
        pretrain_classes: phase1.classes,
        phase2_relation: phase2.relation,
        best_episode_count: phase2.best_episode_count,
        retrain_classes,
        model,
        history,
    })
}

/// Serialize training records as JSON lines.
pub fn records_to_jsonl(records: &[TrainRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
