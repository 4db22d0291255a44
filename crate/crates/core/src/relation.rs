//! Per-level relation modules: learned similarity over the feature hierarchy.
//!
//! Module v compares a query's level-v feature with a class prototype's,
//! concatenated channel-wise with the previous module's output so deeper
//! comparisons build on shallower ones. Every module also projects its
//! output to a sigmoid relation score; the weighted sum of all levels'
//! scores ranks candidate classes.

use crate::autodiff::{Tape, Var};
use crate::embedding::{BlockKind, BlockSpec, EmbeddingConfig, FeatureHierarchy};
use crate::error::{DcnError, Result};
use crate::nn::{he_linear, zeros, Params, TapeParams};
use ndarray::{Array2, Array4, ArrayD, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Architecture of the relation column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    /// Number of relation modules V (one per embedding level).
    pub stages: usize,
    pub blocks_per_module: usize,
    /// Channel widths of the embedding levels being compared.
    pub channels_per_stage: Vec<usize>,
    /// Per-level aggregation weights w_v (deepest last).
    pub score_weights: Vec<f64>,
    pub block_kind: BlockKind,
    pub se_reduction: usize,
}

/// Default aggregation weights for a four-level hierarchy.
pub const DEFAULT_SCORE_WEIGHTS: [f64; 4] = [0.3, 0.4, 0.5, 1.0];

impl RelationConfig {
    /// Relation column matching an embedding column.
    pub fn for_embedding(embed: &EmbeddingConfig) -> Self {
        let weights = if embed.stages == 4 {
            DEFAULT_SCORE_WEIGHTS.to_vec()
        } else {
            // Shallower levels count less; the deepest has full weight.
            (1..=embed.stages)
                .map(|v| 0.5 + 0.5 * (v as f64 / embed.stages as f64))
                .collect()
        };
        Self {
            stages: embed.stages,
            blocks_per_module: 2,
            channels_per_stage: embed.channels_per_stage.clone(),
            score_weights: weights,
            block_kind: embed.block_kind,
            se_reduction: embed.se_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.stages == 0 {
            errors.push("stages must be at least 1".to_string());
        }
        if self.blocks_per_module == 0 {
            errors.push("blocks_per_module must be at least 1".to_string());
        }
        if self.channels_per_stage.len() != self.stages {
            errors.push(format!(
                "channels_per_stage has {} entries, expected stages = {}",
                self.channels_per_stage.len(),
                self.stages
            ));
        }
        if self.channels_per_stage.contains(&0) {
            errors.push("stage channel counts must be positive".to_string());
        }
        if self.score_weights.len() != self.stages {
            errors.push(format!(
                "score_weights has {} entries, expected stages = {}",
                self.score_weights.len(),
                self.stages
            ));
        }
        if self.score_weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            errors.push("score weights must be positive".to_string());
        }
        if self.se_reduction == 0 {
            errors.push("se_reduction must be at least 1".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DcnError::InvalidConfig(errors))
        }
    }

    /// Spatial size of each module's output map for the given level sizes.
    ///
    /// Shares the stride layout with the forward pass: every module but the
    /// last halves resolution (same padding) so its output lines up with the
    /// next embedding level; the last keeps the deepest resolution.
    pub fn module_output_sizes(&self, level_sizes: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if level_sizes.len() != self.stages {
            return Err(DcnError::ShapeMismatch(format!(
                "expected {} level sizes, got {}",
                self.stages,
                level_sizes.len()
            )));
        }
        Ok((0..self.stages)
            .map(|v| level_sizes[v].div_ceil(self.module_stride(v)))
            .collect())
    }

    /// Input channels of module v (0-indexed): query + prototype features,
    /// plus the previous module's output from level 2 on.
    fn module_in_channels(&self, v: usize) -> usize {
        let c = self.channels_per_stage[v];
        if v == 0 {
            2 * c
        } else {
            3 * c
        }
    }

    /// Output channels of module v: the next level's width (the last module
    /// keeps the deepest width).
    fn module_out_channels(&self, v: usize) -> usize {
        self.channels_per_stage[(v + 1).min(self.stages - 1)]
    }

    /// All modules except the last halve resolution, keeping each module's
    /// output aligned with the next embedding level.
    fn module_stride(&self, v: usize) -> usize {
        if v + 1 < self.stages {
            2
        } else {
            1
        }
    }

    fn module_blocks(&self, v: usize) -> Vec<BlockSpec> {
        (0..self.blocks_per_module)
            .map(|i| BlockSpec {
                prefix: format!("rel.m{v}.b{i}"),
                in_ch: if i == 0 {
                    self.module_in_channels(v)
                } else {
                    self.module_out_channels(v)
                },
                out_ch: self.module_out_channels(v),
                stride: if i == 0 { self.module_stride(v) } else { 1 },
                noise_extra: false,
                kind: self.block_kind,
                se_reduction: self.se_reduction,
            })
            .collect()
    }
}

/// Initialize φ: every module's blocks plus its scalar score head.
pub fn init_relation_params<R: Rng>(config: &RelationConfig, rng: &mut R) -> Result<Params> {
    config.validate()?;
    let mut params = Params::new();
    for v in 0..config.stages {
        for spec in config.module_blocks(v) {
            spec.init(&mut params, rng);
        }
        params.insert(
            format!("rel.m{v}.head.w"),
            he_linear(rng, 1, config.module_out_channels(v)),
        );
        params.insert(format!("rel.m{v}.head.b"), zeros(&[1]));
    }
    Ok(params)
}

/// Per-class mean of support features, level by level.
pub fn class_prototypes(
    support: &FeatureHierarchy,
    labels: &[usize],
    ways: usize,
) -> Result<FeatureHierarchy> {
    let groups = label_groups(labels, ways)?;
    let mut levels = Vec::with_capacity(support.levels.len());
    for level in &support.levels {
        let (b, c, h, w) = level.dim();
        if b != labels.len() {
            return Err(DcnError::ShapeMismatch(format!(
                "level has batch {b} but {} labels were given",
                labels.len()
            )));
        }
        let mut proto = Array4::<f64>::zeros((ways, c, h, w));
        for (k, group) in groups.iter().enumerate() {
            let mut slot = proto.index_axis_mut(ndarray::Axis(0), k);
            for &i in group {
                slot += &level.index_axis(ndarray::Axis(0), i);
            }
            slot /= group.len() as f64;
        }
        levels.push(proto);
    }
    Ok(FeatureHierarchy { levels })
}

/// Tape version of [`class_prototypes`], differentiable in the features.
pub fn class_prototypes_on_tape(
    tape: &Tape,
    support_levels: &[Var],
    labels: &[usize],
    ways: usize,
) -> Result<Vec<Var>> {
    let groups = label_groups(labels, ways)?;
    Ok(support_levels
        .iter()
        .map(|&level| tape.group_mean_axis0(level, &groups))
        .collect())
}

/// Support indices per episode-local class; errors on empty classes.
fn label_groups(labels: &[usize], ways: usize) -> Result<Vec<Vec<usize>>> {
    if ways == 0 {
        return Err(DcnError::invalid("prototypes need at least one class"));
    }
    let mut groups = vec![Vec::new(); ways];
    for (i, &l) in labels.iter().enumerate() {
        if l >= ways {
            return Err(DcnError::invalid(format!(
                "label {l} out of range for {ways} classes"
            )));
        }
        groups[l].push(i);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(DcnError::invalid(format!(
            "class {empty} has no support features"
        )));
    }
    Ok(groups)
}

/// Relation scores on a tape for explicit (query, class) pairs.
///
/// `query_levels` and `proto_levels` hold the V per-level feature maps;
/// the result is `[pairs.len(), V]`, one sigmoid score per module.
pub fn relation_forward_on_tape(
    tape: &Tape,
    tp: &TapeParams,
    config: &RelationConfig,
    query_levels: &[Var],
    proto_levels: &[Var],
    pairs: &[(usize, usize)],
) -> Result<Var> {
    config.validate()?;
    if query_levels.len() != config.stages || proto_levels.len() != config.stages {
        return Err(DcnError::ShapeMismatch(format!(
            "expected {} feature levels, got {} query / {} prototype",
            config.stages,
            query_levels.len(),
            proto_levels.len()
        )));
    }
    if pairs.is_empty() {
        return Err(DcnError::invalid("no (query, class) pairs to score"));
    }
    let q_idx: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let c_idx: Vec<usize> = pairs.iter().map(|&(_, c)| c).collect();

    let mut prev: Option<Var> = None;
    let mut scores = Vec::with_capacity(config.stages);
    for v in 0..config.stages {
        let q_shape = tape.value(query_levels[v]).shape().to_vec();
        let p_shape = tape.value(proto_levels[v]).shape().to_vec();
        if q_shape[1..] != p_shape[1..] {
            return Err(DcnError::ShapeMismatch(format!(
                "level {} query features {:?} do not match prototypes {:?}",
                v + 1,
                q_shape,
                p_shape
            )));
        }
        if q_shape[1] != config.channels_per_stage[v] {
            return Err(DcnError::ShapeMismatch(format!(
                "level {} features have {} channels, config expects {}",
                v + 1,
                q_shape[1],
                config.channels_per_stage[v]
            )));
        }
        let q_sel = tape.index_select0(query_levels[v], &q_idx);
        let p_sel = tape.index_select0(proto_levels[v], &c_idx);
        let x = match prev {
            None => tape.concat_axis1(&[q_sel, p_sel]),
            Some(g) => {
                let g_shape = tape.value(g).shape().to_vec();
                if g_shape[2..] != q_shape[2..] {
                    return Err(DcnError::ShapeMismatch(format!(
                        "carried relation output {:?} does not align with level {} features {:?}",
                        g_shape,
                        v + 1,
                        q_shape
                    )));
                }
                tape.concat_axis1(&[q_sel, p_sel, g])
            }
        };
        let mut y = x;
        for spec in config.module_blocks(v) {
            let (mean, _) = spec.forward(tape, tp, y);
            y = mean;
        }
        prev = Some(y);
        let pooled = tape.global_avg_pool(y);
        let logit = tape.linear(
            pooled,
            tp.var(&format!("rel.m{v}.head.w")),
            tp.var(&format!("rel.m{v}.head.b")),
        );
        scores.push(tape.sigmoid(logit));
    }
    Ok(tape.concat_axis1(&scores))
}

/// Score every (query, class) pair through the relation column.
///
/// Rows are query-major: pair `q * ways + k` compares query `q` with class
/// `k`. Work is chunked over throwaway tapes to bound memory.
pub fn relation_scores(
    params: &Params,
    config: &RelationConfig,
    query: &FeatureHierarchy,
    protos: &FeatureHierarchy,
) -> Result<Array2<f64>> {
    config.validate()?;
    let n_query = query
        .levels
        .first()
        .ok_or_else(|| DcnError::invalid("query hierarchy has no levels"))?
        .dim()
        .0;
    let ways = protos
        .levels
        .first()
        .ok_or_else(|| DcnError::invalid("prototype hierarchy has no levels"))?
        .dim()
        .0;
    if n_query == 0 || ways == 0 {
        return Err(DcnError::invalid("empty query or prototype batch"));
    }
    let pairs: Vec<(usize, usize)> = (0..n_query)
        .flat_map(|q| (0..ways).map(move |k| (q, k)))
        .collect();

    let q_levels: Vec<Rc<ArrayD<f64>>> = query
        .levels
        .iter()
        .map(|l| Rc::new(l.clone().into_dyn()))
        .collect();
    let p_levels: Vec<Rc<ArrayD<f64>>> = protos
        .levels
        .iter()
        .map(|l| Rc::new(l.clone().into_dyn()))
        .collect();

    const CHUNK: usize = 256;
    let mut out = Array2::<f64>::zeros((pairs.len(), config.stages));
    for (chunk_i, chunk) in pairs.chunks(CHUNK).enumerate() {
        let tape = Tape::new();
        let tp = TapeParams::new(&tape, params, false);
        let q_vars: Vec<Var> = q_levels
            .iter()
            .map(|l| tape.constant_shared(Rc::clone(l)))
            .collect();
        let p_vars: Vec<Var> = p_levels
            .iter()
            .map(|l| tape.constant_shared(Rc::clone(l)))
            .collect();
        let scores = relation_forward_on_tape(&tape, &tp, config, &q_vars, &p_vars, chunk)?;
        let values = tape
            .value_owned(scores)
            .into_dimensionality::<Ix2>()
            .expect("scores are 2-d");
        let offset = chunk_i * CHUNK;
        for (row, value_row) in values.outer_iter().enumerate() {
            for v in 0..config.stages {
                out[[offset + row, v]] = value_row[v];
            }
        }
    }
    Ok(out)
}

/// One query-class comparison: per-module scores and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub per_module: Vec<f64>,
    pub aggregate: f64,
}

impl ScoreVector {
    pub fn new(per_module: Vec<f64>, weights: &[f64]) -> Result<Self> {
        let aggregate = aggregate_scores(&per_module, weights)?;
        Ok(Self {
            per_module,
            aggregate,
        })
    }
}

/// Weighted sum Σ_v w_v · r_v of one pair's per-module scores.
pub fn aggregate_scores(per_module: &[f64], weights: &[f64]) -> Result<f64> {
    if per_module.len() != weights.len() {
        return Err(DcnError::ShapeMismatch(format!(
            "{} module scores but {} weights",
            per_module.len(),
            weights.len()
        )));
    }
    Ok(per_module
        .iter()
        .zip(weights)
        .map(|(r, w)| r * w)
        .sum())
}

/// Arg-max over aggregate scores; ties resolve to the lowest class index.
pub fn predict(aggregates: &[f64]) -> Result<usize> {
    if aggregates.is_empty() {
        return Err(DcnError::invalid("no candidate classes to predict over"));
    }
    if aggregates.iter().any(|s| s.is_nan()) {
        return Err(DcnError::invalid("NaN aggregate score"));
    }
    let mut best = 0;
    for (k, &s) in aggregates.iter().enumerate().skip(1) {
        if s > aggregates[best] {
            best = k;
        }
    }
    Ok(best)
}
