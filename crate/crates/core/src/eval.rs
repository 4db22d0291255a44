//! Episodic evaluation, confidence intervals, and score-correlation analysis.

use crate::data::{sample_episode, Dataset, DatasetSplit, Episode, EpisodeSpec, SplitPart};
use crate::embedding::{embed, split_hierarchy, stack_images, EmbedMode, EmbeddingConfig};
use crate::error::{DcnError, Result};
use crate::nn::Params;
use crate::relation::{class_prototypes, predict, relation_scores, RelationConfig, ScoreVector};
use crate::seed::sub_rng;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Anything that can score a few-shot episode. The indirection lets tests
/// drive the evaluation machinery with synthetic scorers.
pub trait EpisodeScorer {
    /// Number of relation modules V.
    fn num_levels(&self) -> usize;
    /// Aggregation weights w_1..w_V.
    fn score_weights(&self) -> &[f64];
    /// `result[q][k]`: query q compared against episode-local class k.
    fn score_episode(&self, episode: &Episode) -> Result<Vec<Vec<ScoreVector>>>;
}

/// Borrowed view of a trained model, scoring episodes deterministically
/// (stochastic features collapse to their means at evaluation time).
pub struct ModelRef<'a> {
    pub embedding: &'a Params,
    pub relation: &'a Params,
    pub embed_config: &'a EmbeddingConfig,
    pub rel_config: &'a RelationConfig,
}

impl EpisodeScorer for ModelRef<'_> {
    fn num_levels(&self) -> usize {
        self.rel_config.stages
    }

    fn score_weights(&self) -> &[f64] {
        &self.rel_config.score_weights
    }

    fn score_episode(&self, episode: &Episode) -> Result<Vec<Vec<ScoreVector>>> {
        let ways = episode.ways();
        if episode.support.is_empty() || episode.query.is_empty() {
            return Err(DcnError::invalid("episode has an empty support or query set"));
        }
        let all: Vec<_> = episode.support.iter().chain(episode.query.iter()).collect();
        let batch = stack_images(&all);
        // Deterministic mode never draws from this generator.
        let mut rng = sub_rng(0, "eval/deterministic");
        let features = embed(
            self.embedding,
            self.embed_config,
            &batch,
            EmbedMode::Deterministic,
            &mut rng,
        )?;
        let (support, query) = split_hierarchy(features, episode.support.len());
        let protos = class_prototypes(&support, &episode.support_local_labels(), ways)?;
        let scores = relation_scores(self.relation, self.rel_config, &query, &protos)?;
        let weights = self.score_weights().to_vec();
        let mut out = Vec::with_capacity(episode.query.len());
        for q in 0..episode.query.len() {
            let mut row = Vec::with_capacity(ways);
            for k in 0..ways {
                let per_module = scores.row(q * ways + k).to_vec();
                row.push(ScoreVector::new(per_module, &weights)?);
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// Diagnostic scorer that knows each query's true class: every module
/// scores 1 for it and 0 for the rest.
pub struct OracleScorer {
    pub levels: usize,
    pub weights: Vec<f64>,
}

impl EpisodeScorer for OracleScorer {
    fn num_levels(&self) -> usize {
        self.levels
    }

    fn score_weights(&self) -> &[f64] {
        &self.weights
    }

    fn score_episode(&self, episode: &Episode) -> Result<Vec<Vec<ScoreVector>>> {
        let ways = episode.ways();
        let labels = episode.query_local_labels();
        labels
            .iter()
            .map(|&truth| {
                (0..ways)
                    .map(|k| {
                        let s = f64::from(k == truth);
                        ScoreVector::new(vec![s; self.levels], &self.weights)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Arithmetic mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1 denominator); 0 for fewer than 2 values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// Normal-approximation 95% half-width: `1.96 · s / √n`.
pub fn ci95(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    1.96 * sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Evaluation summary over a batch of episodes.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub num_episodes: usize,
    /// Mean of per-episode accuracies.
    pub mean_accuracy: f64,
    /// 95% half-width over per-episode accuracies.
    pub ci95: f64,
    /// Accuracy when predicting from each module's score alone, pooled over
    /// all queries.
    pub per_module_accuracy: Vec<f64>,
    /// Per-module accuracies keyed by original class name.
    pub per_class_accuracy: BTreeMap<String, Vec<f64>>,
    pub episode_accuracies: Vec<f64>,
}

/// Score `num_episodes` episodes from the split part and summarize.
pub fn evaluate<R: Rng>(
    scorer: &dyn EpisodeScorer,
    dataset: &Dataset,
    split: &DatasetSplit,
    part: SplitPart,
    spec: EpisodeSpec,
    num_episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if num_episodes == 0 {
        return Err(DcnError::invalid("need at least one evaluation episode"));
    }
    let v = scorer.num_levels();
    if v == 0 {
        return Err(DcnError::invalid("scorer reports zero relation modules"));
    }
    let mut episode_accuracies = Vec::with_capacity(num_episodes);
    let mut module_correct = vec![0u64; v];
    let mut total_queries = 0u64;
    let mut class_stats: BTreeMap<String, (Vec<u64>, u64)> = BTreeMap::new();

    for _ in 0..num_episodes {
        let episode = sample_episode(dataset, split, part, spec, rng)?;
        let scores = scorer.score_episode(&episode)?;
        if scores.len() != episode.query.len() {
            return Err(DcnError::ShapeMismatch(format!(
                "scorer returned {} query rows for {} queries",
                scores.len(),
                episode.query.len()
            )));
        }
        let labels = episode.query_local_labels();
        let mut correct = 0usize;
        for (q, per_class) in scores.iter().enumerate() {
            if per_class.len() != episode.ways() {
                return Err(DcnError::ShapeMismatch(format!(
                    "scorer returned {} class scores for {} ways",
                    per_class.len(),
                    episode.ways()
                )));
            }
            if per_class.iter().any(|s| s.per_module.len() != v) {
                return Err(DcnError::ShapeMismatch(
                    "score vector length does not match the module count".to_string(),
                ));
            }
            let truth = labels[q];
            let aggregates: Vec<f64> = per_class.iter().map(|s| s.aggregate).collect();
            if predict(&aggregates)? == truth {
                correct += 1;
            }
            let class_name = dataset.class_names[episode.query[q].label].clone();
            let entry = class_stats.entry(class_name).or_insert((vec![0u64; v], 0));
            entry.1 += 1;
            total_queries += 1;
            for (m, correct_slot) in module_correct.iter_mut().enumerate() {
                let per_module: Vec<f64> = per_class.iter().map(|s| s.per_module[m]).collect();
                if predict(&per_module)? == truth {
                    *correct_slot += 1;
                    entry.0[m] += 1;
                }
            }
        }
        episode_accuracies.push(correct as f64 / labels.len() as f64);
    }

    let per_module_accuracy = module_correct
        .iter()
        .map(|&c| c as f64 / total_queries as f64)
        .collect();
    let per_class_accuracy = class_stats
        .into_iter()
        .map(|(name, (correct, total))| {
            (
                name,
                correct.iter().map(|&c| c as f64 / total as f64).collect(),
            )
        })
        .collect();
    Ok(EvalReport {
        ways: spec.ways,
        shots: spec.shots,
        queries_per_class: spec.queries_per_class,
        num_episodes,
        mean_accuracy: mean(&episode_accuracies),
        ci95: ci95(&episode_accuracies),
        per_module_accuracy,
        per_class_accuracy,
        episode_accuracies,
    })
}

/// Accuracy of module `v` (1-indexed) predicting on its own.
pub fn module_accuracy(report: &EvalReport, module: usize) -> Result<f64> {
    if module == 0 || module > report.per_module_accuracy.len() {
        return Err(DcnError::invalid(format!(
            "module index {module} out of range 1..={}",
            report.per_module_accuracy.len()
        )));
    }
    Ok(report.per_module_accuracy[module - 1])
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(DcnError::invalid("NaN in correlation input"));
    }
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("NaN filtered above"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // Positions start..end share the average of ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(ranks)
}

/// Spearman rank correlation with average ranks on ties. Errors when either
/// input has zero rank variance (the coefficient is undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DcnError::ShapeMismatch(format!(
            "correlation inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(DcnError::invalid("correlation needs at least 2 samples"));
    }
    let ra = average_ranks(a)?;
    let rb = average_ranks(b)?;
    let ma = mean(&ra);
    let mb = mean(&rb);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DcnError::invalid(
            "zero rank variance: correlation is undefined",
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Pairwise Spearman correlations between module scores.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationMatrix {
    pub modules: usize,
    pub sample_pairs: usize,
    /// `values[i][j]`: correlation between modules i+1 and j+1.
    pub values: Vec<Vec<f64>>,
}

/// Correlate per-module scores over (query, class) pairs drawn from fresh
/// episodes of the split part.
pub fn module_correlation_matrix<R: Rng>(
    scorer: &dyn EpisodeScorer,
    dataset: &Dataset,
    split: &DatasetSplit,
    part: SplitPart,
    spec: EpisodeSpec,
    sample_pairs: usize,
    rng: &mut R,
) -> Result<CorrelationMatrix> {
    if sample_pairs < 2 {
        return Err(DcnError::invalid("correlation needs at least 2 sample pairs"));
    }
    let v = scorer.num_levels();
    let mut per_module: Vec<Vec<f64>> = vec![Vec::with_capacity(sample_pairs); v];
    'outer: loop {
        let episode = sample_episode(dataset, split, part, spec, rng)?;
        let scores = scorer.score_episode(&episode)?;
        for row in &scores {
            for sv in row {
                if sv.per_module.len() != v {
                    return Err(DcnError::ShapeMismatch(
                        "score vector length does not match the module count".to_string(),
                    ));
                }
                for (m, &s) in sv.per_module.iter().enumerate() {
                    per_module[m].push(s);
                }
                if per_module[0].len() == sample_pairs {
                    break 'outer;
                }
            }
        }
    }
    let mut values = vec![vec![0.0; v]; v];
    for i in 0..v {
        for j in 0..v {
            values[i][j] = if i == j {
                1.0
            } else {
                spearman(&per_module[i], &per_module[j])?
            };
        }
    }
    Ok(CorrelationMatrix {
        modules: v,
        sample_pairs,
        values,
    })
}

/// Per-class accuracies of two modules, as scatter-plot rows sorted by
/// class name. Module indices are 1-based.
pub fn per_class_scatter(
    report: &EvalReport,
    module_x: usize,
    module_y: usize,
) -> Result<Vec<(String, f64, f64)>> {
    let v = report.per_module_accuracy.len();
    for m in [module_x, module_y] {
        if m == 0 || m > v {
            return Err(DcnError::invalid(format!(
                "module index {m} out of range 1..={v}"
            )));
        }
    }
    Ok(report
        .per_class_accuracy
        .iter()
        .map(|(name, accs)| (name.clone(), accs[module_x - 1], accs[module_y - 1]))
        .collect())
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    record: &'static str,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    num_episodes: usize,
    mean_accuracy: f64,
    ci95: f64,
    per_module_accuracy: &'a [f64],
}

#[derive(Serialize)]
struct ClassLine<'a> {
    record: &'static str,
    class: &'a str,
    per_module_accuracy: &'a [f64],
}

/// Report as JSON lines: one summary record, then one record per class.
pub fn report_to_jsonl(report: &EvalReport) -> String {
    let mut out = serde_json::to_string(&SummaryLine {
        record: "summary",
        ways: report.ways,
        shots: report.shots,
        queries_per_class: report.queries_per_class,
        num_episodes: report.num_episodes,
        mean_accuracy: report.mean_accuracy,
        ci95: report.ci95,
        per_module_accuracy: &report.per_module_accuracy,
    })
    .expect("summary serializes");
    out.push('\n');
    for (class, accs) in &report.per_class_accuracy {
        out.push_str(
            &serde_json::to_string(&ClassLine {
                record: "class",
                class,
                per_module_accuracy: accs,
            })
            .expect("class line serializes"),
        );
        out.push('\n');
    }
    out
}

/// Per-episode accuracies as CSV.
pub fn episode_accuracies_csv(report: &EvalReport) -> String {
    let mut out = String::from("episode,accuracy\n");
    for (i, acc) in report.episode_accuracies.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, acc));
    }
    out
}

/// Correlation matrix as CSV with RM1..RMV row and column labels.
pub fn correlation_csv(matrix: &CorrelationMatrix) -> String {
    let mut out = String::new();
    for j in 1..=matrix.modules {
        out.push_str(&format!(",RM{j}"));
    }
    out.push('\n');
    for (i, row) in matrix.values.iter().enumerate() {
        out.push_str(&format!("RM{}", i + 1));
        for value in row {
            out.push_str(&format!(",{value}"));
        }
        out.push('\n');
    }
    out
}

/// Scatter rows as CSV.
pub fn scatter_csv(points: &[(String, f64, f64)], module_x: usize, module_y: usize) -> String {
    let mut out = format!("class,rm{module_x}_accuracy,rm{module_y}_accuracy\n");
    for (class, x, y) in points {
        out.push_str(&format!("{class},{x},{y}\n"));
    }
    out
}
