//! The staged Siamese embedding column.
//!
//! Each stage stacks residual/squeeze-excite blocks and halves resolution,
//! yielding one feature map per abstraction level. A stage's final block can
//! additionally emit one extra channel: a sigmoid-bounded, spatially-shared
//! standard deviation, from which the stage output is sampled during
//! training via the reparameterization trick. A global-average-pool
//! classifier head on the last level drives pretraining.

use crate::autodiff::{Tape, Var};
use crate::error::{DcnError, Result};
use crate::nn::{he_conv, he_linear, standard_normal, zeros, Params, TapeParams};
use ndarray::{Array2, Array4, ArrayD, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convolutional block flavor (the architecture ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// conv → relu → conv → relu, no skip connection.
    PlainConv,
    /// conv → relu → conv → (+ skip) → relu.
    Residual,
    /// Residual block with a squeeze-excite channel gate before the skip.
    SqueezeExcite,
}

/// Architecture of the embedding column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Number of stages V (one feature level per stage).
    pub stages: usize,
    pub blocks_per_stage: Vec<usize>,
    pub channels_per_stage: Vec<usize>,
    pub block_kind: BlockKind,
    pub se_reduction: usize,
    /// 7×7 stride-2 conv + 3×3 stride-2 max-pool in front of stage 1.
    pub stem: bool,
    /// Give each stage's final block the extra std channel.
    pub noise_enabled: bool,
    /// Gaussian draws averaged per forward pass (training mode only).
    pub noise_samples: usize,
    /// Reuse one ε across stages (strided to each stage's resolution)
    /// instead of drawing independently per stage.
    pub shared_epsilon: bool,
    /// C': classifier width for pretraining; `None` when no head is needed.
    pub num_pretrain_classes: Option<usize>,
}

impl EmbeddingConfig {
    /// Desk-scale defaults: 32×32 inputs, no stem.
    pub fn desk() -> Self {
        Self {
            stages: 4,
            blocks_per_stage: vec![3, 4, 6, 3],
            channels_per_stage: vec![16, 32, 64, 128],
            block_kind: BlockKind::SqueezeExcite,
            se_reduction: 16,
            stem: false,
            noise_enabled: true,
            noise_samples: 1,
            shared_epsilon: false,
            num_pretrain_classes: None,
        }
    }

    /// Paper-scale architecture: 224×224 inputs behind a downsampling stem.
    pub fn paper() -> Self {
        Self {
            stages: 4,
            blocks_per_stage: vec![3, 4, 6, 3],
            channels_per_stage: vec![64, 128, 256, 512],
            stem: true,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.stages == 0 {
            errors.push("stages must be at least 1".to_string());
        }
        if self.blocks_per_stage.len() != self.stages {
            errors.push(format!(
                "blocks_per_stage has {} entries, expected stages = {}",
                self.blocks_per_stage.len(),
                self.stages
            ));
        }
        if self.channels_per_stage.len() != self.stages {
            errors.push(format!(
                "channels_per_stage has {} entries, expected stages = {}",
                self.channels_per_stage.len(),
                self.stages
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            errors.push("every stage needs at least one block".to_string());
        }
        if self.channels_per_stage.contains(&0) {
            errors.push("stage channel counts must be positive".to_string());
        }
        if self
            .channels_per_stage
            .windows(2)
            .any(|w| w[1] < w[0])
        {
            errors.push("channels must increase or stay equal across stages".to_string());
        }
        if self.se_reduction == 0 {
            errors.push("se_reduction must be at least 1".to_string());
        }
        if self.noise_samples == 0 {
            errors.push("noise_samples must be at least 1".to_string());
        }
        if let Some(c) = self.num_pretrain_classes {
            if c < 2 {
                errors.push("num_pretrain_classes must be at least 2".to_string());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DcnError::InvalidConfig(errors))
        }
    }

    /// Whether stage `v` (0-indexed) opens with a stride-2 block. The stem
    /// already quarters the resolution, so behind a stem the first stage
    /// keeps its input size.
    fn stage_downsamples(&self, v: usize) -> bool {
        v > 0 || !self.stem
    }

    /// Total stride-2 steps from input to the last level.
    fn total_downsamples(&self) -> usize {
        let stem = if self.stem { 2 } else { 0 };
        stem + (0..self.stages).filter(|&v| self.stage_downsamples(v)).count()
    }

    /// Smallest input edge the column accepts.
    pub fn min_input_size(&self) -> usize {
        1usize << self.total_downsamples()
    }

    /// Spatial output size of every stage for a square input.
    ///
    /// All downsampling steps are ceil-halvings (3×3 stride-2, pad-1 convs
    /// and pools; the 7×7 stem conv uses pad 3), so sizes follow
    /// `s -> (s + 1) / 2`.
    pub fn stage_output_sizes(&self, input: usize) -> Result<Vec<usize>> {
        if input < self.min_input_size() {
            return Err(DcnError::invalid(format!(
                "input size {input} is too small to survive {} downsamplings (needs ≥ {})",
                self.total_downsamples(),
                self.min_input_size()
            )));
        }
        let halve = |s: usize| s.div_ceil(2);
        let mut s = input;
        if self.stem {
            s = halve(halve(s));
        }
        let mut sizes = Vec::with_capacity(self.stages);
        for v in 0..self.stages {
            if self.stage_downsamples(v) {
                s = halve(s);
            }
            sizes.push(s);
        }
        Ok(sizes)
    }
}

/// Whether a forward pass draws from the stochastic features or returns
/// their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    Deterministic,
    Sample,
}

/// The V per-level feature maps of one image batch.
#[derive(Debug, Clone)]
pub struct FeatureHierarchy {
    /// Level v: `[batch, channels_v, h_v, w_v]`.
    pub levels: Vec<Array4<f64>>,
}

/// A level's Gaussian feature: per-channel mean, channel-shared std.
#[derive(Debug, Clone)]
pub struct StochasticFeature {
    /// `[b, c, h, w]`.
    pub mean: Array4<f64>,
    /// `[b, 1, h, w]`, sigmoid-bounded to (0, 1).
    pub std: Array4<f64>,
}

/// Draw `mean + ε ⊙ std` with ε broadcast across the channel axis.
pub fn sample_stochastic(sf: &StochasticFeature, epsilon: &Array4<f64>) -> Result<Array4<f64>> {
    let (b, c, h, w) = sf.mean.dim();
    if sf.std.dim() != (b, 1, h, w) {
        return Err(DcnError::ShapeMismatch(format!(
            "std shaped {:?}, expected [{b}, 1, {h}, {w}]",
            sf.std.dim()
        )));
    }
    if epsilon.dim() != (b, 1, h, w) {
        return Err(DcnError::ShapeMismatch(format!(
            "epsilon shaped {:?}, expected [{b}, 1, {h}, {w}]",
            epsilon.dim()
        )));
    }
    let mut out = sf.mean.clone();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[bi, ci, hi, wi]] += epsilon[[bi, 0, hi, wi]] * sf.std[[bi, 0, hi, wi]];
                }
            }
        }
    }
    Ok(out)
}

/// Tape version of [`sample_stochastic`], differentiable in mean and std.
pub fn sample_stochastic_on_tape(tape: &Tape, mean: Var, std: Var, epsilon: &ArrayD<f64>) -> Var {
    tape.add_scaled_noise(mean, std, epsilon)
}

/// One convolutional block's wiring (shared by embedding and relation
/// columns).
#[derive(Debug, Clone)]
pub(crate) struct BlockSpec {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Emit the extra std channel out of this block.
    pub noise_extra: bool,
    pub kind: BlockKind,
    pub se_reduction: usize,
}

/// Bias initialization of the std channel: sigmoid(-3) ≈ 0.047 keeps the
/// initial noise small.
const STD_BIAS_INIT: f64 = -3.0;

impl BlockSpec {
    fn conv2_out(&self) -> usize {
        self.out_ch + usize::from(self.noise_extra)
    }

    fn needs_proj(&self) -> bool {
        self.kind != BlockKind::PlainConv && (self.stride != 1 || self.in_ch != self.out_ch)
    }

    pub(crate) fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) {
        let p = &self.prefix;
        params.insert(format!("{p}.conv1.w"), he_conv(rng, self.out_ch, self.in_ch, 3, 3));
        params.insert(format!("{p}.conv1.b"), zeros(&[self.out_ch]));
        let c2 = self.conv2_out();
        params.insert(format!("{p}.conv2.w"), he_conv(rng, c2, self.out_ch, 3, 3));
        let mut b2 = zeros(&[c2]);
        if self.noise_extra {
            b2[[self.out_ch]] = STD_BIAS_INIT;
        }
        params.insert(format!("{p}.conv2.b"), b2);
        if self.kind == BlockKind::SqueezeExcite {
            let hidden = (c2 / self.se_reduction).max(1);
            params.insert(format!("{p}.se.fc1.w"), he_linear(rng, hidden, c2));
            params.insert(format!("{p}.se.fc1.b"), zeros(&[hidden]));
            params.insert(format!("{p}.se.fc2.w"), he_linear(rng, c2, hidden));
            params.insert(format!("{p}.se.fc2.b"), zeros(&[c2]));
        }
        if self.needs_proj() {
            params.insert(format!("{p}.proj.w"), he_conv(rng, self.out_ch, self.in_ch, 1, 1));
            params.insert(format!("{p}.proj.b"), zeros(&[self.out_ch]));
        }
    }

    /// Forward on the tape; returns the activated mean path and, for noise
    /// blocks, the sigmoid-bounded std map `[b,1,h,w]`.
    pub(crate) fn forward(&self, tape: &Tape, tp: &TapeParams, x: Var) -> (Var, Option<Var>) {
        let p = &self.prefix;
        let v = |suffix: &str| tp.var(&format!("{p}.{suffix}"));
        let h = tape.conv2d(x, v("conv1.w"), v("conv1.b"), self.stride, 1);
        let h = tape.relu(h);
        let mut y = tape.conv2d(h, v("conv2.w"), v("conv2.b"), 1, 1);
        if self.kind == BlockKind::SqueezeExcite {
            let s = tape.global_avg_pool(y);
            let s = tape.relu(tape.linear(s, v("se.fc1.w"), v("se.fc1.b")));
            let s = tape.sigmoid(tape.linear(s, v("se.fc2.w"), v("se.fc2.b")));
            y = tape.scale_channels(y, s);
        }
        let (mean_pre, std_pre) = if self.noise_extra {
            (
                tape.slice_axis1(y, 0, self.out_ch),
                Some(tape.slice_axis1(y, self.out_ch, self.out_ch + 1)),
            )
        } else {
            (y, None)
        };
        let mean_pre = if self.kind == BlockKind::PlainConv {
            mean_pre
        } else {
            let skip = if self.needs_proj() {
                tape.conv2d(x, v("proj.w"), v("proj.b"), self.stride, 0)
            } else {
                x
            };
            tape.add(mean_pre, skip)
        };
        (tape.relu(mean_pre), std_pre.map(|z| tape.sigmoid(z)))
    }
}

/// All block specs of the embedding column, stage by stage.
fn embedding_blocks(config: &EmbeddingConfig) -> Vec<Vec<BlockSpec>> {
    let mut stages = Vec::with_capacity(config.stages);
    // The stem already lifts the input to stage-1 width.
    let mut in_ch = if config.stem { config.channels_per_stage[0] } else { 3 };
    for v in 0..config.stages {
        let out_ch = config.channels_per_stage[v];
        let blocks = config.blocks_per_stage[v];
        let mut specs = Vec::with_capacity(blocks);
        for i in 0..blocks {
            specs.push(BlockSpec {
                prefix: format!("embed.s{v}.b{i}"),
                in_ch,
                out_ch,
                stride: if i == 0 && config.stage_downsamples(v) { 2 } else { 1 },
                noise_extra: config.noise_enabled && i == blocks - 1,
                kind: config.block_kind,
                se_reduction: config.se_reduction,
            });
            in_ch = out_ch;
        }
        stages.push(specs);
    }
    stages
}

/// Initialize θ: stem, stage blocks, classifier head (when C' is set), plus
/// the input channel-shift slot (zeros until the pipeline fills it).
pub fn init_embedding_params<R: Rng>(config: &EmbeddingConfig, rng: &mut R) -> Result<Params> {
    config.validate()?;
    let mut params = Params::new();
    params.insert("input.channel_shift", zeros(&[3]));
    if config.stem {
        let stem_out = config.channels_per_stage[0];
        params.insert("embed.stem.conv.w", he_conv(rng, stem_out, 3, 7, 7));
        params.insert("embed.stem.conv.b", zeros(&[stem_out]));
    }
    for stage in embedding_blocks(config) {
        for spec in stage {
            spec.init(&mut params, rng);
        }
    }
    if let Some(c) = config.num_pretrain_classes {
        let width = *config.channels_per_stage.last().expect("validated stages ≥ 1");
        params.insert("embed.head.fc.w", he_linear(rng, c, width));
        params.insert("embed.head.fc.b", zeros(&[c]));
    }
    Ok(params)
}

/// Feature hierarchy of one forward pass on a tape.
pub struct TapeHierarchy {
    /// Stage outputs (sampled or mean, per mode).
    pub levels: Vec<Var>,
    /// Each stage's std map when the noise head is present.
    pub stds: Vec<Option<Var>>,
}

/// Top-left stride-2 subsample, taking ε to the next stage's resolution.
fn stride2_spatial(eps: &ArrayD<f64>) -> ArrayD<f64> {
    let e4 = eps.view().into_dimensionality::<Ix4>().expect("eps 4-d");
    e4.slice(ndarray::s![.., .., ..;2, ..;2]).to_owned().into_dyn()
}

/// Run the embedding column on a tape.
///
/// The same parameter binding serves every call site (support and query
/// batches alike): the column is Siamese by construction.
pub fn embed_on_tape<R: Rng>(
    tape: &Tape,
    tp: &TapeParams,
    config: &EmbeddingConfig,
    images: &Array4<f64>,
    mode: EmbedMode,
    rng: &mut R,
) -> Result<TapeHierarchy> {
    config.validate()?;
    let (b, c, h, w) = images.dim();
    if b == 0 {
        return Err(DcnError::invalid("image batch is empty"));
    }
    if c != 3 {
        return Err(DcnError::ShapeMismatch(format!(
            "expected 3 input channels, got {c}"
        )));
    }
    config.stage_output_sizes(h.min(w))?;

    // Center inputs with the training-split channel shift (a data statistic
    // carried in the parameter store but never optimized).
    let shift = tp.raw("input.channel_shift");
    let mut shifted = images.clone();
    for ci in 0..3 {
        let s = shift[[ci]];
        shifted
            .index_axis_mut(ndarray::Axis(1), ci)
            .mapv_inplace(|v| v - s);
    }

    let mut x = tape.constant(shifted.into_dyn());
    if config.stem {
        let sc = tape.conv2d(
            x,
            tp.var("embed.stem.conv.w"),
            tp.var("embed.stem.conv.b"),
            2,
            3,
        );
        x = tape.maxpool2d(tape.relu(sc), 3, 2, 1);
    }

    let sample = mode == EmbedMode::Sample && config.noise_enabled;
    let mut levels = Vec::with_capacity(config.stages);
    let mut stds = Vec::with_capacity(config.stages);
    let mut prev_eps: Option<ArrayD<f64>> = None;
    for stage in embedding_blocks(config) {
        let mut stage_std = None;
        for spec in stage {
            let (mean, std) = spec.forward(tape, tp, x);
            x = match (&std, sample) {
                (Some(std), true) => {
                    let shape = tape.value(mean).shape().to_vec();
                    let eps_shape = [shape[0], 1, shape[2], shape[3]];
                    let eps = match &prev_eps {
                        Some(prev) if config.shared_epsilon => stride2_spatial(prev),
                        _ => {
                            let mut acc = standard_normal(rng, &eps_shape);
                            for _ in 1..config.noise_samples {
                                acc += &standard_normal(rng, &eps_shape);
                            }
                            acc / config.noise_samples as f64
                        }
                    };
                    debug_assert_eq!(eps.shape(), eps_shape);
                    prev_eps = Some(eps.clone());
                    tape.add_scaled_noise(mean, *std, &eps)
                }
                _ => mean,
            };
            stage_std = std;
        }
        levels.push(x);
        stds.push(stage_std);
    }
    Ok(TapeHierarchy { levels, stds })
}

/// Plain-array embedding forward (inference path).
pub fn embed<R: Rng>(
    params: &Params,
    config: &EmbeddingConfig,
    images: &Array4<f64>,
    mode: EmbedMode,
    rng: &mut R,
) -> Result<FeatureHierarchy> {
    let tape = Tape::new();
    let tp = TapeParams::new(&tape, params, false);
    let hierarchy = embed_on_tape(&tape, &tp, config, images, mode, rng)?;
    let levels = hierarchy
        .levels
        .into_iter()
        .map(|v| {
            tape.value_owned(v)
                .into_dimensionality::<Ix4>()
                .expect("stage outputs are 4-d")
        })
        .collect();
    Ok(FeatureHierarchy { levels })
}

/// Plain-array forward that also returns each stage's stochastic feature.
pub fn embed_stochastic<R: Rng>(
    params: &Params,
    config: &EmbeddingConfig,
    images: &Array4<f64>,
    rng: &mut R,
) -> Result<(FeatureHierarchy, Vec<Option<StochasticFeature>>)> {
    let tape = Tape::new();
    let tp = TapeParams::new(&tape, params, false);
    let hierarchy = embed_on_tape(&tape, &tp, config, images, EmbedMode::Deterministic, rng)?;
    let mut levels = Vec::with_capacity(hierarchy.levels.len());
    let mut feats = Vec::with_capacity(hierarchy.levels.len());
    for (lvl, std) in hierarchy.levels.iter().zip(&hierarchy.stds) {
        let mean = tape
            .value_owned(*lvl)
            .into_dimensionality::<Ix4>()
            .expect("stage outputs are 4-d");
        feats.push(std.map(|s| StochasticFeature {
            mean: mean.clone(),
            std: tape
                .value_owned(s)
                .into_dimensionality::<Ix4>()
                .expect("std maps are 4-d"),
        }));
        levels.push(mean);
    }
    Ok((FeatureHierarchy { levels }, feats))
}

/// Classifier head on the tape: global average pool, then affine to C'.
pub fn classify_logits_on_tape(tape: &Tape, tp: &TapeParams, final_level: Var) -> Var {
    let pooled = tape.global_avg_pool(final_level);
    tape.linear(pooled, tp.var("embed.head.fc.w"), tp.var("embed.head.fc.b"))
}

/// Plain-array classifier logits `[b, C']` from the final-level feature.
pub fn classify_logits(
    params: &Params,
    config: &EmbeddingConfig,
    final_level: &Array4<f64>,
) -> Result<Array2<f64>> {
    if config.num_pretrain_classes.is_none() {
        return Err(DcnError::invalid(
            "num_pretrain_classes is unset; the classifier head does not exist",
        ));
    }
    let tape = Tape::new();
    let tp = TapeParams::new(&tape, params, false);
    let x = tape.constant(final_level.clone().into_dyn());
    let logits = classify_logits_on_tape(&tape, &tp, x);
    Ok(tape
        .value_owned(logits)
        .into_dimensionality::<Ix2>()
        .expect("logits are 2-d"))
}

/// Split a stacked hierarchy into the first `m` rows and the rest.
pub fn split_hierarchy(features: FeatureHierarchy, m: usize) -> (FeatureHierarchy, FeatureHierarchy) {
    let mut first = Vec::with_capacity(features.levels.len());
    let mut second = Vec::with_capacity(features.levels.len());
    for level in features.levels {
        let (a, b) = level.view().split_at(ndarray::Axis(0), m);
        first.push(a.to_owned());
        second.push(b.to_owned());
    }
    (
        FeatureHierarchy { levels: first },
        FeatureHierarchy { levels: second },
    )
}

/// Convenience: stack labeled images into a `[B,3,H,W]` batch.
pub fn stack_images(images: &[&crate::data::LabeledImage]) -> Array4<f64> {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let (c, h, w) = images[0].pixels.dim();
    let mut batch = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        batch
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&img.pixels);
    }
    batch
}
