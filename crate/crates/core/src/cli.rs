//! Command-line entry points: dataset generation, training, evaluation.

use crate::checkpoint::{load_checkpoint, save_checkpoint, save_model};
use crate::config::ExperimentConfig;
use crate::data::{synth_class_images, write_split_manifest, SplitPart};
use crate::error::{DcnError, Result};
use crate::eval::{
    episode_accuracies_csv, evaluate, module_correlation_matrix, per_class_scatter,
    correlation_csv, report_to_jsonl, scatter_csv,
};
use crate::seed::{sha256_hex, sub_rng};
use crate::train::{records_to_jsonl, train_full_pipeline};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable naming the root for derived run directories.
pub const RUN_ROOT_ENV: &str = "DCN_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "dcn", version, about = "Few-shot learning with deep comparison networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic class-folder image dataset.
    SynthData(SynthDataArgs),
    /// Run the full training pipeline from a TOML config.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on the meta-test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    /// Output directory; one subfolder of PNGs per class.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Intra-class variation in [0, 1].
    #[arg(long, default_value_t = 0.3)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to a config-digest name under the run root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override train.seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint (a final.ckpt or relation.ckpt).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment config; defaults to config.resolved.toml next to the
    /// checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries_per_class: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to an eval-… folder next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the module score correlation matrix.
    #[arg(long)]
    pub correlation: bool,
    /// (query, class) pairs sampled for the correlation estimate.
    #[arg(long, default_value_t = 10000)]
    pub correlation_pairs: usize,
    /// Write a per-class accuracy scatter for two modules, e.g. --scatter 1 4.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub scatter: Option<Vec<usize>>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DcnError {
    DcnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Create the directory, refusing to reuse a non-empty one without --force.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(DcnError::invalid(format!(
                "{} already has contents; pass --force to write into it",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let classes = synth_class_images(
        args.classes,
        args.per_class,
        args.image_size,
        args.difficulty,
        args.seed,
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let size = args.image_size as u32;
    for (class_name, files) in &classes {
        let dir = args.out.join(class_name);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (file_name, bytes) in files {
            let path = dir.join(file_name);
            image::save_buffer(&path, bytes, size, size, image::ColorType::Rgb8).map_err(
                |e| DcnError::Dataset(format!("failed to write {}: {e}", path.display())),
            )?;
        }
    }
    println!(
        "wrote {} classes × {} images ({}×{} px) to {}",
        args.classes,
        args.per_class,
        args.image_size,
        args.image_size,
        args.out.display()
    );
    Ok(())
}

/// Derived run directory: digest of the resolved config plus the seed.
fn default_run_dir(resolved_toml: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let digest = sha256_hex(resolved_toml.as_bytes());
    root.join(format!("run-{}-seed{}", &digest[..8], seed))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let resolved_toml = config.resolved().to_toml_string();
    let run_dir = args
        .out
        .unwrap_or_else(|| default_run_dir(&resolved_toml, config.train.seed));
    prepare_out_dir(&run_dir, args.force)?;
    write_text(&run_dir.join("config.resolved.toml"), &resolved_toml)?;

    let dataset = config.build_dataset()?;
    let split = config.build_split(&dataset)?;
    write_split_manifest(run_dir.join("split.txt"), &split, &dataset)?;
    println!(
        "dataset: {} classes × {} images at {} px; run dir {}",
        dataset.num_classes(),
        dataset.images.len(),
        dataset.image_size,
        run_dir.display()
    );

    let result = train_full_pipeline(
        &dataset,
        &split,
        &config.embedding_config(),
        &config.relation_config(),
        &config.train_config(),
    )?;

    write_text(&run_dir.join("train.log"), &records_to_jsonl(&result.history))?;
    save_checkpoint(
        run_dir.join("pretrain.ckpt"),
        &result.pretrain_embed_config,
        &result.model.rel_config,
        &result.pretrain_embedding,
        None,
    )?;
    save_checkpoint(
        run_dir.join("relation.ckpt"),
        &result.pretrain_embed_config,
        &result.model.rel_config,
        &result.pretrain_embedding,
        Some(&result.phase2_relation),
    )?;
    save_model(run_dir.join("final.ckpt"), &result.model)?;

    println!(
        "trained: best relation episode count {}; artifacts in {}",
        result.best_episode_count,
        run_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let contents = load_checkpoint(&args.checkpoint)?;
    let model = contents.into_model()?;

    let checkpoint_dir = args
        .checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let config_path = args
        .config
        .unwrap_or_else(|| checkpoint_dir.join("config.resolved.toml"));
    let config = ExperimentConfig::load(&config_path)?;

    let mut spec = config.eval_spec();
    if let Some(w) = args.ways {
        spec.ways = w;
    }
    if let Some(s) = args.shots {
        spec.shots = s;
    }
    if let Some(q) = args.queries_per_class {
        spec.queries_per_class = q;
    }
    spec.validate()?;
    let episodes = args.episodes.unwrap_or(config.eval.episodes);
    if episodes == 0 {
        return Err(DcnError::invalid("--episodes must be at least 1"));
    }
    let seed = args.seed.unwrap_or(config.eval.seed);

    let dataset = config.build_dataset()?;
    let split = config.build_split(&dataset)?;
    let out_dir = args.out.unwrap_or_else(|| {
        checkpoint_dir.join(format!(
            "eval-{}w{}s-ep{}-seed{}",
            spec.ways, spec.shots, episodes, seed
        ))
    });
    prepare_out_dir(&out_dir, args.force)?;

    let scorer = model.scorer();
    let mut rng = sub_rng(seed, "eval/episodes");
    let report = evaluate(
        &scorer,
        &dataset,
        &split,
        SplitPart::MetaTest,
        spec,
        episodes,
        &mut rng,
    )?;
    write_text(&out_dir.join("report.jsonl"), &report_to_jsonl(&report))?;
    write_text(&out_dir.join("episodes.csv"), &episode_accuracies_csv(&report))?;

    println!(
        "{}-way {}-shot meta-test accuracy: {:.4} ± {:.4} over {} episodes",
        spec.ways, spec.shots, report.mean_accuracy, report.ci95, episodes
    );
    for (i, acc) in report.per_module_accuracy.iter().enumerate() {
        println!("  module {} alone: {:.4}", i + 1, acc);
    }

    if args.correlation {
        let mut corr_rng = sub_rng(seed, "eval/correlation");
        let matrix = module_correlation_matrix(
            &scorer,
            &dataset,
            &split,
            SplitPart::MetaTest,
            spec,
            args.correlation_pairs,
            &mut corr_rng,
        )?;
        write_text(&out_dir.join("correlation.csv"), &correlation_csv(&matrix))?;
        println!(
            "score correlation matrix over {} pairs written",
            args.correlation_pairs
        );
    }
    if let Some(modules) = args.scatter {
        let (a, b) = (modules[0], modules[1]);
        let points = per_class_scatter(&report, a, b)?;
        write_text(
            &out_dir.join(format!("scatter-rm{a}-rm{b}.csv")),
            &scatter_csv(&points, a, b),
        )?;
    }
    println!("eval artifacts in {}", out_dir.display());
    Ok(())
}
