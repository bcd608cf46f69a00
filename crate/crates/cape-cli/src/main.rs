use std::path::PathBuf;

use anyhow::{Context, Result};
use cape_core::annot::SplitKind;
use cape_core::model::Model;
use clap::{Args, Parser, Subcommand};

use cape_cli::ablate::{AblationMode, run_ablation};
use cape_cli::checkpoint;
use cape_cli::config::RunConfig;
use cape_cli::data::EpisodeSource;
use cape_cli::eval::{EvalVariant, evaluate_split};
use cape_cli::export::export_attention_maps;
use cape_cli::gendata::generate;
use cape_cli::metrics::{MetricsRecord, MetricsWriter};
use cape_cli::train::train;

/// Category-agnostic keypoint localization with a graph transformer decoder.
#[derive(Parser)]
#[command(name = "cape", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every run-configuration key is also a CLI flag; flags override values
/// from --config, which overrides the built-in defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mask_variance: Option<f64>,
    #[arg(long)]
    sigma_heatmap: Option<f64>,
    #[arg(long)]
    lambda_heatmap: Option<f64>,
    #[arg(long)]
    disable_graph: Option<bool>,
    #[arg(long)]
    n_shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated epoch indices at which the step size decays.
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    train_categories: Option<usize>,
    #[arg(long)]
    val_categories: Option<usize>,
    #[arg(long)]
    test_categories: Option<usize>,
    #[arg(long)]
    keypoints_min: Option<usize>,
    #[arg(long)]
    keypoints_max: Option<usize>,
    #[arg(long)]
    edge_density: Option<f64>,
    #[arg(long)]
    twin_fraction: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    stroke_width: Option<f64>,
    #[arg(long)]
    node_radius: Option<f64>,
    #[arg(long)]
    instances_per_category: Option<usize>,
    #[arg(long)]
    eval_episodes_per_category: Option<usize>,
    #[arg(long)]
    val_episodes_per_category: Option<usize>,
    #[arg(long)]
    pck_threshold: Option<f64>,
    /// Annotation file for real data; omit for synthetic episodes.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

macro_rules! apply_field {
    ($cfg:ident, $self:ident, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $self.$field.clone() { $cfg.$field = v; })+
    };
}

impl Overrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        apply_field!(
            cfg, self, image_size, channels, encoder_layers, decoder_layers, heads,
            mask_variance, sigma_heatmap, lambda_heatmap, disable_graph, n_shots, seed,
            learning_rate, decay_epochs, decay_factor, batch_size, epochs,
            episodes_per_epoch, train_categories, val_categories, test_categories,
            keypoints_min, keypoints_max, edge_density, twin_fraction, noise_std, stroke_width,
            node_radius, instances_per_category, eval_episodes_per_category,
            val_episodes_per_category, pck_threshold, out_dir,
        );
        if let Some(a) = self.annotations.clone() {
            cfg.annotations = Some(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk (images + annotation file).
    GenData {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model; writes checkpoint and metrics into out_dir.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from out_dir/checkpoint.bin.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint: PCK per category and overall.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data split: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Ablation studies on a checkpoint.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// random_graph, mask_support, mask_query, or permute_check.
        #[arg(long)]
        mode: String,
        /// Mask-area fractions to sweep.
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.15,0.3,0.45,0.6")]
        fractions: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Export decoder cross-attention grids for one episode.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Category index within the split.
        #[arg(long, default_value_t = 0)]
        category: usize,
        /// Episode index within the category.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_split(s: &str) -> Result<SplitKind> {
    Ok(match s {
        "train" => SplitKind::Train,
        "val" => SplitKind::Val,
        "test" => SplitKind::Test,
        other => anyhow::bail!("unknown split {other:?}"),
    })
}

/// Load a checkpoint and overlay evaluation-time overrides on its config
/// snapshot (model-shape keys stay frozen to match the stored weights).
fn load_for_eval(path: &PathBuf, overrides: &Overrides) -> Result<(RunConfig, checkpoint::Checkpoint)> {
    let ckpt = checkpoint::load(path)?;
    let mut cfg = ckpt.config.clone();
    if let Some(v) = overrides.n_shots {
        cfg.n_shots = v;
    }
    if let Some(v) = overrides.eval_episodes_per_category {
        cfg.eval_episodes_per_category = v;
    }
    if let Some(v) = overrides.pck_threshold {
        cfg.pck_threshold = v;
    }
    if let Some(v) = overrides.disable_graph {
        cfg.disable_graph = v;
    }
    if let Some(v) = overrides.out_dir.clone() {
        cfg.out_dir = v;
    }
    if let Some(v) = overrides.annotations.clone() {
        cfg.annotations = Some(v);
    }
    cfg.validate()?;
    Ok((cfg, ckpt))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { overrides } => {
            let cfg = overrides.build()?;
            let path = generate(&cfg)?;
            println!("annotation file: {}", path.display());
        }
        Command::Train { overrides, resume } => {
            let cfg = overrides.build()?;
            let outcome = train(&cfg, resume)?;
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("metrics: {}", outcome.metrics_path.display());
            if let Some(pck) = outcome.final_val_pck {
                println!("final val pck: {pck:.4}");
            }
        }
        Command::Eval {
            checkpoint: ckpt_path,
            split,
            overrides,
        } => {
            let (cfg, ckpt) = load_for_eval(&ckpt_path, &overrides)?;
            let split = parse_split(&split)?;
            let source = EpisodeSource::from_config(&cfg)?;
            let model = Model::new(cfg.model_config())?;
            let summary = evaluate_split(
                &model,
                &ckpt.params,
                &source,
                split,
                &cfg,
                cfg.eval_episodes_per_category,
                EvalVariant::Plain,
            )?;
            let metrics_path = cfg.out_dir.join(format!("eval_{}.jsonl", split.as_str()));
            let mut writer = MetricsWriter::open(&metrics_path, false)?;
            for cat in &summary.per_category {
                println!("{:<24} pck {:.4} ({}/{})", cat.name, cat.pck(), cat.correct, cat.total);
                writer.write(&MetricsRecord {
                    epoch: ckpt.epoch as u64,
                    split: split.as_str().into(),
                    category: cat.name.clone(),
                    pck: Some(cat.pck()),
                    heatmap_loss: None,
                    offset_loss: None,
                    total_loss: None,
                })?;
            }
            writer.write(&MetricsRecord {
                epoch: ckpt.epoch as u64,
                split: split.as_str().into(),
                category: "_overall".into(),
                pck: Some(summary.overall_pck),
                heatmap_loss: None,
                offset_loss: None,
                total_loss: None,
            })?;
            println!(
                "overall pck@{}: {:.4} ({}/{})",
                cfg.pck_threshold, summary.overall_pck, summary.correct, summary.total
            );
            println!("metrics: {}", metrics_path.display());
        }
        Command::Ablate {
            checkpoint: ckpt_path,
            mode,
            fractions,
            overrides,
        } => {
            let (cfg, ckpt) = load_for_eval(&ckpt_path, &overrides)?;
            let mode = AblationMode::parse(&mode)?;
            let source = EpisodeSource::from_config(&cfg)?;
            let model = Model::new(cfg.model_config())?;
            let report = run_ablation(
                &model,
                &ckpt.params,
                &source,
                &cfg,
                mode,
                &fractions,
                ckpt.epoch as u64,
            )?;
            for row in &report.rows {
                if report.max_deviation.is_some() {
                    println!("{:<28} {:.3e}", row.label, row.pck);
                } else {
                    println!("{:<28} {:.6}", row.label, row.pck);
                }
            }
        }
        Command::ExportAttention {
            checkpoint: ckpt_path,
            split,
            category,
            episode,
            out,
            overrides,
        } => {
            let (cfg, ckpt) = load_for_eval(&ckpt_path, &overrides)?;
            let split = parse_split(&split)?;
            let source = EpisodeSource::from_config(&cfg)?;
            let model = Model::new(cfg.model_config())?;
            let outcome = export_attention_maps(
                &model, &ckpt.params, &source, &cfg, split, category, episode, &out,
            )
            .context("exporting attention maps")?;
            println!(
                "wrote {} grids and {}",
                outcome.grid_files.len(),
                outcome.sidecar.display()
            );
        }
    }
    Ok(())
}
