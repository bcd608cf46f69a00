//! Episodic training loop: sample episode, forward, loss, backward,
//! parameter update; per-epoch loss averages and validation PCK land in the
//! metrics log, the checkpoint is rewritten after every epoch.

use std::path::PathBuf;

use anyhow::{Context, Result, bail};
use cape_core::annot::SplitKind;
use cape_core::autodiff::Tensor;
use cape_core::model::Model;
use cape_core::optim::Adam;
use cape_core::params::Net;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::EpisodeSource;
use crate::eval::evaluate_split;
use crate::metrics::{MetricsRecord, MetricsWriter};

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_val_pck: Option<f64>,
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint.bin")
}

pub fn metrics_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("metrics.jsonl")
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = checkpoint_path(cfg);
    let metrics_file = metrics_path(cfg);

    let source = EpisodeSource::from_config(cfg)?;
    let model = Model::new(cfg.model_config())?;

    let (mut params, mut adam, start_epoch) = if resume {
        let ckpt = checkpoint::load(&ckpt_path)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if ckpt.config != *cfg {
            bail!("checkpoint config does not match the requested run configuration");
        }
        let mut adam = Adam::new(cfg.learning_rate);
        adam.restore_state(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v);
        (ckpt.params, adam, ckpt.epoch as usize)
    } else {
        (model.init_params(cfg.seed), Adam::new(cfg.learning_rate), 0)
    };

    let mut metrics = MetricsWriter::open(&metrics_file, resume && start_epoch > 0)?;
    let steps = cfg.episodes_per_epoch / cfg.batch_size;
    let mut final_val = None;

    for epoch in start_epoch..cfg.epochs {
        adam.learning_rate = cfg.learning_rate_at(epoch);
        let mut sums = (0.0, 0.0, 0.0);
        let mut counted = 0usize;
        for step in 0..steps {
            for b in 0..cfg.batch_size {
                let index = step * cfg.batch_size + b;
                let episode = source.train_episode(cfg.seed, epoch, index, cfg.n_shots)?;
                let mut net = Net::new(&params, true);
                let fwd = model.forward(&mut net, &episode)?;
                let (loss, report) = model.episode_loss(&mut net, &fwd, &episode)?;
                if !report.total.is_finite() {
                    bail!(
                        "training diverged: loss {} at epoch {epoch} step {step} episode {index}",
                        report.total
                    );
                }
                // seed 1/batch makes the accumulated gradient the batch mean
                net.tape
                    .backward(loss, &Tensor::scalar(1.0 / cfg.batch_size as f64))?;
                let grads = net.collect_grads();
                params.accumulate_grads(&grads);
                sums.0 += report.heatmap;
                sums.1 += report.offset;
                sums.2 += report.total;
                counted += 1;
            }
            adam.step(&mut params, 1.0);
        }

        let val = evaluate_split(
            &model,
            &params,
            &source,
            SplitKind::Val,
            cfg,
            cfg.val_episodes_per_category,
            crate::eval::EvalVariant::Plain,
        )?;
        final_val = Some(val.overall_pck);

        metrics.write(&MetricsRecord {
            epoch: epoch as u64,
            split: "train".into(),
            category: "_all".into(),
            pck: None,
            heatmap_loss: Some(sums.0 / counted as f64),
            offset_loss: Some(sums.1 / counted as f64),
            total_loss: Some(sums.2 / counted as f64),
        })?;
        metrics.write(&MetricsRecord {
            epoch: epoch as u64,
            split: "val".into(),
            category: "_overall".into(),
            pck: Some(val.overall_pck),
            heatmap_loss: None,
            offset_loss: None,
            total_loss: None,
        })?;

        checkpoint::save(
            &ckpt_path,
            &Checkpoint {
                config: cfg.clone(),
                epoch: (epoch + 1) as u32,
                adam_step: adam.step_count(),
                params: params.clone(),
                adam_m: adam_state(&adam, "m"),
                adam_v: adam_state(&adam, "v"),
            },
        )?;
        eprintln!(
            "epoch {epoch}: loss {:.4} (heatmap {:.4}, offset {:.4}), val pck {:.3}",
            sums.2 / counted as f64,
            sums.0 / counted as f64,
            sums.1 / counted as f64,
            val.overall_pck
        );
    }

    Ok(TrainOutcome {
        checkpoint_path: ckpt_path,
        metrics_path: metrics_file,
        final_val_pck: final_val,
    })
}

fn adam_state(adam: &Adam, which: &str) -> std::collections::BTreeMap<String, Vec<f64>> {
    adam.state()
        .filter_map(|(name, values)| {
            name.strip_prefix(&format!("adam.{which}."))
                .map(|rest| (rest.to_string(), values.clone()))
        })
        .collect()
}
