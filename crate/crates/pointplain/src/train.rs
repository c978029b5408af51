//! The pre-training loop: sample/augment a batch, patchify, partition,
//! masked-autoencoder forward, Chamfer loss, backward, clipped AdamW step
//! under the warmup+cosine schedule.
//!
//! Every random draw descends from the run seed through named RNG streams,
//! so two runs of the same config produce byte-identical metrics logs and
//! checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::augment::{augment, AugmentFlags};
use crate::checkpoint::save_checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::geom::farthest_point_sampling;
use crate::geom::PointCloud;
use crate::io::load_point_cloud;
use crate::mae::{partition_patches, MaeModel};
use crate::patchify::{build_patches, fpc_group_with, gather_patches, ClusterReduce, Grouping};
use crate::rng::Rng;
use crate::synth::{scene_pool, SceneConfig};
use crate::tensor::{adamw_step, lr_schedule, Graph, OptimizerState, ParameterStore};

// RNG stream tags under the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_STEP: u64 = 3;

#[derive(Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Builds the model and its freshly initialized parameter store for a
/// config. Initialization order is fixed, so stores are reproducible.
pub fn build_model(cfg: &RunConfig) -> Result<(ParameterStore, MaeModel)> {
    let mut store = ParameterStore::new(cfg.seed);
    let mut init_rng = Rng::new(cfg.seed).split(STREAM_INIT);
    let model = MaeModel::init(&mut store, &mut init_rng, cfg.mae_config())?;
    Ok((store, model))
}

/// Loads the training pool: seeded synthetic scenes or files from a glob.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<PointCloud>> {
    match &cfg.data {
        DataSource::Synthetic => {
            let scene_cfg = SceneConfig {
                n_points: cfg.n_points,
                with_color: cfg.with_color,
                jitter: 0.005,
            };
            let data_rng = Rng::new(cfg.seed).split(STREAM_DATA);
            scene_pool(&data_rng, cfg.scenes, &scene_cfg)
        }
        DataSource::Files(pattern) => {
            let paths = expand_glob(pattern)?;
            if paths.is_empty() {
                return Err(Error::invalid(format!("no files match `{pattern}`")));
            }
            paths.iter().map(|p| load_point_cloud(p)).collect()
        }
    }
}

/// Minimal glob: `*` in the final path component only; matches sorted.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad data pattern `{pattern}`")))?;
    if !name.contains('*') {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = if path.parent().is_none_or(|p| p.as_os_str().is_empty()) {
        Path::new(".")
    } else {
        path.parent().unwrap()
    };
    let (prefix, suffix) = name.split_once('*').unwrap();
    if suffix.contains('*') {
        return Err(Error::invalid(format!(
            "only one `*` supported in `{pattern}`"
        )));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let fname = entry.file_name();
        let Some(fname) = fname.to_str() else {
            continue;
        };
        if fname.starts_with(prefix)
            && fname.ends_with(suffix)
            && fname.len() >= prefix.len() + suffix.len()
        {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// One training step's mean loss over a batch of clouds.
///
/// Batch items run on independent tapes in parallel (they share only the
/// read-only store); losses and gradients are then reduced in item order,
/// so the result is deterministic for any worker count.
fn batch_loss(
    model: &MaeModel,
    store: &mut ParameterStore,
    cfg: &RunConfig,
    batch: &[&PointCloud],
    step_rng: &Rng,
    train: bool,
) -> Result<f64> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let flags = if cfg.augment {
        AugmentFlags::default()
    } else {
        AugmentFlags::none()
    };
    type ItemOutcome = Result<(f64, Vec<(String, Vec<f64>)>)>;
    let inv_batch = 1.0 / batch.len() as f64;
    let shared: &ParameterStore = store;
    let results: Vec<ItemOutcome> = batch
        .par_iter()
        .enumerate()
        .map(|(i, &pc)| {
            let mut item_rng = step_rng.split(10 + i as u64);
            let (cloud, _) = augment(pc, &mut item_rng, &flags)?;
            let ps = if cfg.group == Grouping::Fpc && cfg.fpc_random_sample {
                let keys = farthest_point_sampling(&cloud, cfg.patches)?;
                let mut sample_rng = item_rng.split(7);
                fpc_group_with(
                    &cloud,
                    &keys,
                    cfg.samples,
                    ClusterReduce::Sample(&mut sample_rng),
                )?
            } else {
                build_patches(
                    &cloud,
                    cfg.patches,
                    cfg.samples,
                    cfg.group,
                    cfg.radius,
                    cfg.kmeans_iters,
                )?
            };
            let pt = gather_patches(&cloud, &ps);
            let part = partition_patches(cfg.patches, cfg.partition_ratios(), &mut item_rng)?;
            let mut graph = if train {
                Graph::new_train(step_rng.split(1000 + i as u64))
            } else {
                Graph::new()
            };
            let rec = model.forward(&mut graph, shared, &pt, &part)?;
            let item_loss = model.loss(&mut graph, &rec)?;
            let value = graph.scalar_value(item_loss);
            let grads = if train {
                let scaled = graph.scale(item_loss, inv_batch)?;
                graph.backward_grads(scaled)?
            } else {
                Vec::new()
            };
            Ok((value, grads))
        })
        .collect();

    let mut mean = 0.0;
    if train {
        store.zero_grads();
    }
    for item in results {
        let (value, grads) = item?;
        mean += value * inv_batch;
        for (name, grad) in grads {
            store.accumulate_grad(&name, &grad)?;
        }
    }
    Ok(mean)
}

/// Runs the full pre-training loop, writing `metrics.log`, periodic
/// checkpoints (`epoch_N.ckpt` when configured), and `final.ckpt` under
/// `out_dir`.
pub fn pretrain_loop(cfg: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let metrics_path = out_dir.join("metrics.log");
    let checkpoint_path = out_dir.join("final.ckpt");

    let (mut store, model) = build_model(cfg)?;
    let scenes = load_dataset(cfg)?;
    let root = Rng::new(cfg.seed);

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let warmup_steps =
        (cfg.warmup_epochs as u64 * steps_per_epoch).min(total_steps.saturating_sub(1));

    let mut optim = OptimizerState::new(cfg.base_lr)
        .with_weight_decay(cfg.weight_decay)
        .with_clip_norm(cfg.clip_norm);

    let metrics_file = File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let mut metrics = BufWriter::new(metrics_file);

    let mut step: u64 = 0;
    let mut initial_loss = None;
    let mut final_loss = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut epoch_rng = root.split(STREAM_EPOCH).split(epoch as u64);
        epoch_rng.shuffle(&mut order);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &scenes[i]).collect();
            let step_rng = root.split(STREAM_STEP).split(step);
            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr);
            // A non-finite value anywhere in the step aborts with enough
            // context to replay the offending batch: the run seed and step
            // index pin every RNG stream that built it.
            let loss = batch_loss(&model, &mut store, cfg, &batch, &step_rng, true).map_err(
                |e| match e {
                    Error::NonFinite { .. } => Error::NanLoss {
                        step,
                        seed: cfg.seed,
                        detail: e.to_string(),
                    },
                    other => other,
                },
            )?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    step,
                    seed: cfg.seed,
                    detail: "loss is not finite".into(),
                });
            }
            adamw_step(&mut store, &mut optim, lr)?;
            writeln!(metrics, "{step} {loss} {lr}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            initial_loss.get_or_insert(loss);
            final_loss = Some(loss);
            step += 1;
        }

        if cfg.checkpoint_every > 0
            && (epoch + 1) % cfg.checkpoint_every == 0
            && epoch + 1 < cfg.epochs
        {
            let path = out_dir.join(format!("epoch_{}.ckpt", epoch + 1));
            save_checkpoint(&store, &cfg.serialize(), &path)?;
        }
    }
    metrics
        .flush()
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    save_checkpoint(&store, &cfg.serialize(), &checkpoint_path)?;

    Ok(TrainReport {
        steps: step,
        initial_loss,
        final_loss,
        metrics_path,
        checkpoint_path,
    })
}
