//! Mini-batch training over image-level labels: per-sample gradients on
//! scratch tapes, fixed-order reduction, Adam with a phased learning rate,
//! per-epoch checkpoints, and a line-delimited metrics log.
//!
//! Dense masks are never read here: the loop works off
//! [`DatasetManifest::for_training`], and tests assert the manifest's
//! mask-read counter stays at zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::cluster::{cluster_vector, ClusterAssignment, ClusterVector};
use crate::config::RunConfig;
use crate::data::DatasetManifest;
use crate::encoder::patchify;
use crate::error::{PccError, Result};
use crate::head::{forward_loss_on_tape, init_model_params, ClassVocabulary, ModelSpec};
use crate::nn::{seeded_rng, Adam, AdamConfig, ParamSet, Tape, Tensor};

/// What a [`train`] call did.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Epoch index training started at (> 0 when resumed from a checkpoint).
    pub start_epoch: usize,
    /// Epochs actually run by this call.
    pub epochs_run: usize,
    /// (epoch index, mean loss) for each epoch this call ran.
    pub epoch_losses: Vec<(usize, f64)>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().map(|&(_, l)| l)
    }
}

/// An image fully prepared for the forward pass.
struct PreparedSample {
    id: String,
    patches: Tensor,
    u: Option<ClusterVector>,
    y: Vec<f64>,
}

fn prepare_samples(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    assignment: Option<&ClusterAssignment>,
    vocab: &ClassVocabulary,
    spec: &ModelSpec,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let image = manifest.load_image(entry)?;
        let patches = patchify(&image, &spec.encoder)?;
        let u = match cfg.fusion_mode {
            crate::fusion::FusionMode::ClusterToken => {
                let assignment = assignment.ok_or_else(|| {
                    PccError::config("cluster_token fusion requires a cluster assignment")
                })?;
                Some(cluster_vector(&image.labels, assignment)?)
            }
            _ => None,
        };
        let y = vocab.label_vector(&image.labels)?;
        out.push(PreparedSample { id: entry.id.clone(), patches, u, y });
    }
    Ok(out)
}

/// Loss and name-keyed gradients for one sample on a scratch tape.
fn sample_gradients(
    params: &ParamSet,
    spec: &ModelSpec,
    sample: &PreparedSample,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let input = tape.leaf(sample.patches.clone());
    let (loss, _z) = forward_loss_on_tape(&tape, &leaves, input, sample.u.as_ref(), &sample.y, spec)?;
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(PccError::Divergence(format!(
            "loss for image {} is not finite",
            sample.id
        )));
    }
    let grads = tape.backward(loss);
    let mut named = BTreeMap::new();
    for (name, var) in &leaves {
        if let Some(g) = grads.get(*var) {
            named.insert(name.clone(), g.clone());
        }
    }
    Ok((loss_value, named))
}

/// Mean loss and mean gradients over a batch. Per-sample work may run in
/// parallel, but the reduction always walks samples in batch order, so the
/// result is identical either way.
fn batch_gradients(
    params: &ParamSet,
    spec: &ModelSpec,
    batch: &[&PreparedSample],
    parallel: bool,
) -> Result<(f64, ParamSet)> {
    let per_sample: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = if parallel {
        batch.par_iter().map(|s| sample_gradients(params, spec, s)).collect()
    } else {
        batch.iter().map(|s| sample_gradients(params, spec, s)).collect()
    };

    let n = batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
    for result in per_sample {
        let (loss, named) = result?;
        loss_sum += loss;
        for (name, g) in named {
            match sums.get_mut(&name) {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => {
                    sums.insert(name, g);
                }
            }
        }
    }
    let mut mean = ParamSet::new();
    for (name, t) in sums {
        mean.insert(name, t.map(|v| v / n));
    }
    Ok((loss_sum / n, mean))
}

fn latest_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("latest.ckpt")
}

/// Train (or resume training) the model described by `cfg` on `manifest`.
///
/// If `checkpoints/latest.ckpt` exists it is loaded and training continues
/// from the recorded epoch; a completed run returns immediately with zero
/// epochs run. Resume then train-to-the-end produces the same parameters as
/// one uninterrupted run.
pub fn train(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    assignment: Option<&ClusterAssignment>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(PccError::config("training manifest is empty"));
    }
    let vocab = ClassVocabulary::with_background(&manifest.classes)?;
    let num_clusters = assignment.map_or(0, |a| a.num_clusters());
    let spec = cfg.model_spec(num_clusters, vocab.num_classes());
    spec.validate()?;

    // masks out of reach from here on; the shared counter still observes any
    // read attempted through the original manifest
    let train_view = manifest.for_training();
    let samples = prepare_samples(cfg, &train_view, assignment, &vocab, &spec)?;

    let ckpt_path = latest_checkpoint_path(cfg);
    let (mut params, mut adam, start_epoch) = if ckpt_path.is_file() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let resumed_spec = ckpt.config.model_spec(ckpt.num_clusters, ckpt.classes.len() + 1);
        if resumed_spec != spec {
            return Err(PccError::config(format!(
                "checkpoint {} was trained with a different model geometry",
                ckpt_path.display()
            )));
        }
        let adam = match ckpt.optimizer {
            Some(o) => Adam::from_state(o.config, o.step, o.first_moment, o.second_moment),
            None => Adam::new(AdamConfig {
                weight_decay: cfg.optimizer.weight_decay,
                ..AdamConfig::default()
            }),
        };
        (ckpt.params, adam, ckpt.epoch)
    } else {
        let params = init_model_params(&spec);
        let adam = Adam::new(AdamConfig {
            weight_decay: cfg.optimizer.weight_decay,
            ..AdamConfig::default()
        });
        (params, adam, 0)
    };

    if !params.all_finite() {
        return Err(PccError::Divergence(
            "parameters contain non-finite values before training".into(),
        ));
    }

    fs::create_dir_all(&cfg.paths.outputs)?;
    let metrics_path = cfg.paths.outputs.join(format!("metrics_{}.jsonl", cfg.fusion_mode));
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let mut epoch_losses = Vec::new();
    let mut global_step = start_epoch * samples.len().div_ceil(cfg.batch_size);

    for epoch in start_epoch..cfg.max_epochs {
        let epoch_start = Instant::now();
        let lr = cfg.optimizer.lr_for_epoch(epoch);

        // epoch-specific deterministic shuffle
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = seeded_rng(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (batch_loss, grads) = batch_gradients(&params, &spec, &batch, !cfg.deterministic)?;
            adam.step(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(PccError::Divergence(format!(
                    "parameters became non-finite at epoch {epoch}, step {global_step}"
                )));
            }
            loss_sum += batch_loss * batch.len() as f64;
            writeln!(
                metrics,
                "{}",
                serde_json::json!({
                    "kind": "step", "epoch": epoch, "step": global_step,
                    "loss": batch_loss, "lr": lr,
                })
            )?;
            global_step += 1;
        }
        let mean_loss = loss_sum / samples.len() as f64;
        writeln!(
            metrics,
            "{}",
            serde_json::json!({
                "kind": "epoch", "epoch": epoch, "mean_loss": mean_loss, "lr": lr,
                "duration_secs": epoch_start.elapsed().as_secs_f64(),
            })
        )?;
        epoch_losses.push((epoch, mean_loss));

        let (m, v) = adam.moments();
        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            classes: manifest.classes.clone(),
            num_clusters,
            params: params.clone(),
            optimizer: Some(OptimizerState {
                config: *adam.config(),
                step: adam.step_count(),
                first_moment: m.clone(),
                second_moment: v.clone(),
            }),
        };
        ckpt.save(&cfg.paths.checkpoints.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        ckpt.save(&ckpt_path)?;
    }

    Ok(TrainOutcome {
        start_epoch,
        epochs_run: cfg.max_epochs.saturating_sub(start_epoch),
        epoch_losses,
        checkpoint_path: ckpt_path,
        metrics_path,
    })
}
