//! End-to-end orchestration: load clusters, train, generate pseudo labels,
//! optionally refine them with the CRF, and score against ground truth —
//! with per-stage timing and on-disk reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::cluster::{cluster_vector, ClusterAssignment};
use crate::config::RunConfig;
use crate::crf::crf_refine;
use crate::data::voc::ingest_voc_style;
use crate::data::{DatasetManifest, Split};
use crate::error::{PccError, Result};
use crate::fusion::FusionMode;
use crate::head::{predict_patches, ClassVocabulary};
use crate::miou::{ConfusionAccumulator, IoUReport};
use crate::pseudo::{argmax_labels, load_mask_map, upsample_predictions, write_mask_png, PseudoLabelMap};
use crate::train::{train, TrainOutcome};

#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub fusion_mode: FusionMode,
    pub timings: Vec<StageTiming>,
    pub train: TrainOutcome,
    pub report: IoUReport,
    pub pseudo_dir: PathBuf,
    pub report_path: PathBuf,
}

/// Generate pseudo-label masks for every entry of `manifest` into `out_dir`.
/// Needs the cluster `assignment` when the checkpoint was trained with
/// cluster-token fusion.
pub fn generate_pseudo_labels(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    assignment: Option<&ClusterAssignment>,
    apply_crf: bool,
    out_dir: &Path,
) -> Result<()> {
    let cfg = &ckpt.config;
    let spec = cfg.model_spec(ckpt.num_clusters, ckpt.classes.len() + 1);
    fs::create_dir_all(out_dir)?;
    for entry in &manifest.entries {
        let image = manifest.load_image(entry)?;
        let u = match spec.fusion_mode {
            FusionMode::ClusterToken => {
                let assignment = assignment.ok_or_else(|| {
                    PccError::config("cluster_token checkpoint needs the cluster assignment")
                })?;
                Some(cluster_vector(&image.labels, assignment)?)
            }
            _ => None,
        };
        let z = predict_patches(&image, u.as_ref(), &spec, &ckpt.params)?;
        let mut dense =
            upsample_predictions(&z, spec.encoder.grid_side(), image.height, image.width)?;
        if apply_crf {
            let rgb: Vec<u8> = image
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            dense = crf_refine(&dense, &rgb, &cfg.crf)?;
        }
        let map = argmax_labels(&dense, &entry.id);
        write_mask_png(&map, &out_dir.join(format!("{}.png", entry.id)))?;
    }
    Ok(())
}

/// Score the pseudo labels in `pseudo_dir` against the manifest's ground
/// truth masks. Entries without a mask are skipped; label 255 is void.
pub fn evaluate_pseudo_labels(
    manifest: &DatasetManifest,
    pseudo_dir: &Path,
    num_classes: usize,
) -> Result<IoUReport> {
    let mut acc = ConfusionAccumulator::new(num_classes, Some(255));
    let mut scored = 0;
    for entry in &manifest.entries {
        if entry.mask_path.is_none() {
            continue;
        }
        let gt_rows = manifest.load_mask(entry)?;
        let height = gt_rows.len();
        let width = gt_rows.first().map_or(0, Vec::len);
        let gt = PseudoLabelMap::new(height, width, gt_rows.into_iter().flatten().collect(), &entry.id)?;
        let pred_path = pseudo_dir.join(format!("{}.png", entry.id));
        let pred = load_mask_map(&pred_path, &entry.id)?;
        acc.add(&pred, &gt)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(PccError::config(
            "no entries with ground-truth masks to evaluate against",
        ));
    }
    Ok(acc.report())
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming { stage: stage.to_string(), seconds: start.elapsed().as_secs_f64() });
    Ok(out)
}

/// Run cluster-load → train → pseudo → (optional CRF) → eval, writing the
/// pseudo masks, a JSON report, and a text summary under `paths.outputs`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let mut timings = Vec::new();

    // cluster stage: resolve the assignment before any training starts
    let assignment = timed(&mut timings, "cluster", || match cfg.fusion_mode {
        FusionMode::ClusterToken => {
            let path = cfg.paths.cluster_map.as_ref().expect("validated");
            Ok(Some(ClusterAssignment::load(path)?))
        }
        _ => Ok(None),
    })?;

    let manifest = ingest_voc_style(&cfg.paths.dataset, Split::Train)?;
    let train_outcome = timed(&mut timings, "train", || {
        train(cfg, &manifest, assignment.as_ref())
    })?;

    let ckpt = Checkpoint::load(&train_outcome.checkpoint_path)?;
    let pseudo_dir = cfg.paths.outputs.join(format!("pseudo_{}", cfg.fusion_mode));
    timed(&mut timings, "pseudo", || {
        generate_pseudo_labels(&ckpt, &manifest, assignment.as_ref(), cfg.apply_crf, &pseudo_dir)
    })?;

    let vocab = ClassVocabulary::with_background(&manifest.classes)?;
    let report = timed(&mut timings, "eval", || {
        evaluate_pseudo_labels(&manifest, &pseudo_dir, vocab.num_classes())
    })?;

    let report_path = cfg.paths.outputs.join(format!("report_{}.json", cfg.fusion_mode));
    fs::create_dir_all(&cfg.paths.outputs)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let summary_path = cfg.paths.outputs.join(format!("report_{}.txt", cfg.fusion_mode));
    let mut summary = report.text_table(Some(vocab.classes()));
    summary.push('\n');
    for t in &timings {
        summary.push_str(&format!("{:<10} {:.2}s\n", t.stage, t.seconds));
    }
    fs::write(&summary_path, summary)?;

    Ok(PipelineOutcome {
        fusion_mode: cfg.fusion_mode,
        timings,
        train: train_outcome,
        report,
        pseudo_dir,
        report_path,
    })
}

/// Run the pipeline twice on the same data and seed — once without any
/// appended token and once with cluster tokens — and write a side-by-side
/// comparison table. Checkpoints and outputs are namespaced per mode.
pub fn compare_fusion_modes(cfg: &RunConfig) -> Result<(PipelineOutcome, PipelineOutcome)> {
    let mut base = cfg.clone();
    base.fusion_mode = FusionMode::None;
    base.paths.checkpoints = cfg.paths.checkpoints.join("none");
    base.paths.outputs = cfg.paths.outputs.clone();

    let mut clustered = cfg.clone();
    clustered.fusion_mode = FusionMode::ClusterToken;
    clustered.paths.checkpoints = cfg.paths.checkpoints.join("cluster_token");
    clustered.paths.outputs = cfg.paths.outputs.clone();

    let out_none = run_pipeline(&base)?;
    let out_cluster = run_pipeline(&clustered)?;

    let manifest = ingest_voc_style(&cfg.paths.dataset, Split::Train)?;
    let vocab = ClassVocabulary::with_background(&manifest.classes)?;
    let mut table = String::from(format!(
        "{:<16} {:>12} {:>14}\n",
        "class", "none", "cluster_token"
    ));
    for (k, name) in vocab.classes().iter().enumerate() {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        table.push_str(&format!(
            "{:<16} {:>12} {:>14}\n",
            name,
            fmt(out_none.report.per_class_iou[k]),
            fmt(out_cluster.report.per_class_iou[k]),
        ));
    }
    table.push_str(&format!(
        "{:<16} {:>12.4} {:>14.4}\n",
        "mean IoU", out_none.report.mean_iou, out_cluster.report.mean_iou
    ));
    fs::write(cfg.paths.outputs.join("comparison.txt"), table)?;
    Ok((out_none, out_cluster))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PathsConfig;
    use crate::data::synth::{generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use std::collections::{BTreeMap, BTreeSet};

    fn micro_cfg(root: &Path, fusion: FusionMode) -> RunConfig {
        RunConfig {
            encoder: EncoderConfig {
                image_side: 16,
                patch_size: 8,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 1.0,
                seed: 0,
            },
            cluster_dim: 4,
            fusion_mode: fusion,
            topk: 2,
            batch_size: 4,
            max_epochs: 2,
            seed: 0,
            paths: PathsConfig {
                dataset: root.join("data"),
                cluster_map: Some(root.join("clusters.json")),
                checkpoints: root.join("ckpt"),
                outputs: root.join("out"),
            },
            ..RunConfig::default()
        }
    }

    fn write_fixture(root: &Path) {
        let spec = SyntheticSpec {
            image_side: 16,
            num_images: 8,
            clutter: 0.1,
            seed: 9,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, &root.join("data")).unwrap();
        let mut mapping = BTreeMap::new();
        mapping.insert("disk".to_string(), BTreeSet::from(["round".to_string()]));
        mapping.insert("square".to_string(), BTreeSet::from(["angular".to_string()]));
        ClusterAssignment::from_mapping(mapping)
            .save(&root.join("clusters.json"))
            .unwrap();
    }

    #[test]
    fn end_to_end_writes_masks_report_and_timings() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let cfg = micro_cfg(dir.path(), FusionMode::ClusterToken);
        let outcome = run_pipeline(&cfg).unwrap();

        let stages: Vec<&str> = outcome.timings.iter().map(|t| t.stage.as_str()).collect();
        assert_eq!(stages, ["cluster", "train", "pseudo", "eval"]);
        assert!(outcome.report.mean_iou.is_finite());
        assert!((0.0..=1.0).contains(&outcome.report.mean_iou));
        assert!(outcome.report_path.is_file());
        assert!(outcome.pseudo_dir.join("img_0000.png").is_file());
        let json = std::fs::read_to_string(&outcome.report_path).unwrap();
        assert!(json.contains("mean_iou"));
    }

    #[test]
    fn missing_cluster_map_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::remove_file(dir.path().join("clusters.json")).unwrap();
        let cfg = micro_cfg(dir.path(), FusionMode::ClusterToken);
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(err, PccError::Config(_)), "{err}");
        assert!(
            !dir.path().join("ckpt").exists(),
            "no training artifacts may exist when the cluster map is missing"
        );
    }

    #[test]
    fn crf_toggle_keeps_the_report_schema() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let mut cfg = micro_cfg(dir.path(), FusionMode::None);
        cfg.paths.cluster_map = None;
        let plain = run_pipeline(&cfg).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        write_fixture(dir2.path());
        let mut cfg2 = micro_cfg(dir2.path(), FusionMode::None);
        cfg2.paths.cluster_map = None;
        cfg2.apply_crf = true;
        cfg2.crf.iterations = 1;
        let refined = run_pipeline(&cfg2).unwrap();

        assert_eq!(plain.report.num_classes, refined.report.num_classes);
        assert_eq!(plain.report.per_class_iou.len(), refined.report.per_class_iou.len());
        assert!(refined.report.mean_iou.is_finite());
    }

    #[test]
    fn comparison_table_covers_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let cfg = micro_cfg(dir.path(), FusionMode::ClusterToken);
        let (none, cluster) = compare_fusion_modes(&cfg).unwrap();
        assert_eq!(none.fusion_mode, FusionMode::None);
        assert_eq!(cluster.fusion_mode, FusionMode::ClusterToken);
        let table = std::fs::read_to_string(dir.path().join("out/comparison.txt")).unwrap();
        assert!(table.contains("cluster_token"));
        assert!(table.contains("mean IoU"));
        assert!(dir.path().join("out/report_none.json").is_file());
        assert!(dir.path().join("out/report_cluster_token.json").is_file());
    }
}
