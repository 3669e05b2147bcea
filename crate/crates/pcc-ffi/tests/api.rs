//! Exercises the C ABI from Rust: handles, status codes, buffer contracts,
//! and numeric agreement with the underlying library calls.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use pcc::cluster::{cluster_vector, ClusterAssignment};
use pcc::config::{PathsConfig, RunConfig};
use pcc::data::synth::{generate_synthetic, SyntheticSpec};
use pcc::data::DatasetManifest;
use pcc::encoder::EncoderConfig;
use pcc::fusion::FusionMode;
use pcc::head::predict_patches;
use pcc::miou::compute_miou;
use pcc::pseudo::{argmax_labels, upsample_predictions, PseudoLabelMap};

use pcc_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pcc_last_error()).to_string_lossy().into_owned() }
}

fn micro_map() -> ClusterAssignment {
    let mut mapping = BTreeMap::new();
    mapping.insert("disk".to_string(), BTreeSet::from(["round".to_string()]));
    mapping.insert(
        "square".to_string(),
        BTreeSet::from(["angular".to_string(), "straight".to_string()]),
    );
    ClusterAssignment::from_mapping(mapping)
}

fn micro_cfg(root: &Path) -> RunConfig {
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
        fusion_mode: FusionMode::ClusterToken,
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

fn write_fixture(root: &Path) -> DatasetManifest {
    let spec = SyntheticSpec {
        image_side: 16,
        num_images: 8,
        clutter: 0.1,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, &root.join("data")).unwrap();
    micro_map().save(&root.join("clusters.json")).unwrap();
    manifest
}

#[test]
fn cluster_map_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clusters.json");
    micro_map().save(&path).unwrap();

    let c_path = cstr(path.to_str().unwrap());
    let mut handle: *mut PccClusterMap = std::ptr::null_mut();
    unsafe {
        assert_eq!(pcc_cluster_map_load(c_path.as_ptr(), &mut handle), PCC_OK);
        assert!(!handle.is_null());

        let mut n = 0usize;
        assert_eq!(pcc_cluster_map_num_clusters(handle, &mut n), PCC_OK);
        assert_eq!(n, 3); // angular, round, straight

        let labels = cstr("disk");
        let mut bits = vec![9u8; 3];
        assert_eq!(
            pcc_cluster_map_vector(handle, labels.as_ptr(), bits.as_mut_ptr(), 3),
            PCC_OK
        );
        // sorted vocabulary: [angular, round, straight]; disk -> {round}
        assert_eq!(bits, vec![0, 1, 0]);

        let both = cstr("disk, square");
        assert_eq!(
            pcc_cluster_map_vector(handle, both.as_ptr(), bits.as_mut_ptr(), 3),
            PCC_OK
        );
        assert_eq!(bits, vec![1, 1, 1]);

        // wrong buffer size is reported, not written past
        assert_eq!(
            pcc_cluster_map_vector(handle, labels.as_ptr(), bits.as_mut_ptr(), 2),
            PCC_ERR_BUFFER_TOO_SMALL
        );

        // unknown category propagates the library's parse-level error
        let bogus = cstr("pyramid");
        let code = pcc_cluster_map_vector(handle, bogus.as_ptr(), bits.as_mut_ptr(), 3);
        assert_ne!(code, PCC_OK);
        assert!(last_error().contains("pyramid"), "got: {}", last_error());

        pcc_cluster_map_free(handle);
        pcc_cluster_map_free(std::ptr::null_mut()); // NULL is a no-op
    }
}

#[test]
fn missing_files_surface_typed_errors_and_messages() {
    let c_path = cstr("/nonexistent/clusters.json");
    let mut map: *mut PccClusterMap = std::ptr::null_mut();
    unsafe {
        assert_eq!(pcc_cluster_map_load(c_path.as_ptr(), &mut map), PCC_ERR_IO);
        assert!(map.is_null());
        assert!(!last_error().is_empty());

        let mut model: *mut PccModel = std::ptr::null_mut();
        let c_ckpt = cstr("/nonexistent/latest.ckpt");
        assert_eq!(pcc_model_load(c_ckpt.as_ptr(), &mut model), PCC_ERR_FORMAT);
        assert!(last_error().contains("latest.ckpt"));

        // NULL arguments are rejected before anything is touched
        assert_eq!(
            pcc_cluster_map_load(std::ptr::null(), &mut map),
            PCC_ERR_NULL_ARGUMENT
        );
        assert_eq!(
            pcc_cluster_map_load(c_path.as_ptr(), std::ptr::null_mut()),
            PCC_ERR_NULL_ARGUMENT
        );
    }
}

#[test]
fn model_inference_matches_the_library_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_fixture(root);
    let cfg = micro_cfg(root);
    let assignment = ClusterAssignment::load(&root.join("clusters.json")).unwrap();
    pcc::train::train(&cfg, &manifest, Some(&assignment)).unwrap();

    let ckpt_path = root.join("ckpt/latest.ckpt");
    let c_ckpt = cstr(ckpt_path.to_str().unwrap());
    let c_map = cstr(root.join("clusters.json").to_str().unwrap());

    unsafe {
        let mut model: *mut PccModel = std::ptr::null_mut();
        assert_eq!(pcc_model_load(c_ckpt.as_ptr(), &mut model), PCC_OK);
        let mut map: *mut PccClusterMap = std::ptr::null_mut();
        assert_eq!(pcc_cluster_map_load(c_map.as_ptr(), &mut map), PCC_OK);

        let mut n = 0usize;
        assert_eq!(pcc_model_num_classes(model, &mut n), PCC_OK);
        assert_eq!(n, 3); // background, disk, square
        let mut side = 0usize;
        assert_eq!(pcc_model_image_side(model, &mut side), PCC_OK);
        assert_eq!(side, 16);

        let mut buf = vec![0 as c_char; 32];
        assert_eq!(pcc_model_class_name(model, 0, buf.as_mut_ptr(), 32), PCC_OK);
        assert_eq!(
            CStr::from_ptr(buf.as_ptr()).to_str().unwrap(),
            "background"
        );
        assert_eq!(
            pcc_model_class_name(model, 1, buf.as_mut_ptr(), 2),
            PCC_ERR_BUFFER_TOO_SMALL
        );
        assert_eq!(
            pcc_model_class_name(model, 9, buf.as_mut_ptr(), 32),
            PCC_ERR_SHAPE
        );

        // FFI prediction equals the library chain on a real dataset image
        let entry = &manifest.entries[0];
        let image = manifest.load_image(entry).unwrap();
        let labels_csv = cstr(&image.labels.join(","));
        let mut got = vec![255u8; image.height * image.width];
        assert_eq!(
            pcc_model_predict_mask(
                model,
                map,
                labels_csv.as_ptr(),
                image.pixels.as_ptr(),
                image.height,
                image.width,
                0,
                got.as_mut_ptr(),
            ),
            PCC_OK
        );

        let spec = cfg.model_spec(assignment.num_clusters(), 3);
        let u = cluster_vector(&image.labels, &assignment).unwrap();
        let z = predict_patches(&image, Some(&u), &spec, &pcc::checkpoint::Checkpoint::load(&ckpt_path).unwrap().params).unwrap();
        let dense =
            upsample_predictions(&z, spec.encoder.grid_side(), image.height, image.width).unwrap();
        let want = argmax_labels(&dense, &entry.id);
        assert_eq!(got, want.labels());

        // CRF path stays in-range and succeeds
        assert_eq!(
            pcc_model_predict_mask(
                model,
                map,
                labels_csv.as_ptr(),
                image.pixels.as_ptr(),
                image.height,
                image.width,
                1,
                got.as_mut_ptr(),
            ),
            PCC_OK
        );
        assert!(got.iter().all(|&l| l < 3));

        // cluster-token model without a map is a config error
        assert_eq!(
            pcc_model_predict_mask(
                model,
                std::ptr::null(),
                labels_csv.as_ptr(),
                image.pixels.as_ptr(),
                image.height,
                image.width,
                0,
                got.as_mut_ptr(),
            ),
            PCC_ERR_CONFIG
        );

        assert_eq!(
            pcc_model_predict_mask(
                model,
                map,
                labels_csv.as_ptr(),
                std::ptr::null(),
                image.height,
                image.width,
                0,
                got.as_mut_ptr(),
            ),
            PCC_ERR_NULL_ARGUMENT
        );

        pcc_model_free(model);
        pcc_cluster_map_free(map);
    }
}

#[test]
fn mean_iou_agrees_with_the_library() {
    let pred: Vec<u8> = vec![0, 1, 1, 2, 0, 2, 1, 0, 255, 1];
    let gt: Vec<u8> = vec![0, 1, 2, 2, 0, 0, 1, 1, 255, 255];
    // byte-buffer scoring (255 ignored in gt)
    let mut got = f64::NAN;
    unsafe {
        assert_eq!(
            pcc_mean_iou(pred.as_ptr(), gt.as_ptr(), pred.len(), 3, 255, &mut got),
            PCC_OK
        );
    }
    let pred_map = PseudoLabelMap::new(1, pred.len(), pred.clone(), "p").unwrap();
    let gt_map = PseudoLabelMap::new(1, gt.len(), gt.clone(), "g").unwrap();
    let want = compute_miou(&pred_map, &gt_map, 3, Some(255)).unwrap().mean_iou;
    assert_eq!(got, want);

    // negative ignore scores every pixel; out-of-vocabulary labels now error
    unsafe {
        let code = pcc_mean_iou(pred.as_ptr(), gt.as_ptr(), pred.len(), 3, -1, &mut got);
        assert_ne!(code, PCC_OK);
    }
}

#[test]
fn run_pipeline_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture(root);
    let cfg = micro_cfg(root);
    let cfg_path = root.join("run.toml");
    cfg.save(&cfg_path).unwrap();

    let c_cfg = cstr(cfg_path.to_str().unwrap());
    let mut miou = f64::NAN;
    unsafe {
        assert_eq!(pcc_run_pipeline(c_cfg.as_ptr(), &mut miou), PCC_OK);
    }
    assert!((0.0..=1.0).contains(&miou), "mean IoU {miou} out of range");
    assert!(root.join("out/report_cluster_token.json").exists());

    unsafe {
        let bogus = cstr("/nonexistent/run.toml");
        assert_ne!(pcc_run_pipeline(bogus.as_ptr(), &mut miou), PCC_OK);
        // NULL out pointer just discards the score
        assert_eq!(pcc_run_pipeline(c_cfg.as_ptr(), std::ptr::null_mut()), PCC_OK);
    }
}
