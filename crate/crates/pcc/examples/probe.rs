// Diagnostic scratch tool: correlate per-patch class scores with patch
// content (mean redness) versus grid position (border distance), at init and
// from a trained checkpoint, plus a horizontal-flip equivariance probe.
// Not part of the library surface; run with
//   cargo run -p pcc --example probe -- <dataset_dir> [checkpoint]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pcc::checkpoint::Checkpoint;
use pcc::cluster::{cluster_vector, ClusterAssignment};
use pcc::config::RunConfig;
use pcc::data::voc::ingest_voc_style;
use pcc::data::{ImageSample, Split};
use pcc::encoder::EncoderConfig;
use pcc::head::{init_model_params, predict_patches};
use pcc::nn::{ParamSet, Tensor};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

fn patch_redness(img: &ImageSample, grid: usize, patch: usize) -> Vec<f64> {
    let mut red = vec![0.0; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut acc = 0.0;
            for py in 0..patch {
                for px in 0..patch {
                    let y = gy * patch + py;
                    let x = gx * patch + px;
                    acc += img.pixel(y, x, 0) - 0.5 * (img.pixel(y, x, 1) + img.pixel(y, x, 2));
                }
            }
            red[gy * grid + gx] = acc / (patch * patch) as f64;
        }
    }
    red
}

fn borderness(grid: usize) -> Vec<f64> {
    let mut b = vec![0.0; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let d = gy.min(gx).min(grid - 1 - gy).min(grid - 1 - gx);
            b[gy * grid + gx] = -(d as f64);
        }
    }
    b
}

fn flip_image(img: &ImageSample) -> ImageSample {
    let mut pixels = vec![0.0; img.pixels.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                pixels[(y * img.width + (img.width - 1 - x)) * 3 + c] =
                    img.pixels[(y * img.width + x) * 3 + c];
            }
        }
    }
    ImageSample::new(format!("{}_flip", img.identifier), img.width, img.height, pixels, img.labels.clone()).unwrap()
}

fn fg_scores(z: &Tensor) -> Vec<f64> {
    (0..z.rows()).map(|i| 1.0 - z.get(i, 0)).collect()
}

fn report(tag: &str, params: &ParamSet, spec: &pcc::head::ModelSpec, samples: &[(ImageSample, Option<pcc::cluster::ClusterVector>)]) {
    let grid = spec.encoder.grid_side();
    let border = borderness(grid);
    let mut rc = Vec::new();
    let mut rb = Vec::new();
    let mut flipd = Vec::new();
    for (img, u) in samples {
        let z = predict_patches(img, u.as_ref(), spec, params).unwrap();
        let fg = fg_scores(&z);
        let red = patch_redness(img, grid, spec.encoder.patch_size);
        rc.push(pearson(&fg, &red));
        rb.push(pearson(&fg, &border));

        let fl = flip_image(img);
        let zf = predict_patches(&fl, u.as_ref(), spec, params).unwrap();
        let fgf = fg_scores(&zf);
        // compare Z(flip(img)) against flip(Z(img)): equivariant -> ~0 diff
        let mut diff = 0.0;
        let mut mag = 0.0;
        for gy in 0..grid {
            for gx in 0..grid {
                let a = fgf[gy * grid + gx];
                let b = fg[gy * grid + (grid - 1 - gx)];
                diff += (a - b).abs();
                mag += a.abs().max(b.abs());
            }
        }
        flipd.push(diff / mag.max(1e-12));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "{tag}: corr(fg, redness) = {:+.3}   corr(fg, borderness) = {:+.3}   flip-diff = {:.3}",
        mean(&rc),
        mean(&rb),
        mean(&flipd)
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dataset = PathBuf::from(args.first().expect("usage: probe <dataset> [ckpt]"));
    let manifest = ingest_voc_style(&dataset, Split::Train).unwrap();
    let assignment = {
        let mut mapping = std::collections::BTreeMap::new();
        mapping.insert("disk".to_string(), BTreeSet::from(["round".to_string(), "curved".to_string()]));
        mapping.insert("square".to_string(), BTreeSet::from(["angular".to_string(), "straight".to_string()]));
        ClusterAssignment::from_mapping(mapping)
    };

    let cfg = RunConfig {
        encoder: EncoderConfig {
            image_side: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            seed: 0,
        },
        ..RunConfig::default()
    };
    let spec = cfg.model_spec(assignment.num_clusters(), manifest.classes.len() + 1);

    let samples: Vec<(ImageSample, Option<pcc::cluster::ClusterVector>)> = manifest
        .entries
        .iter()
        .take(16)
        .map(|e| {
            let img = manifest.load_image(e).unwrap();
            let u = cluster_vector(&img.labels, &assignment).unwrap();
            (img, Some(u))
        })
        .collect();

    let init = init_model_params(&spec);
    report("init   ", &init, &spec, &samples);

    if let Some(ckpt_path) = args.get(1) {
        let ckpt = Checkpoint::load(Path::new(ckpt_path)).unwrap();
        let spec_t = ckpt.config.model_spec(ckpt.num_clusters, ckpt.classes.len() + 1);
        report("trained", &ckpt.params, &spec_t, &samples);
    }
}
