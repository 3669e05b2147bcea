//! Seeded synthetic shape datasets: small RGB scenes of colored geometric
//! shapes on a noisy background, written out in the same directory layout the
//! ingester reads, with dense masks kept strictly for evaluation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split};
use crate::error::{PccError, Result};
use crate::nn::seeded_rng;
use crate::pseudo::{write_mask_png, write_rgb_png, PseudoLabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

/// One foreground class: a shape drawn in a fixed color.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeClass {
    pub name: String,
    pub kind: ShapeKind,
    /// 8-bit RGB fill color.
    pub color: [u8; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_side: usize,
    pub num_images: usize,
    pub classes: Vec<ShapeClass>,
    /// 0 = clean scenes; 1 = heavy pixel noise plus background distractors.
    pub clutter: f64,
    /// Fraction of images routed to the val split (0 keeps everything in train).
    pub val_fraction: f64,
    /// Upper bound on foreground shapes per image (sampled 1..=max).
    pub max_shapes: usize,
    /// Chance that an image is pure background (no shapes, empty label set).
    /// Background-only scenes pin down what "background" means under weak
    /// supervision: without them, swapping the roles of the background class
    /// and a foreground class can fit the image-level labels equally well.
    pub empty_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_side: 64,
            num_images: 40,
            classes: vec![
                ShapeClass { name: "disk".into(), kind: ShapeKind::Disk, color: [220, 50, 40] },
                ShapeClass { name: "square".into(), kind: ShapeKind::Square, color: [40, 90, 220] },
            ],
            clutter: 0.3,
            val_fraction: 0.0,
            max_shapes: 2,
            empty_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(PccError::config("need at least 2 shape classes"));
        }
        if self.image_side < 16 {
            return Err(PccError::config("image_side must be at least 16"));
        }
        if self.num_images == 0 {
            return Err(PccError::config("num_images must be positive"));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(PccError::config("clutter must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PccError::config("val_fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(PccError::config("empty_fraction must lie in [0, 1)"));
        }
        if self.max_shapes == 0 {
            return Err(PccError::config("max_shapes must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.name.is_empty()
                || c.name
                    .chars()
                    .any(|ch| ch.is_whitespace() || ch == ',' || ch == ':')
            {
                return Err(PccError::config(format!(
                    "class name {:?} must be non-empty without spaces, commas, or colons",
                    c.name
                )));
            }
            if c.name.eq_ignore_ascii_case("background") {
                return Err(PccError::config("'background' is reserved for class 0"));
            }
            if !seen.insert(c.name.to_ascii_lowercase()) {
                return Err(PccError::config(format!("duplicate class name {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        let spec: SyntheticSpec = toml::from_str(&text)
            .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| PccError::format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Is the pixel at offset (dy, dx) from the shape center inside a shape of
/// half-extent `a`?
fn covers(kind: ShapeKind, dy: f64, dx: f64, a: f64) -> bool {
    match kind {
        ShapeKind::Disk => dy * dy + dx * dx <= a * a,
        ShapeKind::Square => dy.abs() <= a && dx.abs() <= a,
        ShapeKind::Triangle => {
            // apex at the top, base at the bottom
            if dy < -a || dy > a {
                return false;
            }
            let half_width = (dy + a) / (2.0 * a) * a;
            dx.abs() <= half_width
        }
        ShapeKind::Ring => {
            let d2 = dy * dy + dx * dx;
            let inner = 0.55 * a;
            d2 >= inner * inner && d2 <= a * a
        }
    }
}

fn draw_shape(
    image: &mut [f64],
    mask: Option<&mut [u8]>,
    side: usize,
    kind: ShapeKind,
    cy: usize,
    cx: usize,
    a: usize,
    color: [f64; 3],
    class_index: u8,
) {
    let af = a as f64;
    let y_lo = cy.saturating_sub(a);
    let y_hi = (cy + a).min(side - 1);
    let x_lo = cx.saturating_sub(a);
    let x_hi = (cx + a).min(side - 1);
    let mut mask = mask;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 - cy as f64;
            let dx = x as f64 - cx as f64;
            if covers(kind, dy, dx, af) {
                let base = (y * side + x) * 3;
                image[base..base + 3].copy_from_slice(&color);
                if let Some(m) = mask.as_deref_mut() {
                    m[y * side + x] = class_index;
                }
            }
        }
    }
}

/// Generate the dataset under `out_dir` and return the train-split manifest.
///
/// Layout written:
/// ```text
/// out_dir/JPEGImages/{id}.png            RGB scenes
/// out_dir/SegmentationClass/{id}.png     dense masks (evaluation only)
/// out_dir/ImageSets/Segmentation/train.txt, val.txt
/// out_dir/image_labels.txt               "{id} name1,name2" per line
/// out_dir/classes.txt                    foreground names, one per line
/// ```
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let side = spec.image_side;
    fs::create_dir_all(out_dir.join("JPEGImages"))?;
    fs::create_dir_all(out_dir.join("SegmentationClass"))?;
    fs::create_dir_all(out_dir.join("ImageSets/Segmentation"))?;

    let mut rng: ChaCha8Rng = seeded_rng(spec.seed);
    let mut label_lines = Vec::with_capacity(spec.num_images);
    let mut ids = Vec::with_capacity(spec.num_images);

    for i in 0..spec.num_images {
        let id = format!("img_{i:04}");
        let mut image = vec![0.0f64; side * side * 3];
        // muted dark background
        for px in image.chunks_mut(3) {
            px.copy_from_slice(&[0.12, 0.12, 0.14]);
        }
        let mut mask = vec![0u8; side * side];

        // background distractors: dull gray blobs that belong to class 0
        let distractors = (spec.clutter * 3.0).round() as usize;
        for _ in 0..distractors {
            let a = (side / 12).max(2);
            let cy = rng.random_range(a..side - a);
            let cx = rng.random_range(a..side - a);
            let g = rng.random_range(0.25..0.45);
            draw_shape(&mut image, None, side, ShapeKind::Disk, cy, cx, a, [g, g, g], 0);
        }

        // foreground shapes; later shapes overdraw earlier ones in both the
        // image and the mask, so the mask stays the source of truth
        let shapes = if rng.random::<f64>() < spec.empty_fraction {
            0
        } else {
            rng.random_range(1..=spec.max_shapes)
        };
        for _ in 0..shapes {
            let k = rng.random_range(0..spec.classes.len());
            let class = &spec.classes[k];
            let a = rng.random_range((side / 6).max(3)..=(side / 3).max(4));
            let cy = rng.random_range(a..side - a);
            let cx = rng.random_range(a..side - a);
            let color = [
                class.color[0] as f64 / 255.0,
                class.color[1] as f64 / 255.0,
                class.color[2] as f64 / 255.0,
            ];
            draw_shape(
                &mut image,
                Some(&mut mask),
                side,
                class.kind,
                cy,
                cx,
                a,
                color,
                (k + 1) as u8,
            );
        }

        // pixel noise scaled by clutter
        let amp = 0.12 * spec.clutter;
        if amp > 0.0 {
            for v in image.iter_mut() {
                *v = (*v + rng.random_range(-amp..amp)).clamp(0.0, 1.0);
            }
        }

        // image-level labels = classes actually visible in the mask, so a
        // fully-overdrawn shape never leaks a phantom label
        let mut visible: Vec<usize> = Vec::new();
        for &m in &mask {
            if m > 0 && !visible.contains(&(m as usize - 1)) {
                visible.push(m as usize - 1);
            }
        }
        visible.sort_unstable();
        let names: Vec<&str> = visible.iter().map(|&k| spec.classes[k].name.as_str()).collect();

        write_rgb_png(side, side, &image, &out_dir.join(format!("JPEGImages/{id}.png")))?;
        let map = PseudoLabelMap::new(side, side, mask, &id)?;
        write_mask_png(&map, &out_dir.join(format!("SegmentationClass/{id}.png")))?;
        label_lines.push(format!("{id} {}", names.join(",")));
        ids.push(id);
    }

    let val_count = (spec.num_images as f64 * spec.val_fraction).round() as usize;
    let train_count = spec.num_images - val_count;
    let train_list = ids[..train_count].join("\n");
    let val_list = ids[train_count..].join("\n");
    fs::write(out_dir.join("ImageSets/Segmentation/train.txt"), train_list + "\n")?;
    fs::write(out_dir.join("ImageSets/Segmentation/val.txt"), val_list + "\n")?;
    fs::write(out_dir.join("image_labels.txt"), label_lines.join("\n") + "\n")?;
    let class_names: Vec<&str> = spec.classes.iter().map(|c| c.name.as_str()).collect();
    fs::write(out_dir.join("classes.txt"), class_names.join("\n") + "\n")?;

    crate::data::voc::ingest_voc_style(out_dir, Split::Train)
}
