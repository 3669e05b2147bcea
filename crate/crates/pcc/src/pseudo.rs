//! Dense pseudo labels from patch predictions: bilinear upsampling to pixel
//! resolution, per-pixel argmax, and palette-PNG persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{PccError, Result};
use crate::nn::Tensor;

/// Per-pixel class distributions, h x w x C, row-major, classes innermost.
#[derive(Clone, Debug)]
pub struct DenseProbs {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    data: Vec<f64>,
}

impl DenseProbs {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        DenseProbs {
            height,
            width,
            num_classes,
            data: vec![0.0; height * width * num_classes],
        }
    }

    pub fn from_flat(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * num_classes {
            return Err(PccError::shape(format!(
                "probability buffer holds {} values, expected {height}x{width}x{num_classes}",
                data.len()
            )));
        }
        Ok(DenseProbs { height, width, num_classes, data })
    }

    pub fn get(&self, y: usize, x: usize, class: usize) -> f64 {
        self.data[(y * self.width + x) * self.num_classes + class]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn set(&mut self, y: usize, x: usize, class: usize, v: f64) {
        self.data[(y * self.width + x) * self.num_classes + class] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.num_classes;
        &mut self.data[base..base + self.num_classes]
    }
}

/// Integer class map, h x w.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
    pub source_id: String,
}

impl PseudoLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(PccError::shape(format!(
                "label buffer holds {} values, expected {height}x{width}",
                labels.len()
            )));
        }
        Ok(PseudoLabelMap { height, width, labels, source_id: source_id.into() })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Distinct class indices present, sorted.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

// ===========================================================================
// Upsampling and argmax
// ===========================================================================

/// Bilinearly interpolate the grid of patch predictions up to pixel
/// resolution. `z` is s x C with s = grid_side^2 (row-major grid order).
///
/// Sampling uses the half-pixel convention: a destination pixel center maps
/// to source coordinate (dst + 0.5) * scale - 0.5, clamped to the grid.
pub fn upsample_predictions(
    z: &Tensor,
    grid_side: usize,
    target_h: usize,
    target_w: usize,
) -> Result<DenseProbs> {
    let (s, c) = z.shape();
    if grid_side * grid_side != s {
        return Err(PccError::shape(format!(
            "{s} prediction rows do not form a {grid_side}x{grid_side} grid"
        )));
    }
    if target_h == 0 || target_w == 0 {
        return Err(PccError::shape("target size must be positive"));
    }
    let g = grid_side;
    let scale_y = g as f64 / target_h as f64;
    let scale_x = g as f64 / target_w as f64;
    let mut out = DenseProbs::new(target_h, target_w, c);
    for ty in 0..target_h {
        let sy = ((ty as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (g - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(g - 1);
        let wy = sy - y0 as f64;
        for tx in 0..target_w {
            let sx = ((tx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (g - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(g - 1);
            let wx = sx - x0 as f64;
            let px = out.pixel_mut(ty, tx);
            for (ch, p) in px.iter_mut().enumerate() {
                let v00 = z.get(y0 * g + x0, ch);
                let v01 = z.get(y0 * g + x1, ch);
                let v10 = z.get(y1 * g + x0, ch);
                let v11 = z.get(y1 * g + x1, ch);
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bottom = v10 * (1.0 - wx) + v11 * wx;
                *p = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax; ties break toward the lower class index.
pub fn argmax_labels(dense: &DenseProbs, source_id: &str) -> PseudoLabelMap {
    let mut labels = Vec::with_capacity(dense.height * dense.width);
    for y in 0..dense.height {
        for x in 0..dense.width {
            let px = dense.pixel(y, x);
            let mut best = 0usize;
            for (c, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    PseudoLabelMap {
        height: dense.height,
        width: dense.width,
        labels,
        source_id: source_id.to_string(),
    }
}

// ===========================================================================
// PNG I/O
// ===========================================================================

/// The 256-entry palette used for mask files (the VOC-style bit-twiddled
/// colormap, so masks open recognizably in image viewers).
pub fn mask_palette() -> Vec<u8> {
    let mut palette = vec![0u8; 256 * 3];
    for i in 0..256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) << (7 - j)) as u8;
            g |= (((c >> 1) & 1) << (7 - j)) as u8;
            b |= (((c >> 2) & 1) << (7 - j)) as u8;
            c >>= 3;
        }
        palette[i * 3] = r;
        palette[i * 3 + 1] = g;
        palette[i * 3 + 2] = b;
    }
    palette
}

/// Write a label map as an 8-bit indexed PNG with the standard palette.
pub fn write_mask_png(map: &PseudoLabelMap, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(mask_palette());
    let mut writer = encoder
        .write_header()
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&map.labels)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read a label map written by [`write_mask_png`] (or any 8-bit indexed /
/// grayscale PNG).
pub fn read_mask_png(path: &Path) -> Result<Vec<Vec<u8>>> {
    let file = File::open(path)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png dimensions overflow")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (ct, bd) => {
            return Err(PccError::format(format!(
                "{}: mask must be 8-bit indexed or grayscale, found {ct:?}/{bd:?}",
                path.display()
            )))
        }
    }
    let w = info.width as usize;
    let h = info.height as usize;
    let mut rows = Vec::with_capacity(h);
    for y in 0..h {
        rows.push(buf[y * info.line_size..y * info.line_size + w].to_vec());
    }
    Ok(rows)
}

/// Load a pseudo/ground-truth mask as a [`PseudoLabelMap`].
pub fn load_mask_map(path: &Path, source_id: &str) -> Result<PseudoLabelMap> {
    let rows = read_mask_png(path)?;
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    let labels = rows.into_iter().flatten().collect();
    PseudoLabelMap::new(height, width, labels, source_id)
}

/// Write an RGB image (pixel values in [0,1]) as an 8-bit PNG.
pub fn write_rgb_png(width: usize, height: usize, pixels: &[f64], path: &Path) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(PccError::shape("pixel buffer does not match dimensions"));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read an RGB(A) PNG into interleaved RGB bytes.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png dimensions overflow")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    let w = info.width as usize;
    let h = info.height as usize;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(PccError::format(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let px = &line[x * channels..];
            match channels {
                1 | 2 => {
                    rgb.extend_from_slice(&[px[0], px[0], px[0]]);
                }
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::softmax_rows_forward;
    use crate::nn::{seeded_rng, truncated_normal};
    use rand::Rng;

    fn stochastic_grid(grid: usize, classes: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        softmax_rows_forward(&truncated_normal(grid * grid, classes, 2.0, &mut rng))
    }

    // ----- upsampling ------------------------------------------------------

    #[test]
    fn constant_rows_upsample_to_constant() {
        let v = [0.2, 0.5, 0.3];
        let mut z = Tensor::zeros(4, 3);
        for r in 0..4 {
            z.row_mut(r).copy_from_slice(&v);
        }
        let dense = upsample_predictions(&z, 2, 7, 5).unwrap();
        for y in 0..7 {
            for x in 0..5 {
                for c in 0..3 {
                    assert_eq!(dense.get(y, x, c), v[c]);
                }
            }
        }
    }

    #[test]
    fn same_size_upsample_is_identity() {
        let z = stochastic_grid(2, 3, 60);
        let dense = upsample_predictions(&z, 2, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert!((dense.get(y, x, c) - z.get(y * 2 + x, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_by_two_to_four_by_four_matches_pixel_weight_oracle() {
        let z = stochastic_grid(2, 2, 61);
        let dense = upsample_predictions(&z, 2, 4, 4).unwrap();

        // independent per-pixel oracle with explicit corner weights
        let sample = |y: usize, x: usize, c: usize| -> f64 {
            let s = |t: usize| (t as f64 + 0.5) * 0.5 - 0.5;
            let sy = s(y).clamp(0.0, 1.0);
            let sx = s(x).clamp(0.0, 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(1);
            let x1 = (x0 + 1).min(1);
            let dy = sy - y0 as f64;
            let dx = sx - x0 as f64;
            z.get(y0 * 2 + x0, c) * (1.0 - dy) * (1.0 - dx)
                + z.get(y0 * 2 + x1, c) * (1.0 - dy) * dx
                + z.get(y1 * 2 + x0, c) * dy * (1.0 - dx)
                + z.get(y1 * 2 + x1, c) * dy * dx
        };
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    assert!((dense.get(y, x, c) - sample(y, x, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsampled_pixels_remain_stochastic() {
        let z = stochastic_grid(3, 4, 62);
        let dense = upsample_predictions(&z, 3, 10, 8).unwrap();
        for y in 0..10 {
            for x in 0..8 {
                let sum: f64 = dense.pixel(y, x).iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "pixel ({y},{x}) sums to {sum}");
            }
        }
    }

    #[test]
    fn bad_grid_is_shape_error() {
        let z = Tensor::zeros(5, 2);
        assert!(upsample_predictions(&z, 2, 4, 4).is_err());
    }

    // ----- argmax ----------------------------------------------------------

    #[test]
    fn picks_largest_class() {
        let mut dense = DenseProbs::new(1, 1, 3);
        dense.pixel_mut(0, 0).copy_from_slice(&[0.1, 0.7, 0.2]);
        let map = argmax_labels(&dense, "t");
        assert_eq!(map.get(0, 0), 1);
    }

    #[test]
    fn tie_breaks_toward_lower_index() {
        let mut dense = DenseProbs::new(1, 1, 2);
        dense.pixel_mut(0, 0).copy_from_slice(&[0.5, 0.5]);
        assert_eq!(argmax_labels(&dense, "t").get(0, 0), 0);
    }

    #[test]
    fn matches_loop_oracle_on_random_tensor() {
        let mut rng = seeded_rng(63);
        let mut dense = DenseProbs::new(3, 3, 4);
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..4 {
                    dense.set(y, x, c, rng.random::<f64>());
                }
            }
        }
        let map = argmax_labels(&dense, "t");
        for y in 0..3 {
            for x in 0..3 {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..4 {
                    let v = dense.get(y, x, c);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                assert_eq!(map.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn constant_z_composes_to_constant_label_map() {
        let mut z = Tensor::zeros(9, 3);
        for r in 0..9 {
            z.row_mut(r).copy_from_slice(&[0.2, 0.3, 0.5]);
        }
        let dense = upsample_predictions(&z, 3, 12, 12).unwrap();
        let map = argmax_labels(&dense, "t");
        assert!(map.labels().iter().all(|&l| l == 2));
    }

    // ----- PNG round trips ----------------------------------------------------

    #[test]
    fn mask_roundtrips_through_palette_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let labels: Vec<u8> = (0..20u8).map(|i| i % 4).collect();
        let map = PseudoLabelMap::new(4, 5, labels.clone(), "img1").unwrap();
        write_mask_png(&map, &path).unwrap();
        let loaded = load_mask_map(&path, "img1").unwrap();
        assert_eq!(loaded.labels(), &labels[..]);
        assert_eq!((loaded.height, loaded.width), (4, 5));
        assert_eq!(loaded.present_classes(), [0, 1, 2, 3]);
    }

    #[test]
    fn rgb_roundtrips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let pixels: Vec<f64> = (0..4 * 3 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        write_rgb_png(3, 4, &pixels, &path).unwrap();
        let (w, h, rgb) = read_rgb_png(&path).unwrap();
        assert_eq!((w, h), (3, 4));
        let expect: Vec<u8> = pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        assert_eq!(rgb, expect);
    }

    #[test]
    fn palette_has_voc_anchor_colors() {
        let p = mask_palette();
        assert_eq!(&p[0..3], &[0, 0, 0], "background is black");
        assert_eq!(&p[3..6], &[128, 0, 0], "class 1 is dark red");
        assert_eq!(&p[6..9], &[0, 128, 0], "class 2 is dark green");
    }
}
