//! Fully-connected CRF refinement of dense class probabilities via mean-field
//! iteration with Gaussian edge potentials (a smoothness kernel over pixel
//! positions plus an appearance kernel over positions and colors).
//!
//! Pairwise terms use a Potts compatibility, so each update is
//!
//! ```text
//! Q_i(l) <- (1/Z_i) * p_i(l) * exp(-sum_{j != i} k_ij * (1 - Q_j(l)))
//! ```
//!
//! where `k_ij` is the weighted kernel sum. Updates are simultaneous: every
//! iteration reads the previous iteration's Q for all pixels. Kernels are
//! evaluated on the fly (no lattice approximation), which is fine at the
//! image sizes this crate targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PccError, Result};
use crate::pseudo::DenseProbs;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CrfConfig {
    pub iterations: usize,
    pub spatial_weight: f64,
    pub bilateral_weight: f64,
    pub spatial_sigma: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            iterations: 5,
            spatial_weight: 3.0,
            bilateral_weight: 5.0,
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 49.0,
            bilateral_sigma_rgb: 13.0,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spatial_sigma", self.spatial_sigma),
            ("bilateral_sigma_xy", self.bilateral_sigma_xy),
            ("bilateral_sigma_rgb", self.bilateral_sigma_rgb),
        ] {
            if v <= 0.0 {
                return Err(PccError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.spatial_weight < 0.0 || self.bilateral_weight < 0.0 {
            return Err(PccError::config("kernel weights must be non-negative"));
        }
        Ok(())
    }
}

/// Pairwise kernel between pixels i and j (diagonal is never evaluated).
#[inline]
fn kernel(cfg: &CrfConfig, pos: &[(f64, f64)], rgb: &[u8], i: usize, j: usize) -> f64 {
    let dy = pos[i].0 - pos[j].0;
    let dx = pos[i].1 - pos[j].1;
    let d2 = dy * dy + dx * dx;
    let spatial = cfg.spatial_weight * (-d2 / (2.0 * cfg.spatial_sigma * cfg.spatial_sigma)).exp();
    let mut c2 = 0.0;
    for ch in 0..3 {
        let dc = rgb[i * 3 + ch] as f64 - rgb[j * 3 + ch] as f64;
        c2 += dc * dc;
    }
    let bilateral = cfg.bilateral_weight
        * (-d2 / (2.0 * cfg.bilateral_sigma_xy * cfg.bilateral_sigma_xy)
            - c2 / (2.0 * cfg.bilateral_sigma_rgb * cfg.bilateral_sigma_rgb))
            .exp();
    spatial + bilateral
}

/// Run mean-field refinement. `rgb` is the guide image as interleaved 8-bit
/// RGB matching the probability map's height and width.
pub fn crf_refine(probs: &DenseProbs, rgb: &[u8], cfg: &CrfConfig) -> Result<DenseProbs> {
    cfg.validate()?;
    let (h, w, c) = (probs.height, probs.width, probs.num_classes);
    let n = h * w;
    if rgb.len() != n * 3 {
        return Err(PccError::shape(format!(
            "guide image holds {} bytes, expected {h}x{w}x3",
            rgb.len()
        )));
    }
    if c == 0 || n == 0 {
        return Err(PccError::shape("empty probability map"));
    }

    let pos: Vec<(f64, f64)> = (0..n).map(|i| ((i / w) as f64, (i % w) as f64)).collect();

    // unary term: the (normalized) input distribution
    let mut q: Vec<f64> = probs.data().to_vec();
    for px in q.chunks_mut(c) {
        let sum: f64 = px.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(PccError::shape("input distribution must have positive finite mass"));
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
    let p = q.clone();

    for _ in 0..cfg.iterations {
        let prev = q;
        let mut next = vec![0.0; n * c];
        next.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
            // message passing: k-weighted sum of neighbor beliefs per label,
            // plus the total kernel mass so the Potts energy is ksum - kq[l]
            let mut ksum = 0.0;
            let mut kq = vec![0.0; c];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = kernel(cfg, &pos, rgb, i, j);
                ksum += k;
                for (acc, &qv) in kq.iter_mut().zip(&prev[j * c..(j + 1) * c]) {
                    *acc += k * qv;
                }
            }
            let mut z = 0.0;
            for l in 0..c {
                let v = p[i * c + l] * (-(ksum - kq[l])).exp();
                out[l] = v;
                z += v;
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        });
        q = next;
    }

    DenseProbs::from_flat(h, w, c, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;

    fn random_probs(h: usize, w: usize, c: usize, seed: u64) -> DenseProbs {
        let mut rng = seeded_rng(seed);
        let mut data = vec![0.0; h * w * c];
        for px in data.chunks_mut(c) {
            let mut sum = 0.0;
            for v in px.iter_mut() {
                *v = rng.random::<f64>() + 1e-3;
                sum += *v;
            }
            for v in px.iter_mut() {
                *v /= sum;
            }
        }
        DenseProbs::from_flat(h, w, c, data).unwrap()
    }

    fn random_rgb(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = seeded_rng(seed);
        (0..n * 3).map(|_| rng.random::<u8>()).collect()
    }

    /// Straight transcription of the update rule, no factoring tricks, no
    /// parallelism. Must agree with the production path to near machine
    /// precision.
    fn mean_field_oracle(probs: &DenseProbs, rgb: &[u8], cfg: &CrfConfig) -> Vec<f64> {
        let (h, w, c) = (probs.height, probs.width, probs.num_classes);
        let n = h * w;
        let pos: Vec<(f64, f64)> = (0..n).map(|i| ((i / w) as f64, (i % w) as f64)).collect();
        let mut q: Vec<f64> = probs.data().to_vec();
        for px in q.chunks_mut(c) {
            let sum: f64 = px.iter().sum();
            for v in px.iter_mut() {
                *v /= sum;
            }
        }
        let p = q.clone();
        for _ in 0..cfg.iterations {
            let mut next = vec![0.0; n * c];
            for i in 0..n {
                for l in 0..c {
                    let mut energy = 0.0;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        energy += kernel(cfg, &pos, rgb, i, j) * (1.0 - q[j * c + l]);
                    }
                    next[i * c + l] = p[i * c + l] * (-energy).exp();
                }
                let z: f64 = next[i * c..(i + 1) * c].iter().sum();
                for v in &mut next[i * c..(i + 1) * c] {
                    *v /= z;
                }
            }
            q = next;
        }
        q
    }

    #[test]
    fn zero_weights_leave_normalized_input_untouched() {
        let cfg = CrfConfig {
            spatial_weight: 0.0,
            bilateral_weight: 0.0,
            ..CrfConfig::default()
        };
        // inputs that sum to exactly 1.0 per pixel
        let data = vec![
            0.5, 0.25, 0.25, //
            1.0, 0.0, 0.0, //
            0.125, 0.375, 0.5, //
            0.75, 0.125, 0.125,
        ];
        let probs = DenseProbs::from_flat(2, 2, 3, data.clone()).unwrap();
        let rgb = random_rgb(4, 1);
        let out = crf_refine(&probs, &rgb, &cfg).unwrap();
        assert_eq!(out.data(), &data[..], "zero pairwise weight must be the identity");
    }

    #[test]
    fn uniform_distributions_stay_uniform() {
        let c = 4;
        let probs = DenseProbs::from_flat(3, 3, c, vec![1.0 / c as f64; 9 * c]).unwrap();
        let rgb = vec![77u8; 9 * 3]; // constant-color guide
        let out = crf_refine(&probs, &rgb, &CrfConfig::default()).unwrap();
        for &v in out.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_oracle_on_small_grids() {
        for (h, w, c, seed) in [(3, 4, 2, 70u64), (8, 8, 3, 71), (5, 7, 4, 72)] {
            let probs = random_probs(h, w, c, seed);
            let rgb = random_rgb(h * w, seed + 100);
            let cfg = CrfConfig { iterations: 3, ..CrfConfig::default() };
            let got = crf_refine(&probs, &rgb, &cfg).unwrap();
            let want = mean_field_oracle(&probs, &rgb, &cfg);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-8, "{h}x{w}x{c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn every_iteration_count_yields_normalized_output() {
        let probs = random_probs(4, 4, 3, 73);
        let rgb = random_rgb(16, 74);
        for iterations in 1..=5 {
            let cfg = CrfConfig { iterations, ..CrfConfig::default() };
            let out = crf_refine(&probs, &rgb, &cfg).unwrap();
            for px in out.data().chunks(3) {
                let sum: f64 = px.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "iter={iterations}: pixel sums to {sum}");
            }
        }
    }

    #[test]
    fn refinement_sharpens_a_noisy_two_region_map() {
        // left half leans class 0, right half leans class 1, with one noisy
        // pixel in each half; colors cleanly separate the halves
        let (h, w) = (6, 6);
        let mut data = Vec::new();
        let mut rgb = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let left = x < w / 2;
                let p0: f64 = if left { 0.7 } else { 0.3 };
                let noisy = (y == 2 && x == 1) || (y == 3 && x == 4);
                let p0 = if noisy { 1.0 - p0 } else { p0 };
                data.extend_from_slice(&[p0, 1.0 - p0]);
                rgb.extend_from_slice(if left { &[200, 30, 30] } else { &[30, 30, 200] });
            }
        }
        let probs = DenseProbs::from_flat(h, w, 2, data).unwrap();
        let out = crf_refine(&probs, &rgb, &CrfConfig::default()).unwrap();
        // the noisy pixels get pulled back toward their region's class
        assert!(out.get(2, 1, 0) > 0.5, "left-half outlier should revert to class 0");
        assert!(out.get(3, 4, 1) > 0.5, "right-half outlier should revert to class 1");
    }

    #[test]
    fn mismatched_guide_is_shape_error() {
        let probs = random_probs(2, 2, 2, 75);
        assert!(crf_refine(&probs, &[0u8; 9], &CrfConfig::default()).is_err());
    }

    #[test]
    fn nonpositive_sigma_is_config_error() {
        let cfg = CrfConfig { spatial_sigma: 0.0, ..CrfConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
