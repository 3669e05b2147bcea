//! Patch-token encoder: a small vision transformer trained from scratch.
//!
//! The image is cut into non-overlapping d x d patches, each flattened and
//! linearly embedded; learned absolute positional embeddings are added, then
//! `depth` pre-norm transformer blocks and a final layer norm produce one
//! token per patch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{PccError, Result};
use crate::nn::{seeded_rng, truncated_normal, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input side in pixels; inputs are square (n = h = w).
    pub image_side: usize,
    /// Patch side in pixels; must divide `image_side`.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(PccError::shape(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(PccError::shape(format!(
                "embed dim {} not divisible by head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(PccError::config("encoder depth must be >= 1"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(PccError::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Total token count s = (n/d)^2.
    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened patch length (d^2 pixels x 3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Per-patch feature matrix produced by the encoder.
#[derive(Clone, Debug)]
pub struct PatchTokens {
    pub values: Tensor,
    pub grid_side: usize,
}

const LN_EPS: f64 = 1e-6;

// ===========================================================================
// Parameters
// ===========================================================================

/// Draw all encoder parameters: truncated-normal (std 0.02) weights and
/// positional table, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &EncoderConfig) -> ParamSet {
    let mut rng = seeded_rng(cfg.seed);
    let mut params = ParamSet::new();
    let e = cfg.embed_dim;
    let m = cfg.mlp_dim();
    const STD: f64 = 0.02;

    params.insert(
        "encoder.patch_embed.weight",
        truncated_normal(cfg.patch_dim(), e, STD, &mut rng),
    );
    params.insert("encoder.patch_embed.bias", Tensor::zeros(1, e));
    params.insert(
        "encoder.pos_embed",
        truncated_normal(cfg.num_tokens(), e, STD, &mut rng),
    );
    for block in 0..cfg.depth {
        let p = |suffix: &str| format!("encoder.block{block}.{suffix}");
        params.insert(p("ln1.gain"), Tensor::filled(1, e, 1.0));
        params.insert(p("ln1.shift"), Tensor::zeros(1, e));
        params.insert(p("attn.qkv.weight"), truncated_normal(e, 3 * e, STD, &mut rng));
        params.insert(p("attn.qkv.bias"), Tensor::zeros(1, 3 * e));
        params.insert(p("attn.proj.weight"), truncated_normal(e, e, STD, &mut rng));
        params.insert(p("attn.proj.bias"), Tensor::zeros(1, e));
        params.insert(p("ln2.gain"), Tensor::filled(1, e, 1.0));
        params.insert(p("ln2.shift"), Tensor::zeros(1, e));
        params.insert(p("mlp.fc1.weight"), truncated_normal(e, m, STD, &mut rng));
        params.insert(p("mlp.fc1.bias"), Tensor::zeros(1, m));
        params.insert(p("mlp.fc2.weight"), truncated_normal(m, e, STD, &mut rng));
        params.insert(p("mlp.fc2.bias"), Tensor::zeros(1, e));
    }
    params.insert("encoder.ln_final.gain", Tensor::filled(1, e, 1.0));
    params.insert("encoder.ln_final.shift", Tensor::zeros(1, e));
    params
}

/// Closed-form scalar count for the parameter set `init_params` builds.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let e = cfg.embed_dim;
    let m = cfg.mlp_dim();
    let s = cfg.num_tokens();
    let patch = cfg.patch_dim() * e + e;
    let pos = s * e;
    let per_block = {
        let ln1 = 2 * e;
        let qkv = e * 3 * e + 3 * e;
        let proj = e * e + e;
        let ln2 = 2 * e;
        let fc1 = e * m + m;
        let fc2 = m * e + e;
        ln1 + qkv + proj + ln2 + fc1 + fc2
    };
    let ln_final = 2 * e;
    patch + pos + cfg.depth * per_block + ln_final
}

// ===========================================================================
// Forward pass
// ===========================================================================

/// Cut the image into patches and flatten each one, row-major within the
/// patch, channels innermost. Output is s x (3 d^2).
pub fn patchify(x: &ImageSample, cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.width != cfg.image_side || x.height != cfg.image_side {
        return Err(PccError::shape(format!(
            "image {} is {}x{}, encoder expects {0}x{0} -> {2}x{2}",
            x.identifier, x.width, cfg.image_side
        )));
    }
    let g = cfg.grid_side();
    let d = cfg.patch_size;
    let mut out = Tensor::zeros(cfg.num_tokens(), cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut i = 0;
            for dy in 0..d {
                for dx in 0..d {
                    for c in 0..3 {
                        row[i] = x.pixel(gy * d + dy, gx * d + dx, c);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Run the transformer over already-patchified input, on a tape. `leaves`
/// must contain every name `init_params` creates.
pub fn encoder_forward(
    tape: &Tape,
    leaves: &BTreeMap<String, Var>,
    patches: Var,
    cfg: &EncoderConfig,
) -> Var {
    let at = |name: &str| {
        *leaves
            .get(name)
            .unwrap_or_else(|| panic!("missing encoder parameter: {name}"))
    };
    let e = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let embedded = tape.matmul(patches, at("encoder.patch_embed.weight"));
    let embedded = tape.add_row(embedded, at("encoder.patch_embed.bias"));
    let mut x = tape.add(embedded, at("encoder.pos_embed"));

    for block in 0..cfg.depth {
        let p = |suffix: &str| format!("encoder.block{block}.{suffix}");

        // attention sublayer, pre-norm
        let normed = tape.layer_norm(x, at(&p("ln1.gain")), at(&p("ln1.shift")), LN_EPS);
        let qkv = tape.matmul(normed, at(&p("attn.qkv.weight")));
        let qkv = tape.add_row(qkv, at(&p("attn.qkv.bias")));
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * dh..(h + 1) * dh);
            let k = tape.slice_cols(qkv, e + h * dh..e + (h + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * e + h * dh..2 * e + (h + 1) * dh);
            // scores = q k^T / sqrt(dh); square s x s matrix
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(attn, v));
        }
        let merged = tape.concat_cols(&head_outputs);
        let projected = tape.matmul(merged, at(&p("attn.proj.weight")));
        let projected = tape.add_row(projected, at(&p("attn.proj.bias")));
        x = tape.add(x, projected);

        // MLP sublayer, pre-norm
        let normed = tape.layer_norm(x, at(&p("ln2.gain")), at(&p("ln2.shift")), LN_EPS);
        let hidden = tape.matmul(normed, at(&p("mlp.fc1.weight")));
        let hidden = tape.add_row(hidden, at(&p("mlp.fc1.bias")));
        let hidden = tape.gelu(hidden);
        let output = tape.matmul(hidden, at(&p("mlp.fc2.weight")));
        let output = tape.add_row(output, at(&p("mlp.fc2.bias")));
        x = tape.add(x, output);
    }

    tape.layer_norm(
        x,
        at("encoder.ln_final.gain"),
        at("encoder.ln_final.shift"),
        LN_EPS,
    )
}

/// One-shot evaluation entry point: patchify, run the forward pass on a
/// scratch tape, return the token matrix.
pub fn encode(x: &ImageSample, cfg: &EncoderConfig, params: &ParamSet) -> Result<PatchTokens> {
    let patches = patchify(x, cfg)?;
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let input = tape.leaf(patches);
    let out = encoder_forward(&tape, &leaves, input, cfg);
    let values = tape.value(out);
    if !values.all_finite() {
        return Err(PccError::shape("encoder produced non-finite values"));
    }
    Ok(PatchTokens { values, grid_side: cfg.grid_side() })
}
