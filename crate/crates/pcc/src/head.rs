//! Patch classification, top-k pooling, and the multi-label training loss,
//! plus the full per-image forward chain that strings every stage together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_vector, ClusterAssignment};
use crate::data::ImageSample;
use crate::encoder::{encoder_forward, patchify, EncoderConfig};
use crate::error::{PccError, Result};
use crate::fusion::{
    embed_clusters_on_tape, fuse_on_tape, init_refiner_params, refine_on_tape, FusionMode,
};
use crate::nn::tape::{bce_mean_forward, softmax_rows_forward, topk_col_mean_forward};
use crate::nn::{seeded_rng, truncated_normal, ParamSet, Tape, Tensor, Var};

/// Probability clip for the cross-entropy terms.
pub const BCE_EPS: f64 = 1e-7;

// ===========================================================================
// Class vocabulary and label vectors
// ===========================================================================

/// Ordered class names; index 0 is always the background class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    classes: Vec<String>,
}

pub const BACKGROUND: &str = "background";

impl ClassVocabulary {
    /// Background plus the given foreground categories, in their given order.
    pub fn with_background(foreground: &[String]) -> Result<Self> {
        if foreground.iter().any(|c| c == BACKGROUND) {
            return Err(PccError::config(
                "foreground categories must not be named `background`",
            ));
        }
        let mut classes = vec![BACKGROUND.to_string()];
        classes.extend(foreground.iter().cloned());
        Ok(ClassVocabulary { classes })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Binary target vector: bit per class, background always set.
    pub fn label_vector(&self, labels: &[String]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.classes.len()];
        y[0] = 1.0;
        for label in labels {
            let idx = self.index_of(label).ok_or_else(|| {
                PccError::config(format!("label {label} is not in the class vocabulary"))
            })?;
            y[idx] = 1.0;
        }
        Ok(y)
    }
}

// ===========================================================================
// Spec ops (plain evaluation path)
// ===========================================================================

/// Z = row-softmax(F_out W): per-patch class distributions.
pub fn classify_patches(f_out: &Tensor, w: &Tensor) -> Result<Tensor> {
    if f_out.cols() != w.rows() {
        return Err(PccError::shape(format!(
            "token width {} does not match classifier input width {}",
            f_out.cols(),
            w.rows()
        )));
    }
    Ok(softmax_rows_forward(&f_out.matmul(w)))
}

/// p_c = mean of the k largest entries of column c. Ties break toward the
/// lower patch index.
pub fn topk_pool(z: &Tensor, k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > z.rows() {
        return Err(PccError::shape(format!(
            "top-k k={k} out of range for {} patches",
            z.rows()
        )));
    }
    let (pooled, _) = topk_col_mean_forward(z, k);
    Ok(pooled.into_data())
}

/// Class-averaged binary cross-entropy with probability clipping. With
/// `include_background` the c = 0 term participates; otherwise the average
/// runs over foreground classes only.
pub fn mce_loss(p: &[f64], y: &[f64], include_background: bool) -> Result<f64> {
    if p.len() != y.len() {
        return Err(PccError::shape(format!(
            "prediction length {} != target length {}",
            p.len(),
            y.len()
        )));
    }
    let from_class = usize::from(!include_background);
    if p.len() <= from_class {
        return Err(PccError::shape("no classes left to average over"));
    }
    Ok(bce_mean_forward(p, y, BCE_EPS, from_class))
}

// ===========================================================================
// Whole-model assembly
// ===========================================================================

/// Everything the forward pass needs to know about the architecture.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    /// Width H of the appended token (ignored for `FusionMode::None`).
    pub cluster_dim: usize,
    pub fusion_mode: FusionMode,
    /// Cluster vocabulary size L (rows of the embedding matrix); only
    /// meaningful for `FusionMode::ClusterToken`.
    pub num_clusters: usize,
    /// Total classes C, background included.
    pub num_classes: usize,
    /// k of the top-k image-level pooling.
    pub topk: usize,
    /// Whether the background term enters the loss average.
    pub include_background_in_loss: bool,
}

impl ModelSpec {
    /// Token width after fusion (e, or e + H when a token is appended).
    pub fn feature_dim(&self) -> usize {
        match self.fusion_mode {
            FusionMode::None => self.encoder.embed_dim,
            _ => self.encoder.embed_dim + self.cluster_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(PccError::config("need at least background + one class"));
        }
        if self.topk < 1 || self.topk > self.encoder.num_tokens() {
            return Err(PccError::shape(format!(
                "top-k k={} out of range for {} tokens",
                self.topk,
                self.encoder.num_tokens()
            )));
        }
        match self.fusion_mode {
            FusionMode::None => {}
            FusionMode::ClassToken => {
                if self.cluster_dim == 0 {
                    return Err(PccError::config("class_token fusion needs cluster_dim > 0"));
                }
            }
            FusionMode::ClusterToken => {
                if self.cluster_dim == 0 || self.num_clusters == 0 {
                    return Err(PccError::config(
                        "cluster_token fusion needs cluster_dim > 0 and a cluster vocabulary",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Initialize every parameter namespace the spec'd model needs, from one
/// seeded stream: encoder, fusion token source, refiner, classifier.
pub fn init_model_params(spec: &ModelSpec) -> ParamSet {
    let mut params = crate::encoder::init_params(&spec.encoder);
    let mut rng = seeded_rng(spec.encoder.seed ^ 0x5eed_f00d);
    const STD: f64 = 0.02;
    match spec.fusion_mode {
        FusionMode::None => {}
        FusionMode::ClassToken => {
            params.insert(
                "fusion.class_token",
                truncated_normal(1, spec.cluster_dim, STD, &mut rng),
            );
        }
        FusionMode::ClusterToken => {
            params.insert(
                "fusion.cluster_embed",
                truncated_normal(spec.num_clusters, spec.cluster_dim, STD, &mut rng),
            );
        }
    }
    init_refiner_params(&mut params, spec.feature_dim(), &mut rng);
    params.insert(
        "head.weight",
        truncated_normal(spec.feature_dim(), spec.num_classes, STD, &mut rng),
    );
    params
}

/// Tape-level forward chain from patchified input to (loss, Z).
///
/// `u_bits` is the image's cluster vector (required iff fusion_mode is
/// cluster_token); `y` the image-level target vector of length C.
pub fn forward_loss_on_tape(
    tape: &Tape,
    leaves: &BTreeMap<String, Var>,
    patches: Var,
    u_bits: Option<&crate::cluster::ClusterVector>,
    y: &[f64],
    spec: &ModelSpec,
) -> Result<(Var, Var)> {
    let f_v = encoder_forward(tape, leaves, patches, &spec.encoder);

    let token = match spec.fusion_mode {
        FusionMode::None => None,
        FusionMode::ClassToken => Some(leaves["fusion.class_token"]),
        FusionMode::ClusterToken => {
            let u = u_bits.ok_or_else(|| {
                PccError::config("cluster_token fusion requires a cluster vector")
            })?;
            let g = leaves["fusion.cluster_embed"];
            let (l, _) = tape.shape(g);
            if u.len() != l {
                return Err(PccError::shape(format!(
                    "cluster vector has {} bits, embedding matrix expects {l}",
                    u.len()
                )));
            }
            Some(embed_clusters_on_tape(tape, u, g))
        }
    };

    let fused = fuse_on_tape(tape, f_v, token);
    let refined = refine_on_tape(tape, leaves, fused, spec.encoder.grid_side())?;
    let logits = tape.matmul(refined, leaves["head.weight"]);
    let z = tape.softmax_rows(logits);
    let pooled = tape.topk_col_mean(z, spec.topk);
    let from_class = usize::from(!spec.include_background_in_loss);
    let loss = tape.bce_mean(pooled, y.to_vec(), BCE_EPS, from_class);
    Ok((loss, z))
}

/// Per-image evaluation entry point: run the whole chain on a scratch tape.
/// Returns the scalar loss and the patch predictions Z.
pub fn forward_loss(
    x: &ImageSample,
    assignment: Option<&ClusterAssignment>,
    vocab: &ClassVocabulary,
    spec: &ModelSpec,
    params: &ParamSet,
) -> Result<(f64, Tensor)> {
    spec.validate()?;
    let y = vocab.label_vector(&x.labels)?;
    let u = match spec.fusion_mode {
        FusionMode::ClusterToken => {
            let assignment = assignment.ok_or_else(|| {
                PccError::config("cluster_token fusion requires a cluster assignment")
            })?;
            Some(cluster_vector(&x.labels, assignment)?)
        }
        _ => None,
    };
    let patches = patchify(x, &spec.encoder)?;
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let input = tape.leaf(patches);
    let (loss, z) = forward_loss_on_tape(&tape, &leaves, input, u.as_ref(), &y, spec)?;
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(PccError::Divergence(format!(
            "loss for image {} is not finite",
            x.identifier
        )));
    }
    Ok((loss_value, tape.value(z)))
}

/// Inference-only pass: patch predictions Z without a loss (no labels used).
pub fn predict_patches(
    x: &ImageSample,
    u: Option<&crate::cluster::ClusterVector>,
    spec: &ModelSpec,
    params: &ParamSet,
) -> Result<Tensor> {
    spec.validate()?;
    let patches = patchify(x, &spec.encoder)?;
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let input = tape.leaf(patches);

    let f_v = encoder_forward(&tape, &leaves, input, &spec.encoder);
    let token = match spec.fusion_mode {
        FusionMode::None => None,
        FusionMode::ClassToken => Some(leaves["fusion.class_token"]),
        FusionMode::ClusterToken => {
            let u = u.ok_or_else(|| {
                PccError::config("cluster_token fusion requires a cluster vector")
            })?;
            Some(embed_clusters_on_tape(&tape, u, leaves["fusion.cluster_embed"]))
        }
    };
    let fused = fuse_on_tape(&tape, f_v, token);
    let refined = refine_on_tape(&tape, &leaves, fused, spec.encoder.grid_side())?;
    let logits = tape.matmul(refined, leaves["head.weight"]);
    let z = tape.softmax_rows(logits);
    Ok(tape.value(z))
}
