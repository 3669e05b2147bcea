//! Cluster-token fusion and grid refinement.
//!
//! The image's cluster vector is embedded to a single token (a multi-hot
//! row-sum over a learnable embedding matrix), appended to every patch
//! token, and the fused grid is refined by a bidirectional LSTM sweep along
//! rows followed by one along columns (shape-preserving).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterVector;
use crate::error::{PccError, Result};
use crate::nn::{uniform_init, ParamSet, Tape, Tensor, Var};

/// What gets appended to each patch token, if anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Patch tokens pass through unchanged.
    None,
    /// A learned global token, identical for every image.
    ClassToken,
    /// The image's embedded cluster vector.
    ClusterToken,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::None => write!(f, "none"),
            FusionMode::ClassToken => write!(f, "class_token"),
            FusionMode::ClusterToken => write!(f, "cluster_token"),
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = PccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "class_token" => Ok(FusionMode::ClassToken),
            "cluster_token" => Ok(FusionMode::ClusterToken),
            other => Err(PccError::config(format!("unknown fusion mode: {other}"))),
        }
    }
}

// ===========================================================================
// Cluster embedding (multi-hot row-sum) and fusion
// ===========================================================================

/// F_c = u^T G: sum of the embedding rows selected by u's 1-bits. Literal
/// multi-hot sum — no normalization by the number of active clusters, which
/// is what makes the embedding additive over disjoint cluster sets.
pub fn embed_clusters(u: &ClusterVector, g: &Tensor) -> Result<Vec<f64>> {
    if u.len() != g.rows() {
        return Err(PccError::shape(format!(
            "cluster vector has {} bits but embedding matrix has {} rows",
            u.len(),
            g.rows()
        )));
    }
    let mut out = vec![0.0; g.cols()];
    for (i, &bit) in u.bits().iter().enumerate() {
        if bit == 1 {
            for (o, &v) in out.iter_mut().zip(g.row(i)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Append `token` to every row of `patch_tokens`; `None` passes through.
pub fn fuse(patch_tokens: &Tensor, token: Option<&[f64]>) -> Tensor {
    match token {
        None => patch_tokens.clone(),
        Some(suffix) => {
            let (s, e) = patch_tokens.shape();
            let mut out = Tensor::zeros(s, e + suffix.len());
            for r in 0..s {
                out.row_mut(r)[..e].copy_from_slice(patch_tokens.row(r));
                out.row_mut(r)[e..].copy_from_slice(suffix);
            }
            out
        }
    }
}

/// Tape counterpart of [`embed_clusters`]: u enters as a constant 1 x L row.
pub fn embed_clusters_on_tape(tape: &Tape, u: &ClusterVector, g: Var) -> Var {
    let row = Tensor::row_vector(&u.as_f64());
    let u_var = tape.leaf(row);
    tape.matmul(u_var, g)
}

/// Tape counterpart of [`fuse`].
pub fn fuse_on_tape(tape: &Tape, patch_tokens: Var, token: Option<Var>) -> Var {
    match token {
        None => patch_tokens,
        Some(t) => {
            let (s, _) = tape.shape(patch_tokens);
            let broadcast = tape.broadcast_row(t, s);
            tape.concat_cols(&[patch_tokens, broadcast])
        }
    }
}

// ===========================================================================
// HV-BiLSTM refiner
// ===========================================================================

/// Hidden width per direction for a given token width.
pub fn refiner_hidden_dim(feature_dim: usize) -> usize {
    (feature_dim / 2).max(1)
}

/// Parameters for the two bidirectional passes. Namespaces:
/// `refiner.h.*` (row sweep) and `refiner.v.*` (column sweep), each with
/// forward/backward LSTM cells and a projection back to the token width.
///
/// Cells use the standard recurrent fan-in init, uniform on ±1/sqrt(hidden),
/// and the projection ±1/sqrt(2*hidden). Biases start at zero except the
/// forget gate, which starts strongly negative: a fresh cell then passes
/// each token through almost memorylessly, so early class scores are driven
/// by what a patch contains rather than by where the scan sequences start
/// and stop. Under a weak image-level loss that distinction decides whether
/// the model localizes objects or memorizes grid positions; the bias is
/// learnable, so the recurrence can open up as training finds uses for it.
pub const FORGET_BIAS_INIT: f64 = -3.0;

pub fn init_refiner_params(params: &mut ParamSet, feature_dim: usize, rng: &mut impl Rng) {
    let h = refiner_hidden_dim(feature_dim);
    let k = 1.0 / (h as f64).sqrt();
    for axis in ["h", "v"] {
        for dir in ["fwd", "bwd"] {
            params.insert(
                format!("refiner.{axis}.{dir}.w_ih"),
                uniform_init(feature_dim, 4 * h, k, rng),
            );
            params.insert(
                format!("refiner.{axis}.{dir}.w_hh"),
                uniform_init(h, 4 * h, k, rng),
            );
            let mut bias = Tensor::zeros(1, 4 * h);
            for col in h..2 * h {
                bias.set(0, col, FORGET_BIAS_INIT);
            }
            params.insert(format!("refiner.{axis}.{dir}.bias"), bias);
        }
        params.insert(
            format!("refiner.{axis}.proj.weight"),
            uniform_init(2 * h, feature_dim, 1.0 / (2.0 * h as f64).sqrt(), rng),
        );
        params.insert(format!("refiner.{axis}.proj.bias"), Tensor::zeros(1, feature_dim));
    }
}

pub fn refiner_param_count(feature_dim: usize) -> usize {
    let h = refiner_hidden_dim(feature_dim);
    let cell = feature_dim * 4 * h + h * 4 * h + 4 * h;
    let proj = 2 * h * feature_dim + feature_dim;
    2 * (2 * cell + proj)
}

struct LstmCell {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl LstmCell {
    fn from_leaves(leaves: &BTreeMap<String, Var>, tape: &Tape, prefix: &str) -> Self {
        let at = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            *leaves
                .get(&name)
                .unwrap_or_else(|| panic!("missing refiner parameter: {name}"))
        };
        let w_hh = at("w_hh");
        let (hidden, _) = tape.shape(w_hh);
        LstmCell { w_ih: at("w_ih"), w_hh, bias: at("bias"), hidden }
    }

    /// One step over a batch of sequences: `x` is batch x F, state carries
    /// (h, c) both batch x hidden. Gate order: input, forget, cell, output.
    fn step(&self, tape: &Tape, x: Var, state: (Var, Var)) -> (Var, Var) {
        let (h_prev, c_prev) = state;
        let gates = tape.add(
            tape.matmul(x, self.w_ih),
            tape.matmul(h_prev, self.w_hh),
        );
        let gates = tape.add_row(gates, self.bias);
        let hd = self.hidden;
        let i = tape.sigmoid(tape.slice_cols(gates, 0..hd));
        let f = tape.sigmoid(tape.slice_cols(gates, hd..2 * hd));
        let g = tape.tanh(tape.slice_cols(gates, 2 * hd..3 * hd));
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * hd..4 * hd));
        let c = tape.add(tape.mul(f, c_prev), tape.mul(i, g));
        let h = tape.mul(o, tape.tanh(c));
        (h, c)
    }
}

/// Run one LSTM over a sequence of batch x F steps, returning the hidden
/// state at every step. Exposed so tests can pin the recurrence against a
/// hand-unrolled oracle.
pub fn lstm_scan(tape: &Tape, cell: &LstmCellParams, xs: &[Var]) -> Vec<Var> {
    assert!(!xs.is_empty());
    let (batch, _) = tape.shape(xs[0]);
    let cell = LstmCell {
        w_ih: cell.w_ih,
        w_hh: cell.w_hh,
        bias: cell.bias,
        hidden: cell.hidden,
    };
    let mut h = tape.leaf(Tensor::zeros(batch, cell.hidden));
    let mut c = tape.leaf(Tensor::zeros(batch, cell.hidden));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let (nh, nc) = cell.step(tape, x, (h, c));
        h = nh;
        c = nc;
        out.push(h);
    }
    out
}

/// Public handle to one LSTM cell's tape leaves.
pub struct LstmCellParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn from_leaves(leaves: &BTreeMap<String, Var>, tape: &Tape, prefix: &str) -> Self {
        let cell = LstmCell::from_leaves(leaves, tape, prefix);
        LstmCellParams {
            w_ih: cell.w_ih,
            w_hh: cell.w_hh,
            bias: cell.bias,
            hidden: cell.hidden,
        }
    }
}

/// Bidirectional scan + projection over a sequence of batch x F steps.
/// Returns one batch x F output per step.
fn bilstm_axis(
    tape: &Tape,
    leaves: &BTreeMap<String, Var>,
    axis: &str,
    xs: &[Var],
) -> Vec<Var> {
    let fwd = LstmCell::from_leaves(leaves, tape, &format!("refiner.{axis}.fwd"));
    let bwd = LstmCell::from_leaves(leaves, tape, &format!("refiner.{axis}.bwd"));
    let proj_w = leaves[&format!("refiner.{axis}.proj.weight")];
    let proj_b = leaves[&format!("refiner.{axis}.proj.bias")];
    let steps = xs.len();
    let (batch, _) = tape.shape(xs[0]);

    let zero = || tape.leaf(Tensor::zeros(batch, fwd.hidden));
    let mut h_fwd = Vec::with_capacity(steps);
    let mut state = (zero(), zero());
    for &x in xs {
        state = fwd.step(tape, x, state);
        h_fwd.push(state.0);
    }
    let mut h_bwd = vec![None; steps];
    let mut state = (zero(), zero());
    for t in (0..steps).rev() {
        state = bwd.step(tape, xs[t], state);
        h_bwd[t] = Some(state.0);
    }

    (0..steps)
        .map(|t| {
            let both = tape.concat_cols(&[h_fwd[t], h_bwd[t].expect("filled")]);
            let projected = tape.matmul(both, proj_w);
            tape.add_row(projected, proj_b)
        })
        .collect()
}

/// Refine a fused token grid: bidirectional LSTM along every grid row, then
/// along every grid column of the result. Shape-preserving (s x F in, s x F
/// out). Tokens are in row-major grid order: index = row * grid_side + col.
pub fn refine_on_tape(
    tape: &Tape,
    leaves: &BTreeMap<String, Var>,
    tokens: Var,
    grid_side: usize,
) -> Result<Var> {
    let (s, _) = tape.shape(tokens);
    if grid_side * grid_side != s {
        return Err(PccError::shape(format!(
            "{s} tokens do not form a {grid_side}x{grid_side} grid"
        )));
    }
    let g = grid_side;

    // Horizontal sweep: time = column index, batch = grid rows.
    // Step t sees the g tokens (r, t), r = 0..g.
    let column_slices: Vec<Var> = (0..g)
        .map(|t| {
            let idx: Vec<usize> = (0..g).map(|r| r * g + t).collect();
            tape.gather_rows(tokens, idx)
        })
        .collect();
    let h_out = bilstm_axis(tape, leaves, "h", &column_slices);
    // Reassemble row-major: stacking step outputs gives column-major order
    // (step t's row r is token (r, t) at stacked index t*g + r).
    let stacked = tape.concat_rows(&h_out);
    let to_row_major: Vec<usize> = (0..s).map(|i| (i % g) * g + i / g).collect();
    let after_h = tape.gather_rows(stacked, to_row_major);

    // Vertical sweep: time = row index, batch = grid columns.
    // Step t sees the g tokens (t, c), c = 0..g; stacking is already
    // row-major (step t's row c is token (t, c) at stacked index t*g + c).
    let row_slices: Vec<Var> = (0..g)
        .map(|t| {
            let idx: Vec<usize> = (0..g).map(|c| t * g + c).collect();
            tape.gather_rows(after_h, idx)
        })
        .collect();
    let v_out = bilstm_axis(tape, leaves, "v", &row_slices);
    Ok(tape.concat_rows(&v_out))
}

/// Evaluation wrapper: refine plain values with the given parameters.
pub fn refine(tokens: &Tensor, grid_side: usize, params: &ParamSet) -> Result<Tensor> {
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let input = tape.leaf(tokens.clone());
    let out = refine_on_tape(&tape, &leaves, input, grid_side)?;
    Ok(tape.value(out))
}
