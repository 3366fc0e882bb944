//! Cross-modal attention extraction, the averaged score vector alpha, and
//! bottom-k visual token selection.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::vlm::{AttentionMode, VLMParams};

/// Per-forward-pass record of attention matrices.
///
/// In joint self-attention mode `self_heads` holds the full
/// `(n_v + n_text) x (n_v + n_text)` matrices and the cross-modal block is
/// extracted by slicing. In cross-attention mode `self_heads` holds the text
/// self-attention (`n_text x n_text`) and `cross_heads` holds the dedicated
/// `n_text x n_v` matrices directly.
#[derive(Debug, Clone)]
pub struct AttentionProfile {
    pub mode: AttentionMode,
    pub n_visual: usize,
    pub n_text: usize,
    pub n_heads: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerAttention {
    pub self_heads: Vec<Tensor>,
    pub cross_heads: Vec<Tensor>,
}

/// Bottom-k selection over the alpha scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub alpha: Vec<f32>,
    /// k distinct indices, ascending; ties broken toward the lower index.
    pub indices: Vec<usize>,
}

/// Per-head cross-modal attention `A in R^{n_text x n_v}` for one layer.
///
/// The joint-mode block is returned exactly as stored in the full attention
/// matrix (rows are text positions, columns visual positions), with no
/// renormalization.
pub fn extract_cross_modal(profile: &AttentionProfile, layer: usize) -> Result<Vec<Tensor>> {
    let la = profile.layers.get(layer).ok_or_else(|| {
        CoreError::contract(format!(
            "extract_cross_modal: layer {layer} out of range 0..{}",
            profile.layers.len()
        ))
    })?;
    match profile.mode {
        AttentionMode::CrossAttention => Ok(la.cross_heads.clone()),
        AttentionMode::JointSelfAttention => {
            let (nv, nt) = (profile.n_visual, profile.n_text);
            la.self_heads
                .iter()
                .map(|full| {
                    let s = full.shape();
                    if s != [nv + nt, nv + nt] {
                        return Err(CoreError::ShapeMismatch {
                            kernel: "extract_cross_modal",
                            lhs: s.to_vec(),
                            rhs: vec![nv + nt, nv + nt],
                        });
                    }
                    let side = nv + nt;
                    let mut block = Vec::with_capacity(nt * nv);
                    for ti in 0..nt {
                        let row = nv + ti;
                        block.extend_from_slice(&full.data()[row * side..row * side + nv]);
                    }
                    Tensor::from_vec(&[nt, nv], block)
                })
                .collect()
        }
    }
}

/// Average attention over all heads and all query rows:
/// `alpha[j] = (1 / (n_q * n_h)) * sum_h sum_i A_h[i][j]`.
pub fn attention_alpha(blocks: &[Tensor]) -> Result<Vec<f32>> {
    let first = blocks
        .first()
        .ok_or_else(|| CoreError::contract("attention_alpha: empty block list"))?;
    let (rows, cols) = (first.shape()[0], first.shape()[1]);
    for b in blocks {
        if b.shape() != [rows, cols] {
            return Err(CoreError::ShapeMismatch {
                kernel: "attention_alpha",
                lhs: first.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let mut alpha = vec![0.0f32; cols];
    for b in blocks {
        for r in 0..rows {
            for c in 0..cols {
                alpha[c] += b.data()[r * cols + c];
            }
        }
    }
    let norm = 1.0 / (rows * blocks.len()) as f32;
    for a in alpha.iter_mut() {
        *a *= norm;
    }
    Ok(alpha)
}

/// Indices of the k smallest alpha values, ties broken by lower index,
/// returned ascending.
pub fn bottom_k(alpha: &[f32], k: usize) -> Result<SelectionResult> {
    if k == 0 || k > alpha.len() {
        return Err(CoreError::contract(format!(
            "bottom_k: k={k} out of range 1..={}",
            alpha.len()
        )));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| {
        alpha[a]
            .partial_cmp(&alpha[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        alpha: alpha.to_vec(),
        indices,
    })
}

/// Probe the frozen model with the question only (no answer tokens) and
/// untransformed visual tokens, then select the k least attended tokens
/// from the first attention layer with a cross-modal block.
pub fn probe_selection(
    params: &VLMParams,
    zv: &Tensor,
    question: &[u32],
    k: usize,
) -> Result<SelectionResult> {
    let out = params.forward(zv, question, &[], true)?;
    let blocks = extract_cross_modal(&out.profile, 0)?;
    let alpha = attention_alpha(&blocks)?;
    bottom_k(&alpha, k)
}
