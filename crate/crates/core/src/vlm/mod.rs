//! The toy vision-language model.
//!
//! An image becomes visual tokens through a per-patch linear embedder and a
//! projector into the language model's embedding space. The language model
//! consumes visual and text tokens under one of two wirings: dedicated
//! cross-attention sublayers, or one joint self-attention over the
//! concatenated sequence.

mod checkpoint;
pub(crate) mod forward;
mod tokenizer;
mod train;

pub use checkpoint::{read_params, write_params, TVLM_MAGIC};
pub use forward::{patch_matrix, ForwardOutput};
pub use tokenizer::{Tokenizer, BOS_ID, EOS_ID, PAD_ID, REFUSE_ID, SPECIAL_TOKENS};
pub use train::{finetune, prepare_examples, TrainExample, TrainHParams, TrainLog};

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{ParamSet, Tensor};

/// How text attends to visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Dedicated text-to-visual cross-attention sublayer in every layer.
    CrossAttention,
    /// One self-attention over `[visual tokens || text tokens]`.
    JointSelfAttention,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(AttentionMode::CrossAttention),
            "joint_self_attention" => Ok(AttentionMode::JointSelfAttention),
            other => Err(CoreError::config(format!(
                "unknown attention_mode {other} (expected cross_attention or joint_self_attention)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::CrossAttention => "cross_attention",
            AttentionMode::JointSelfAttention => "joint_self_attention",
        }
    }
}

/// Longest answer the model will score or emit (tokens, EOS included).
pub const MAX_ANSWER_TOKENS: usize = 10;

#[derive(Debug, Clone)]
pub struct VLMConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_visual_tokens: usize,
    pub max_query_len: usize,
    pub vocab_size: usize,
    pub attention_mode: AttentionMode,
    pub image_side: usize,
    pub patch_side: usize,
}

impl VLMConfig {
    /// Defaults except `vocab_size`, which comes from the tokenizer.
    pub fn with_vocab(vocab_size: usize) -> Self {
        VLMConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_visual_tokens: 16,
            max_query_len: 24,
            vocab_size,
            attention_mode: AttentionMode::CrossAttention,
            image_side: 16,
            patch_side: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(CoreError::config("d_model, n_layers, n_heads must be > 0"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(CoreError::config(format!(
                "patch_side {} must divide image_side {}",
                self.patch_side, self.image_side
            )));
        }
        let grid = self.image_side / self.patch_side;
        if self.n_visual_tokens != grid * grid {
            return Err(CoreError::config(format!(
                "n_visual_tokens {} must equal (image_side/patch_side)^2 = {}",
                self.n_visual_tokens,
                grid * grid
            )));
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return Err(CoreError::config("vocab_size too small"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Maximum text positions: BOS + question + answer tokens.
    pub fn max_text_len(&self) -> usize {
        1 + self.max_query_len + MAX_ANSWER_TOKENS
    }
}

/// Named parameter map for the toy VLM.
#[derive(Debug, Clone)]
pub struct VLMParams {
    pub config: VLMConfig,
    pub set: ParamSet,
}

/// Name/shape layout implied by a config, in serialization order.
pub fn param_layout(cfg: &VLMConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, dff) = (cfg.d_model, cfg.head_dim(), cfg.ffn_dim());
    let mut layout: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.w".into(), vec![cfg.patch_dim(), d]),
        ("patch_embed.b".into(), vec![d]),
        ("projector.w".into(), vec![d, d]),
        ("projector.b".into(), vec![d]),
        ("pos.visual".into(), vec![cfg.n_visual_tokens, d]),
        ("pos.text".into(), vec![cfg.max_text_len(), d]),
        ("tok_embed".into(), vec![cfg.vocab_size, d]),
    ];
    for l in 0..cfg.n_layers {
        layout.push((format!("layer{l}.ln_attn.g"), vec![d]));
        layout.push((format!("layer{l}.ln_attn.b"), vec![d]));
        for h in 0..cfg.n_heads {
            layout.push((format!("layer{l}.self.q{h}"), vec![d, dh]));
            layout.push((format!("layer{l}.self.k{h}"), vec![d, dh]));
            layout.push((format!("layer{l}.self.v{h}"), vec![d, dh]));
            layout.push((format!("layer{l}.self.o{h}"), vec![dh, d]));
        }
        if cfg.attention_mode == AttentionMode::CrossAttention {
            layout.push((format!("layer{l}.ln_cross.g"), vec![d]));
            layout.push((format!("layer{l}.ln_cross.b"), vec![d]));
            for h in 0..cfg.n_heads {
                layout.push((format!("layer{l}.cross.q{h}"), vec![d, dh]));
                layout.push((format!("layer{l}.cross.k{h}"), vec![d, dh]));
                layout.push((format!("layer{l}.cross.v{h}"), vec![d, dh]));
                layout.push((format!("layer{l}.cross.o{h}"), vec![dh, d]));
            }
        }
        layout.push((format!("layer{l}.ln_ffn.g"), vec![d]));
        layout.push((format!("layer{l}.ln_ffn.b"), vec![d]));
        layout.push((format!("layer{l}.ffn.w1"), vec![d, dff]));
        layout.push((format!("layer{l}.ffn.b1"), vec![dff]));
        layout.push((format!("layer{l}.ffn.w2"), vec![dff, d]));
        layout.push((format!("layer{l}.ffn.b2"), vec![d]));
    }
    layout.push(("final_ln.g".into(), vec![d]));
    layout.push(("final_ln.b".into(), vec![d]));
    layout.push(("head.w".into(), vec![d, cfg.vocab_size]));
    layout
}

/// Deterministic initialization: weights uniform in +-1/sqrt(fan_in), layer
/// norm gains 1 and biases 0. Everything starts trainable.
pub fn init_vlm(config: &VLMConfig, seed: u64) -> Result<VLMParams> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    for (name, shape) in param_layout(config) {
        let t = if name.ends_with("ln_attn.g")
            || name.ends_with("ln_cross.g")
            || name.ends_with("ln_ffn.g")
            || name.ends_with("final_ln.g")
        {
            Tensor::from_vec(&shape, vec![1.0; shape.iter().product()])?
        } else if name.ends_with(".b")
            && (name.contains("ln_") || name.contains("final_ln"))
        {
            Tensor::zeros(&shape)
        } else {
            let fan_in = shape[0];
            let scale = 1.0 / (fan_in as f32).sqrt();
            Tensor::uniform(&shape, scale, &mut rng)
        };
        set.push(&name, t.with_grad());
    }
    Ok(VLMParams {
        config: config.clone(),
        set,
    })
}

impl VLMParams {
    pub fn trainable_count(&self) -> usize {
        self.set.trainable_count()
    }

    pub fn total_count(&self) -> usize {
        self.set.total_count()
    }

    /// Freeze every parameter (the unlearning setting).
    pub fn freeze_all(&mut self) {
        self.set.set_all_requires_grad(false);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_params(path, TVLM_MAGIC, &self.set)
    }

    pub fn load(path: &Path, config: &VLMConfig) -> Result<VLMParams> {
        config.validate()?;
        let entries = read_params(path, TVLM_MAGIC)?;
        let layout = param_layout(config);
        if entries.len() != layout.len() {
            return Err(CoreError::config(format!(
                "checkpoint has {} parameters, config implies {}",
                entries.len(),
                layout.len()
            )));
        }
        let mut set = ParamSet::new();
        for ((name, tensor), (want_name, want_shape)) in entries.into_iter().zip(layout) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(CoreError::config(format!(
                    "checkpoint entry {name} {:?} does not match config layout {want_name} {want_shape:?}",
                    tensor.shape()
                )));
            }
            set.push(&name, tensor);
        }
        Ok(VLMParams {
            config: config.clone(),
            set,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> VLMConfig {
        VLMConfig::with_vocab(50)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_vlm(&cfg(), 1).unwrap();
        let b = init_vlm(&cfg(), 1).unwrap();
        assert_eq!(a.set.content_hash(), b.set.content_hash());
        let c = init_vlm(&cfg(), 2).unwrap();
        assert_ne!(a.set.content_hash(), c.set.content_hash());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // hand-computed from the layout: embedder + projector + positions +
        // embeddings + per-layer attention/ffn/norms + final norm + head
        let c = cfg();
        let (d, v) = (32usize, 50usize);
        let per_head = 3 * d * (d / 2) + (d / 2) * d; // q,k,v [d,dh], o [dh,d]
        let per_layer_self = 2 * per_head + 2 * d; // heads + ln
        let per_layer_cross = 2 * per_head + 2 * d;
        let per_layer_ffn = d * 128 + 128 + 128 * d + d + 2 * d;
        let expected = 16 * d
            + d
            + d * d
            + d
            + 16 * d
            + c.max_text_len() * d
            + v * d
            + c.n_layers * (per_layer_self + per_layer_cross + per_layer_ffn)
            + 2 * d
            + d * v;
        let params = init_vlm(&c, 0).unwrap();
        assert_eq!(params.total_count(), expected);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(init_vlm(&c, 0).is_err()); // 32 % 3 != 0
        let mut c = cfg();
        c.n_visual_tokens = 9;
        assert!(init_vlm(&c, 0).is_err());
        let mut c = cfg();
        c.patch_side = 5;
        assert!(init_vlm(&c, 0).is_err());
    }
}
