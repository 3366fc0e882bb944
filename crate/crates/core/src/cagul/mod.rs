//! Cross-modal attention guided unlearning against a frozen backbone.
//!
//! Two small trainable modules ride on the frozen base VLM: a discriminator
//! that decides whether an image belongs to a requesting individual, and a
//! per-token affine encoder that rewrites the k least attended visual tokens
//! for routed samples. The backbone parameters are never touched.

mod train;

pub use train::{
    loss_bce, loss_forget_po, loss_joint, loss_retain, train_cagul, CagulExample, CagulTrainLog,
};

use std::path::Path;

use crate::dataset::words::REFUSAL_TEXT;
use crate::dataset::Image;
use crate::error::{CoreError, Result};
use crate::metrics::QaModel;
use crate::probe::probe_selection;
use crate::rng::Rng;
use crate::tensor::{BoundParams, NodeId, ParamSet, Tape, Tensor};
use crate::vlm::{read_params, write_params, ForwardOutput, Tokenizer, VLMParams};

pub const CGUL_MAGIC: &[u8; 5] = b"CGUL1";

/// Refusal response substituted for forget-set answers.
pub const REFUSAL: &str = REFUSAL_TEXT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Transform every sample; only the encoder trains.
    NoDiscriminator,
    /// Replace the encoder with uniform noise on the selected tokens; only
    /// the discriminator trains.
    NoEncoderRandomNoise,
    /// Selection indices drawn uniformly per sample instead of bottom-k.
    RandomTokenSelection,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_discriminator" => Ok(Ablation::NoDiscriminator),
            "no_encoder_random_noise" => Ok(Ablation::NoEncoderRandomNoise),
            "random_token_selection" => Ok(Ablation::RandomTokenSelection),
            other => Err(CoreError::config(format!("unknown ablation {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDiscriminator => "no_discriminator",
            Ablation::NoEncoderRandomNoise => "no_encoder_random_noise",
            Ablation::RandomTokenSelection => "random_token_selection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    PoGd,
    GaGd,
    GaKl,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "po_gd" => Ok(LossVariant::PoGd),
            "ga_gd" => Ok(LossVariant::GaGd),
            "ga_kl" => Ok(LossVariant::GaKl),
            other => Err(CoreError::config(format!("unknown loss variant {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::PoGd => "po_gd",
            LossVariant::GaGd => "ga_gd",
            LossVariant::GaKl => "ga_kl",
        }
    }
}

/// Default k: the paper ratio 200/6404 of the visual tokens, rounded up.
pub fn default_k(n_visual_tokens: usize) -> usize {
    ((200.0 * n_visual_tokens as f64 / 6404.0).ceil() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct CagulConfig {
    pub k: usize,
    pub threshold: f32,
    pub epochs_discriminator: usize,
    pub epochs_joint: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub ablation: Ablation,
    pub loss_variant: LossVariant,
    pub seed: u64,
    pub disc_hidden: usize,
    /// Seed for the noise ablation's per-sample noise.
    pub noise_seed: u64,
}

impl CagulConfig {
    pub fn for_model(n_visual_tokens: usize) -> Self {
        CagulConfig {
            k: default_k(n_visual_tokens),
            threshold: 0.5,
            epochs_discriminator: 12,
            epochs_joint: 10,
            lr: 2e-2,
            batch_size: 2,
            ablation: Ablation::None,
            loss_variant: LossVariant::PoGd,
            seed: 0,
            disc_hidden: 32,
            noise_seed: 0x9A0C,
        }
    }

    pub fn validate(&self, n_visual_tokens: usize) -> Result<()> {
        if self.k == 0 || self.k > n_visual_tokens {
            return Err(CoreError::config(format!(
                "k {} out of range 1..={n_visual_tokens}",
                self.k
            )));
        }
        if n_visual_tokens < 3 {
            return Err(CoreError::config(
                "discriminator convolution needs at least 3 visual tokens",
            ));
        }
        if self.batch_size == 0 || self.disc_hidden == 0 {
            return Err(CoreError::config("batch_size and disc_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Discriminator `C_phi`: width-3 convolution over the token axis, SiLU,
/// mean-pool, linear head, sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub set: ParamSet,
    pub d_model: usize,
    pub hidden: usize,
}

impl Discriminator {
    pub fn init(d_model: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut set = ParamSet::new();
        let conv_in = 3 * d_model;
        // wide init: backbone visual tokens run small (rms ~ 0.25), so a
        // 1/sqrt(fan_in) first layer would leave the SiLU in its linear
        // regime and the mean-pool would collapse identity information
        let s1 = 16.0 / (conv_in as f32).sqrt();
        set.push(
            "disc.conv.w",
            Tensor::uniform(&[conv_in, hidden], s1, &mut rng).with_grad(),
        );
        set.push("disc.conv.b", Tensor::zeros(&[hidden]).with_grad());
        let s2 = 1.0 / (hidden as f32).sqrt();
        set.push(
            "disc.head.w",
            Tensor::uniform(&[hidden, 1], s2, &mut rng).with_grad(),
        );
        set.push("disc.head.b", Tensor::zeros(&[1]).with_grad());
        Discriminator {
            set,
            d_model,
            hidden,
        }
    }

    /// Probability that the image belongs to a requesting individual.
    pub fn prob(&self, zv: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = self.set.bind(&mut tape)?;
        let zv_id = tape.leaf(zv)?;
        let p = disc_prob_graph(&mut tape, &self.set, &bound, self.d_model, zv_id)?;
        Ok(tape.value(p)[0])
    }

    /// Probability and the hard routing label `prob >= threshold`.
    pub fn discriminate(&self, zv: &Tensor, threshold: f32) -> Result<(f32, bool)> {
        let p = self.prob(zv)?;
        Ok((p, p >= threshold))
    }
}

/// Test-support wrapper over the tape-level discriminator forward.
pub fn disc_prob_for_test(
    tape: &mut Tape,
    disc: &Discriminator,
    bound: &BoundParams,
    zv: NodeId,
) -> Result<NodeId> {
    disc_prob_graph(tape, &disc.set, bound, disc.d_model, zv)
}

/// Discriminator forward on an existing tape.
pub(crate) fn disc_prob_graph(
    tape: &mut Tape,
    set: &ParamSet,
    bound: &BoundParams,
    d_model: usize,
    zv: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(zv).to_vec();
    if shape.len() != 2 || shape[1] != d_model || shape[0] < 3 {
        return Err(CoreError::ShapeMismatch {
            kernel: "discriminate",
            lhs: shape,
            rhs: vec![3, d_model],
        });
    }
    let n_v = shape[0];
    let n_win = n_v - 2;
    // width-3 windows as gathered rows reshaped to [n_win, 3d]
    let mut ids = Vec::with_capacity(n_win * 3);
    for w in 0..n_win {
        ids.extend([w, w + 1, w + 2]);
    }
    let windows = tape.gather_rows(zv, &ids)?;
    let windows = tape.reshape(windows, &[n_win, 3 * d_model])?;
    let conv = tape.matmul(windows, bound.id(set, "disc.conv.w"))?;
    let conv = tape.add_row(conv, bound.id(set, "disc.conv.b"))?;
    let sg = tape.sigmoid(conv)?;
    let act = tape.mul(conv, sg)?; // silu
    let pool_w = tape.constant(&[1, n_win], vec![1.0 / n_win as f32; n_win])?;
    let pooled = tape.matmul(pool_w, act)?;
    let logit = tape.matmul(pooled, bound.id(set, "disc.head.w"))?;
    let logit = tape.add_row(logit, bound.id(set, "disc.head.b"))?;
    tape.sigmoid(logit)
}

/// Visual token encoder `F_psi`: one affine map applied identically to every
/// selected token. Initialized to the identity so unlearning starts from
/// exact base behavior.
#[derive(Debug, Clone)]
pub struct TokenEncoder {
    pub set: ParamSet,
    pub d_model: usize,
}

impl TokenEncoder {
    pub fn init_identity(d_model: usize) -> Self {
        let mut set = ParamSet::new();
        set.push("enc.w", Tensor::eye(d_model).with_grad());
        set.push("enc.b", Tensor::zeros(&[d_model]).with_grad());
        TokenEncoder { set, d_model }
    }

    /// Replace rows `indices` of `zv` with their encoded versions;
    /// non-selected rows are bit-identical copies.
    pub fn transform(&self, zv: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.set.bind(&mut tape)?;
        let zv_id = tape.leaf(zv)?;
        let out = transform_graph(&mut tape, &self.set, &bound, zv_id, indices)?;
        Ok(tape.value_tensor(out))
    }
}

/// Token replacement on an existing tape: gather the selected rows, apply
/// the affine map, and re-gather a merged view so gradients flow only
/// through the selected rows.
pub(crate) fn transform_graph(
    tape: &mut Tape,
    enc_set: &ParamSet,
    enc_bound: &BoundParams,
    zv: NodeId,
    indices: &[usize],
) -> Result<NodeId> {
    let shape = tape.shape(zv).to_vec();
    let n_v = shape[0];
    if indices.is_empty() {
        return tape.reshape(zv, &shape);
    }
    let mut seen = vec![false; n_v];
    for &i in indices {
        if i >= n_v {
            return Err(CoreError::contract(format!(
                "transform_tokens: index {i} out of range 0..{n_v}"
            )));
        }
        if seen[i] {
            return Err(CoreError::contract(format!(
                "transform_tokens: duplicate index {i}"
            )));
        }
        seen[i] = true;
    }
    let selected = tape.gather_rows(zv, indices)?;
    let enc = tape.matmul(selected, enc_bound.id(enc_set, "enc.w"))?;
    let enc = tape.add_row(enc, enc_bound.id(enc_set, "enc.b"))?;
    let merged = tape.concat_rows(zv, enc)?;
    let mut pick = Vec::with_capacity(n_v);
    for row in 0..n_v {
        match indices.iter().position(|&i| i == row) {
            Some(pos) => pick.push(n_v + pos),
            None => pick.push(row),
        }
    }
    tape.gather_rows(merged, &pick)
}

/// Trained unlearning modules plus their configuration.
#[derive(Debug, Clone)]
pub struct CagulModules {
    pub discriminator: Discriminator,
    pub encoder: TokenEncoder,
    pub config: CagulConfig,
}

impl CagulModules {
    pub fn init(d_model: usize, config: CagulConfig, n_visual_tokens: usize) -> Result<Self> {
        config.validate(n_visual_tokens)?;
        Ok(CagulModules {
            discriminator: Discriminator::init(d_model, config.disc_hidden, config.seed ^ 0xD15C),
            encoder: TokenEncoder::init_identity(d_model),
            config,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.discriminator.set.trainable_count() + self.encoder.set.trainable_count()
    }

    /// Uniform U(-1,1) noise for the noise ablation, derived from the visual
    /// tokens so repeated inference on the same input is deterministic.
    pub fn noise_rng(&self, zv: &Tensor) -> Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in zv.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        Rng::new(h ^ self.config.noise_seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut set = ParamSet::new();
        for (name, t) in self.discriminator.set.iter() {
            set.push(name, t.clone());
        }
        for (name, t) in self.encoder.set.iter() {
            set.push(name, t.clone());
        }
        let cfg = &self.config;
        let scalars: Vec<(&str, f32)> = vec![
            ("cfg.k", f32::from_bits(cfg.k as u32)),
            ("cfg.threshold", cfg.threshold),
            ("cfg.epochs_disc", f32::from_bits(cfg.epochs_discriminator as u32)),
            ("cfg.epochs_joint", f32::from_bits(cfg.epochs_joint as u32)),
            ("cfg.lr", cfg.lr),
            ("cfg.batch", f32::from_bits(cfg.batch_size as u32)),
            ("cfg.ablation", f32::from_bits(ablation_code(cfg.ablation))),
            (
                "cfg.loss_variant",
                f32::from_bits(variant_code(cfg.loss_variant)),
            ),
            ("cfg.seed.lo", f32::from_bits(cfg.seed as u32)),
            ("cfg.seed.hi", f32::from_bits((cfg.seed >> 32) as u32)),
            ("cfg.disc_hidden", f32::from_bits(cfg.disc_hidden as u32)),
            ("cfg.noise_seed.lo", f32::from_bits(cfg.noise_seed as u32)),
            (
                "cfg.noise_seed.hi",
                f32::from_bits((cfg.noise_seed >> 32) as u32),
            ),
            ("cfg.d_model", f32::from_bits(self.discriminator.d_model as u32)),
        ];
        for (name, v) in scalars {
            set.push(name, Tensor::from_vec(&[1], vec![v])?);
        }
        write_params(path, CGUL_MAGIC, &set)
    }

    pub fn load(path: &Path) -> Result<CagulModules> {
        let entries = read_params(path, CGUL_MAGIC)?;
        let mut disc_set = ParamSet::new();
        let mut enc_set = ParamSet::new();
        let mut scalars = std::collections::BTreeMap::new();
        for (name, t) in entries {
            if name.starts_with("disc.") {
                disc_set.push(&name, t.with_grad());
            } else if name.starts_with("enc.") {
                enc_set.push(&name, t.with_grad());
            } else if let Some(key) = name.strip_prefix("cfg.") {
                scalars.insert(key.to_string(), t.data()[0]);
            } else {
                return Err(CoreError::config(format!(
                    "unexpected checkpoint entry {name}"
                )));
            }
        }
        let get = |k: &str| -> Result<f32> {
            scalars
                .get(k)
                .copied()
                .ok_or_else(|| CoreError::config(format!("missing cfg.{k} in checkpoint")))
        };
        let bits = |v: f32| v.to_bits();
        let d_model = bits(get("d_model")?) as usize;
        let hidden = bits(get("disc_hidden")?) as usize;
        let config = CagulConfig {
            k: bits(get("k")?) as usize,
            threshold: get("threshold")?,
            epochs_discriminator: bits(get("epochs_disc")?) as usize,
            epochs_joint: bits(get("epochs_joint")?) as usize,
            lr: get("lr")?,
            batch_size: bits(get("batch")?) as usize,
            ablation: ablation_from_code(bits(get("ablation")?))?,
            loss_variant: variant_from_code(bits(get("loss_variant")?))?,
            seed: (bits(get("seed.hi")?) as u64) << 32 | bits(get("seed.lo")?) as u64,
            disc_hidden: hidden,
            noise_seed: (bits(get("noise_seed.hi")?) as u64) << 32
                | bits(get("noise_seed.lo")?) as u64,
        };
        Ok(CagulModules {
            discriminator: Discriminator {
                set: disc_set,
                d_model,
                hidden,
            },
            encoder: TokenEncoder {
                set: enc_set,
                d_model,
            },
            config,
        })
    }
}

fn ablation_code(a: Ablation) -> u32 {
    match a {
        Ablation::None => 0,
        Ablation::NoDiscriminator => 1,
        Ablation::NoEncoderRandomNoise => 2,
        Ablation::RandomTokenSelection => 3,
    }
}

fn ablation_from_code(c: u32) -> Result<Ablation> {
    Ok(match c {
        0 => Ablation::None,
        1 => Ablation::NoDiscriminator,
        2 => Ablation::NoEncoderRandomNoise,
        3 => Ablation::RandomTokenSelection,
        other => return Err(CoreError::config(format!("bad ablation code {other}"))),
    })
}

fn variant_code(v: LossVariant) -> u32 {
    match v {
        LossVariant::PoGd => 0,
        LossVariant::GaGd => 1,
        LossVariant::GaKl => 2,
    }
}

fn variant_from_code(c: u32) -> Result<LossVariant> {
    Ok(match c {
        0 => LossVariant::PoGd,
        1 => LossVariant::GaGd,
        2 => LossVariant::GaKl,
        other => return Err(CoreError::config(format!("bad loss-variant code {other}"))),
    })
}

/// The CAGUL-wrapped model: routes through the modules at inference time.
pub struct CagulModel<'a> {
    pub base: &'a VLMParams,
    pub modules: &'a CagulModules,
}

impl<'a> CagulModel<'a> {
    /// The visual tokens the frozen language model will actually consume:
    /// untouched for `l = 0`, selectively rewritten for `l = 1`.
    pub fn effective_zv(&self, zv: &Tensor, question: &[u32]) -> Result<Tensor> {
        let routed = match self.modules.config.ablation {
            Ablation::NoDiscriminator => true,
            _ => {
                self.modules
                    .discriminator
                    .discriminate(zv, self.modules.config.threshold)?
                    .1
            }
        };
        if !routed {
            return Ok(zv.clone());
        }
        let k = self.modules.config.k;
        let indices = match self.modules.config.ablation {
            Ablation::RandomTokenSelection => {
                let mut rng = self.modules.noise_rng(zv);
                rng.choose_distinct(zv.shape()[0], k)
            }
            _ => probe_selection(self.base, zv, question, k)?.indices,
        };
        if self.modules.config.ablation == Ablation::NoEncoderRandomNoise {
            let mut noisy = zv.clone();
            let d = zv.shape()[1];
            let mut rng = self.modules.noise_rng(zv);
            for &i in &indices {
                for c in 0..d {
                    noisy.data_mut()[i * d + c] += rng.uniform(-1.0, 1.0);
                }
            }
            return Ok(noisy);
        }
        self.modules.encoder.transform(zv, &indices)
    }

    pub fn forward(
        &self,
        zv: &Tensor,
        question: &[u32],
        answer_prefix: &[u32],
        record_attention: bool,
    ) -> Result<ForwardOutput> {
        let z = self.effective_zv(zv, question)?;
        self.base.forward(&z, question, answer_prefix, record_attention)
    }

    pub fn generate(&self, zv: &Tensor, question: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let z = self.effective_zv(zv, question)?;
        self.base.generate(&z, question, max_new)
    }

    pub fn answer_log_probs(
        &self,
        zv: &Tensor,
        question: &[u32],
        answer: &[u32],
    ) -> Result<Vec<f32>> {
        let z = self.effective_zv(zv, question)?;
        self.base.answer_log_probs(&z, question, answer)
    }
}

/// QA-model view of the wrapped model for the metrics layer.
pub struct CagulQa<'a> {
    pub base: &'a VLMParams,
    pub modules: &'a CagulModules,
    pub tok: &'a Tokenizer,
}

impl QaModel for CagulQa<'_> {
    fn generate_answer(&self, image: &Image, question: &str) -> Result<String> {
        let zv = self.base.encode_image(image)?;
        let q = self.tok.encode(question)?;
        let model = CagulModel {
            base: self.base,
            modules: self.modules,
        };
        let ids = model.generate(&zv, &q, crate::vlm::MAX_ANSWER_TOKENS)?;
        Ok(self.tok.decode(&ids))
    }

    fn answer_log_probs(&self, image: &Image, question: &str, answer: &str) -> Result<Vec<f32>> {
        let zv = self.base.encode_image(image)?;
        let q = self.tok.encode(question)?;
        let a = self.tok.encode(answer)?;
        let model = CagulModel {
            base: self.base,
            modules: self.modules,
        };
        model.answer_log_probs(&zv, &q, &a)
    }
}
