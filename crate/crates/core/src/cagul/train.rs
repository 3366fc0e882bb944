//! CAGUL losses and the two-stage training schedule.
//!
//! Stage 1 trains the discriminator alone on image-level membership labels.
//! Stage 2 jointly optimizes `L = L_bce + L_f + L_r` with the backbone
//! frozen: the forget term drives routed private queries toward the refusal
//! response, the retain term holds ground-truth answers in place (including
//! the non-private queries whose images route through the encoder).

use std::collections::BTreeMap;
use std::time::Instant;

use crate::baselines::{early_stop, EpochStats};
use crate::cagul::{
    disc_prob_graph, transform_graph, Ablation, CagulConfig, CagulModel, CagulModules,
    LossVariant, REFUSAL,
};
use crate::dataset::{Dataset, SplitSpec};
use crate::error::{CoreError, Result};
use crate::metrics::record_exact_match;
use crate::probe::probe_selection;
use crate::rng::Rng;
use crate::tensor::{adam_step, AdamState, BoundParams, NodeId, Tape, Tensor};
use crate::vlm::forward::Graph;
use crate::vlm::{Tokenizer, VLMParams, MAX_ANSWER_TOKENS};

/// One record prepared for module training.
#[derive(Debug, Clone)]
pub struct CagulExample {
    pub record_idx: usize,
    pub individual: u32,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub answer_text: String,
    pub is_forget: bool,
    /// Image-level label: 1 iff the individual requested removal.
    pub label: f32,
    /// Cached token selection (bottom-k of the probe pass, or random under
    /// the selection ablation).
    pub selection: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct CagulTrainLog {
    pub disc_epoch_losses: Vec<f32>,
    pub disc_train_accuracy: f32,
    pub joint_epoch_losses: Vec<f32>,
    pub joint_epoch_seconds: Vec<f64>,
    pub stopped_early_at: Option<usize>,
    pub wall_clock_seconds: f64,
}

impl CagulTrainLog {
    pub fn seconds_per_epoch(&self) -> f64 {
        if self.joint_epoch_seconds.is_empty() {
            0.0
        } else {
            self.joint_epoch_seconds.iter().sum::<f64>() / self.joint_epoch_seconds.len() as f64
        }
    }
}

/// Per-example additive noise for the noise ablation: U(-1,1) on the
/// selected rows, zero elsewhere.
fn noise_field(modules: &CagulModules, zv: &Tensor, selection: &[usize]) -> Vec<f32> {
    let (n_v, d) = (zv.shape()[0], zv.shape()[1]);
    let mut field = vec![0.0f32; n_v * d];
    let mut rng = modules.noise_rng(zv);
    for &i in selection {
        for c in 0..d {
            field[i * d + c] = rng.uniform(-1.0, 1.0);
        }
    }
    field
}

struct JointTerms {
    bce: Vec<NodeId>,
    forget: Vec<NodeId>,
    retain: Vec<NodeId>,
}

/// Everything a joint-loss build needs, bound to one tape.
struct JointCtx<'a> {
    base: &'a VLMParams,
    base_bound: BoundParams,
    modules: &'a CagulModules,
    disc_bound: BoundParams,
    enc_bound: BoundParams,
    refusal: &'a [u32],
}

impl<'a> JointCtx<'a> {
    fn bind(
        tape: &mut Tape,
        base: &'a VLMParams,
        modules: &'a CagulModules,
        refusal: &'a [u32],
    ) -> Result<Self> {
        Ok(JointCtx {
            base,
            base_bound: base.set.bind(tape)?,
            modules,
            disc_bound: modules.discriminator.set.bind(tape)?,
            enc_bound: modules.encoder.set.bind(tape)?,
            refusal,
        })
    }

    /// Add one example's contributions to the running term lists.
    fn push_example(
        &self,
        tape: &mut Tape,
        ex: &CagulExample,
        zv: &Tensor,
        kl_reference: Option<&[f32]>,
        terms: &mut JointTerms,
    ) -> Result<()> {
        let cfg = &self.modules.config;
        let zv_id = tape.leaf(zv)?;

        // classification term and routing decision
        let routed = match cfg.ablation {
            Ablation::NoDiscriminator => true,
            _ => {
                let prob = disc_prob_graph(
                    tape,
                    &self.modules.discriminator.set,
                    &self.disc_bound,
                    self.modules.discriminator.d_model,
                    zv_id,
                )?;
                let bce = tape.bce(prob, &[ex.label])?;
                let bce = tape.mean_all(bce)?;
                terms.bce.push(bce);
                tape.value(prob)[0] >= cfg.threshold
            }
        };

        // effective visual tokens
        let z_eff = if !routed {
            zv_id
        } else if cfg.ablation == Ablation::NoEncoderRandomNoise {
            let field = noise_field(self.modules, zv, &ex.selection);
            let noise = tape.constant(&[zv.shape()[0], zv.shape()[1]], field)?;
            tape.add(zv_id, noise)?
        } else {
            transform_graph(
                tape,
                &self.modules.encoder.set,
                &self.enc_bound,
                zv_id,
                &ex.selection,
            )?
        };

        // language-model term
        let mut g = Graph::new(tape, &self.base.set, &self.base_bound, &self.base.config);
        if ex.is_forget {
            let term = match cfg.loss_variant {
                LossVariant::PoGd => g.build_answer_nll(z_eff, &ex.question, self.refusal)?,
                // gradient-ascent variants maximize the true answer's NLL
                LossVariant::GaGd | LossVariant::GaKl => {
                    let nll = g.build_answer_nll(z_eff, &ex.question, &ex.answer)?;
                    g.tape.scale(nll, -1.0)?
                }
            };
            terms.forget.push(term);
        } else {
            let term = match cfg.loss_variant {
                LossVariant::GaKl => {
                    let reference = kl_reference.ok_or_else(|| {
                        CoreError::contract("ga_kl requires base reference log-probs")
                    })?;
                    let rows = g.build_answer_logit_rows(z_eff, &ex.question, &ex.answer)?;
                    let kl = g.tape.kl_rows(rows, reference)?;
                    g.tape.mean_all(kl)?
                }
                _ => g.build_answer_nll(z_eff, &ex.question, &ex.answer)?,
            };
            terms.retain.push(term);
        }
        Ok(())
    }
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<Option<NodeId>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(Some(tape.scale(total, 1.0 / terms.len() as f32)?))
}

/// `L = L_bce + L_f + L_r`, unweighted; groups without members are omitted.
fn combine(tape: &mut Tape, terms: JointTerms) -> Result<NodeId> {
    let mut parts = Vec::new();
    for group in [terms.bce, terms.forget, terms.retain] {
        if let Some(m) = mean_of(tape, &group)? {
            parts.push(m);
        }
    }
    if parts.is_empty() {
        return Err(CoreError::contract("joint loss over an empty batch"));
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = tape.add(loss, p)?;
    }
    Ok(loss)
}

/// Build the full joint loss for a batch on one tape. Exposed for the
/// gradient-check suite. Returns the loss node plus the encoder /
/// discriminator leaf bindings.
pub(crate) fn build_joint_loss(
    tape: &mut Tape,
    base: &VLMParams,
    modules: &CagulModules,
    refusal: &[u32],
    batch: &[(&CagulExample, &Tensor)],
    kl_refs: &BTreeMap<usize, Vec<f32>>,
) -> Result<(NodeId, BoundParams, BoundParams)> {
    let ctx = JointCtx::bind(tape, base, modules, refusal)?;
    let mut terms = JointTerms {
        bce: Vec::new(),
        forget: Vec::new(),
        retain: Vec::new(),
    };
    for (ex, zv) in batch {
        let kl = kl_refs.get(&ex.record_idx).map(|v| v.as_slice());
        ctx.push_example(tape, ex, zv, kl, &mut terms)?;
    }
    let loss = combine(tape, terms)?;
    Ok((loss, ctx.disc_bound, ctx.enc_bound))
}

// ── Public loss operations ───────────────────────────────────────────

/// Mean binary cross-entropy of the discriminator over (zv, label) pairs.
pub fn loss_bce(modules: &CagulModules, batch: &[(&Tensor, f32)]) -> Result<f32> {
    if batch.is_empty() {
        return Err(CoreError::contract("loss_bce: empty batch"));
    }
    let mut tape = Tape::new();
    let bound = modules.discriminator.set.bind(&mut tape)?;
    let mut terms = Vec::new();
    for (zv, label) in batch {
        let zv_id = tape.leaf(zv)?;
        let prob = disc_prob_graph(
            &mut tape,
            &modules.discriminator.set,
            &bound,
            modules.discriminator.d_model,
            zv_id,
        )?;
        let bce = tape.bce(prob, &[*label])?;
        terms.push(tape.mean_all(bce)?);
    }
    let mean = mean_of(&mut tape, &terms)?.expect("non-empty batch");
    Ok(tape.value(mean)[0])
}

fn eval_loss(
    base: &VLMParams,
    modules: &CagulModules,
    examples: &[&CagulExample],
    zv_cache: &BTreeMap<u32, Tensor>,
    refusal: &[u32],
    keep: fn(&JointTerms) -> &Vec<NodeId>,
) -> Result<f32> {
    if examples.is_empty() {
        return Err(CoreError::contract("loss over an empty batch"));
    }
    let mut tape = Tape::new();
    let ctx = JointCtx::bind(&mut tape, base, modules, refusal)?;
    let mut terms = JointTerms {
        bce: Vec::new(),
        forget: Vec::new(),
        retain: Vec::new(),
    };
    for ex in examples {
        let zv = zv_cache
            .get(&ex.individual)
            .ok_or_else(|| CoreError::MissingImage { id: ex.individual })?;
        ctx.push_example(&mut tape, ex, zv, None, &mut terms)?;
    }
    let target = keep(&terms).clone();
    let mean = mean_of(&mut tape, &target)?
        .ok_or_else(|| CoreError::contract("no terms of the requested kind in the batch"))?;
    Ok(tape.value(mean)[0])
}

/// Mean token-normalized NLL of the true answers under the wrapped model.
pub fn loss_retain(
    base: &VLMParams,
    modules: &CagulModules,
    examples: &[&CagulExample],
    zv_cache: &BTreeMap<u32, Tensor>,
) -> Result<f32> {
    eval_loss(base, modules, examples, zv_cache, &[], |t| &t.retain)
}

/// Mean causal LM loss with the refusal response substituted for the answer.
pub fn loss_forget_po(
    base: &VLMParams,
    modules: &CagulModules,
    examples: &[&CagulExample],
    zv_cache: &BTreeMap<u32, Tensor>,
    refusal: &[u32],
) -> Result<f32> {
    eval_loss(base, modules, examples, zv_cache, refusal, |t| &t.forget)
}

/// The joint objective value `L_bce + L_f + L_r` over a mixed batch.
pub fn loss_joint(
    base: &VLMParams,
    modules: &CagulModules,
    examples: &[&CagulExample],
    zv_cache: &BTreeMap<u32, Tensor>,
    refusal: &[u32],
) -> Result<f32> {
    if examples.is_empty() {
        return Err(CoreError::contract("loss_joint: empty batch"));
    }
    let mut tape = Tape::new();
    let batch: Vec<(&CagulExample, &Tensor)> = examples
        .iter()
        .map(|ex| {
            zv_cache
                .get(&ex.individual)
                .map(|zv| (*ex, zv))
                .ok_or(CoreError::MissingImage { id: ex.individual })
        })
        .collect::<Result<_>>()?;
    let (loss, _, _) = build_joint_loss(&mut tape, base, modules, refusal, &batch, &BTreeMap::new())?;
    Ok(tape.value(loss)[0])
}

// ── Training ─────────────────────────────────────────────────────────

/// Tokenize records and cache probe selections against the frozen base.
pub fn prepare_cagul_examples(
    base: &VLMParams,
    tok: &Tokenizer,
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &CagulConfig,
    zv_cache: &BTreeMap<u32, Tensor>,
) -> Result<Vec<CagulExample>> {
    let mut rng = Rng::new(cfg.seed ^ 0x5E1E_C710);
    let mut examples = Vec::with_capacity(ds.records.len());
    let forget_set: std::collections::BTreeSet<usize> = split.forget.iter().copied().collect();
    for (idx, rec) in ds.records.iter().enumerate() {
        let question = tok.encode(&rec.question)?;
        let zv = zv_cache
            .get(&rec.id)
            .ok_or(CoreError::MissingImage { id: rec.id })?;
        let selection = if cfg.ablation == Ablation::RandomTokenSelection {
            rng.choose_distinct(zv.shape()[0], cfg.k)
        } else {
            probe_selection(base, zv, &question, cfg.k)?.indices
        };
        examples.push(CagulExample {
            record_idx: idx,
            individual: rec.id,
            question,
            answer: tok.encode(&rec.answer)?,
            answer_text: rec.answer.clone(),
            is_forget: forget_set.contains(&idx),
            label: split.requested.binary_search(&rec.id).is_ok() as u8 as f32,
            selection,
        });
    }
    Ok(examples)
}

fn disc_train_accuracy(
    modules: &CagulModules,
    zv_cache: &BTreeMap<u32, Tensor>,
    split: &SplitSpec,
) -> Result<f32> {
    let mut hits = 0usize;
    for (id, zv) in zv_cache {
        let want = split.requested.binary_search(id).is_ok();
        let (_, got) = modules
            .discriminator
            .discriminate(zv, modules.config.threshold)?;
        hits += (want == got) as usize;
    }
    Ok(hits as f32 / zv_cache.len() as f32)
}

/// Mean forget-set exact match and retain NLL under the current modules,
/// for the GA-variant early-stop rule.
fn variant_epoch_stats(
    base: &VLMParams,
    modules: &CagulModules,
    tok: &Tokenizer,
    examples: &[CagulExample],
    zv_cache: &BTreeMap<u32, Tensor>,
) -> Result<EpochStats> {
    let model = CagulModel { base, modules };
    let mut em_total = 0.0f32;
    let mut em_count = 0usize;
    let mut nll_total = 0.0f64;
    let mut nll_count = 0usize;
    for ex in examples {
        let zv = &zv_cache[&ex.individual];
        if ex.is_forget {
            let ids = model.generate(zv, &ex.question, MAX_ANSWER_TOKENS)?;
            em_total += record_exact_match(&tok.decode(&ids), &ex.answer_text)?;
            em_count += 1;
        } else {
            let lp = model.answer_log_probs(zv, &ex.question, &ex.answer)?;
            nll_total -= (lp.iter().sum::<f32>() / lp.len() as f32) as f64;
            nll_count += 1;
        }
    }
    Ok(EpochStats {
        retain_nll: (nll_total / nll_count.max(1) as f64) as f32,
        forget_em: em_total / em_count.max(1) as f32,
    })
}

/// Two-stage CAGUL training against a frozen backbone. The base model is
/// taken by shared reference and is never mutated.
pub fn train_cagul(
    base: &VLMParams,
    tok: &Tokenizer,
    ds: &Dataset,
    split: &SplitSpec,
    cfg: CagulConfig,
) -> Result<(CagulModules, CagulTrainLog)> {
    cfg.validate(base.config.n_visual_tokens)?;
    for f in &split.forget {
        if split.retain.contains(f) {
            return Err(CoreError::contract("forget and retain splits overlap"));
        }
    }
    let started = Instant::now();
    let refusal = tok.encode(REFUSAL)?;
    let mut modules = CagulModules::init(base.config.d_model, cfg, base.config.n_visual_tokens)?;
    let cfg = modules.config.clone();
    let mut log = CagulTrainLog::default();
    let mut rng = Rng::new(cfg.seed);

    // frozen-backbone caches
    let mut zv_cache: BTreeMap<u32, Tensor> = BTreeMap::new();
    for (&id, img) in &ds.images {
        zv_cache.insert(id, base.encode_image(img)?);
    }
    let examples = prepare_cagul_examples(base, tok, ds, split, &cfg, &zv_cache)?;

    // base reference log-probs for the KL variant's retain term
    let mut kl_refs: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    if cfg.loss_variant == LossVariant::GaKl {
        for ex in examples.iter().filter(|e| !e.is_forget) {
            let zv = &zv_cache[&ex.individual];
            let rows_t = {
                let mut tape = Tape::new();
                let bound = base.set.bind(&mut tape)?;
                let mut g = Graph::new(&mut tape, &base.set, &bound, &base.config);
                let zv_id = g.tape.leaf(zv)?;
                let rows = g.build_answer_logit_rows(zv_id, &ex.question, &ex.answer)?;
                tape.value_tensor(rows)
            };
            let (t, v) = (rows_t.shape()[0], rows_t.shape()[1]);
            let mut lp = vec![0.0f32; t * v];
            for r in 0..t {
                let row = &rows_t.data()[r * v..(r + 1) * v];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f32>().ln();
                for c in 0..v {
                    lp[r * v + c] = row[c] - lse;
                }
            }
            kl_refs.insert(ex.record_idx, lp);
        }
    }

    // stage 1: discriminator alone on image-level labels
    if cfg.ablation != Ablation::NoDiscriminator {
        let mut adam = AdamState::new(&modules.discriminator.set);
        for _epoch in 0..cfg.epochs_discriminator {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let bound = modules.discriminator.set.bind(&mut tape)?;
                let mut terms = Vec::new();
                for &ei in chunk {
                    let ex = &examples[ei];
                    let zv_id = tape.leaf(&zv_cache[&ex.individual])?;
                    let prob = disc_prob_graph(
                        &mut tape,
                        &modules.discriminator.set,
                        &bound,
                        modules.discriminator.d_model,
                        zv_id,
                    )?;
                    let bce = tape.bce(prob, &[ex.label])?;
                    terms.push(tape.mean_all(bce)?);
                }
                let loss = mean_of(&mut tape, &terms)?.expect("non-empty batch");
                let v = tape.value(loss)[0];
                tape.backward(loss)?;
                modules.discriminator.set.pull_grads(&tape, &bound)?;
                adam_step(&mut modules.discriminator.set, &mut adam, cfg.lr)?;
                modules.discriminator.set.zero_grads();
                epoch_loss += v as f64;
                batches += 1;
            }
            log.disc_epoch_losses
                .push((epoch_loss / batches.max(1) as f64) as f32);
        }
        log.disc_train_accuracy = disc_train_accuracy(&modules, &zv_cache, split)?;
        if log.disc_train_accuracy < 0.9 {
            return Err(CoreError::training(
                "discriminator stage 1",
                format!(
                    "training-image accuracy {:.3} < 0.9; routing would be unreliable, \
                     so unlearning is undefined (raise epochs_discriminator or lr)",
                    log.disc_train_accuracy
                ),
            ));
        }
    }

    // stage 2: joint objective, backbone frozen
    let train_disc = matches!(
        cfg.ablation,
        Ablation::None | Ablation::RandomTokenSelection | Ablation::NoEncoderRandomNoise
    );
    let train_enc = cfg.ablation != Ablation::NoEncoderRandomNoise;
    let mut adam_disc = AdamState::new(&modules.discriminator.set);
    let mut adam_enc = AdamState::new(&modules.encoder.set);
    let start_stats = if cfg.loss_variant != LossVariant::PoGd {
        Some(variant_epoch_stats(base, &modules, tok, &examples, &zv_cache)?)
    } else {
        None
    };
    let mut history: Vec<EpochStats> = Vec::new();

    for epoch in 0..cfg.epochs_joint {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = format!("cagul joint epoch {epoch} batch {batch_no}");
            let mut tape = Tape::new();
            let batch: Vec<(&CagulExample, &Tensor)> = chunk
                .iter()
                .map(|&ei| (&examples[ei], &zv_cache[&examples[ei].individual]))
                .collect();
            let (loss, disc_bound, enc_bound) =
                build_joint_loss(&mut tape, base, &modules, &refusal, &batch, &kl_refs)?;
            let v = tape.value(loss)[0];
            if !v.is_finite() {
                return Err(CoreError::training(&step, "loss is not finite"));
            }
            tape.backward(loss)
                .map_err(|e| CoreError::training(&step, e.to_string()))?;
            if train_disc && cfg.ablation != Ablation::NoDiscriminator {
                modules.discriminator.set.pull_grads(&tape, &disc_bound)?;
                adam_step(&mut modules.discriminator.set, &mut adam_disc, cfg.lr)?;
                modules.discriminator.set.zero_grads();
            }
            if train_enc {
                modules.encoder.set.pull_grads(&tape, &enc_bound)?;
                adam_step(&mut modules.encoder.set, &mut adam_enc, cfg.lr)?;
                modules.encoder.set.zero_grads();
            }
            epoch_loss += v as f64;
            batches += 1;
        }
        log.joint_epoch_losses
            .push((epoch_loss / batches.max(1) as f64) as f32);
        log.joint_epoch_seconds
            .push(epoch_start.elapsed().as_secs_f64());

        if let Some(start) = start_stats {
            history.push(variant_epoch_stats(base, &modules, tok, &examples, &zv_cache)?);
            if early_stop(start.retain_nll, &history, 1.5, 0.05) {
                log.stopped_early_at = Some(epoch);
                break;
            }
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((modules, log))
}
