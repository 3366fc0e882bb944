use cagul_core::cagul::*;
use cagul_core::dataset::{generate, split, MtildeSpec};
use cagul_core::metrics::record_exact_match;
use cagul_core::tensor::Tensor;
use cagul_core::vlm::*;
use std::collections::BTreeMap;

struct Ctx {
    ds: cagul_core::dataset::Dataset,
    spec: cagul_core::dataset::SplitSpec,
    tok: Tokenizer,
    base: VLMParams,
    zv: BTreeMap<u32, Tensor>,
}

fn setup() -> Ctx {
    let ds = generate(20, 8, 2, 77).unwrap();
    let spec = split(&ds, MtildeSpec::Count(4), 3).unwrap();
    let tok = Tokenizer::from_vocab(&ds.vocab).unwrap();
    let cfg = VLMConfig::with_vocab(tok.vocab_size());
    let mut base = init_vlm(&cfg, 13).unwrap();
    let all: Vec<usize> = (0..ds.records.len()).collect();
    let examples = prepare_examples(&ds, &all, &tok, &base).unwrap();
    let hp = TrainHParams { lr: 2e-3, batch_size: 8, epochs: 100, seed: 5 };
    finetune(&mut base, &examples, &hp).unwrap();
    base.freeze_all();
    let mut zv = BTreeMap::new();
    for (&id, img) in &ds.images { zv.insert(id, base.encode_image(img).unwrap()); }
    Ctx { ds, spec, tok, base, zv }
}

fn em_under<'a>(ctx: &Ctx, modules: &CagulModules, idx: &[usize]) -> f32 {
    let model = CagulModel { base: &ctx.base, modules };
    let mut total = 0.0f32;
    for &i in idx {
        let rec = &ctx.ds.records[i];
        let q = ctx.tok.encode(&rec.question).unwrap();
        let out = model.generate(&ctx.zv[&rec.id], &q, MAX_ANSWER_TOKENS).unwrap();
        total += record_exact_match(&ctx.tok.decode(&out), &rec.answer).unwrap();
    }
    total / idx.len() as f32
}

#[test]
#[ignore]
fn cagul_defaults() {
    let ctx = setup();
    for (k, lr, ej) in [(4usize, 7e-3f32, 160usize), (4, 1e-2, 160), (6, 7e-3, 160), (6, 1e-2, 160), (8, 7e-3, 160), (4, 7e-3, 320), (6, 7e-3, 320), (2, 7e-3, 320)] {
        let mut c = CagulConfig::for_model(ctx.base.config.n_visual_tokens);
        c.seed = 9; c.k = k; c.lr = lr; c.epochs_joint = ej;
        let t0 = std::time::Instant::now();
        match train_cagul(&ctx.base, &ctx.tok, &ctx.ds, &ctx.spec, c) {
            Ok((modules, log)) => {
                let f_em = em_under(&ctx, &modules, &ctx.spec.forget);
                let np_em = em_under(&ctx, &modules, &ctx.spec.nonprivate);
                let r_idx: Vec<usize> = ctx.spec.retain.iter().copied().take(40).collect();
                let r_em = em_under(&ctx, &modules, &r_idx);
                // sample a forget generation
                let rec = &ctx.ds.records[ctx.spec.forget[0]];
                let model = CagulModel { base: &ctx.base, modules: &modules };
                let q = ctx.tok.encode(&rec.question).unwrap();
                let out = model.generate(&ctx.zv[&rec.id], &q, MAX_ANSWER_TOKENS).unwrap();
                println!(
                    "k={k} lr={lr} ej={ej}: forget-EM {f_em:.3} np-EM {np_em:.3} retain-EM {r_em:.3} disc-acc {:.2} loss-> {:.3} ({:.0}s) sample: {:?}",
                    log.disc_train_accuracy,
                    log.joint_epoch_losses.last().unwrap_or(&f32::NAN),
                    t0.elapsed().as_secs_f64(),
                    ctx.tok.decode(&out),
                );
            }
            Err(e) => println!("k={k} lr={lr} ej={ej}: {e}"),
        }
    }
}
