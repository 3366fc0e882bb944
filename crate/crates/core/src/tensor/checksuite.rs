//! Randomized programs for the gradient verification suite.
//!
//! One small program per kernel plus a multi-layer composition. A 32-bit
//! central difference cannot resolve gradients near zero (loss rounding
//! leaves an absolute noise floor around ulp(loss)/2eps), so each draw is
//! rejected until every checked gradient coordinate is comfortably above
//! that floor. Rejection only filters test points; the accepted points are
//! compared against the finite-difference oracle unweakened.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

pub type CheckProgram = Box<dyn FnMut(&mut Tape, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>>;

pub struct KernelCheck {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub program: CheckProgram,
}

impl KernelCheck {
    /// Smallest |gradient| over all coordinates of all checked parameters.
    /// Coordinates with exactly zero gradient are skipped: a structural zero
    /// (e.g. behind a mask) is checked as 0-vs-0 by the finite difference and
    /// needs no resolution headroom.
    pub fn min_abs_grad(&mut self) -> f32 {
        let mut tape = Tape::new();
        let (loss, ids) = (self.program)(&mut tape, &self.params).expect("check program builds");
        tape.backward(loss).expect("check program backward");
        let mut min = f32::INFINITY;
        for &id in &ids {
            if let Some(g) = tape.grad(id) {
                for &v in g {
                    if v != 0.0 {
                        min = min.min(v.abs());
                    }
                }
            }
        }
        min
    }
}

/// Redraw a randomized check until every checked gradient coordinate is at
/// least `floor` in magnitude.
pub fn conditioned(seed: u64, floor: f32, builder: impl Fn(u64) -> KernelCheck) -> KernelCheck {
    let mut name = "";
    for attempt in 0..256u64 {
        let sub = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(attempt.wrapping_mul(0x2545_F491_4F6C_DD1D));
        let mut check = builder(sub);
        if check.min_abs_grad() >= floor {
            return check;
        }
        name = check.name;
    }
    panic!("{name}: no draw with min gradient >= {floor} after 256 attempts (seed {seed})");
}

/// Magnitude in [lo, hi), random sign.
fn bounded(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    let mag = rng.uniform(lo, hi);
    if rng.next_f32() < 0.5 {
        -mag
    } else {
        mag
    }
}

fn bounded_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| bounded(rng, lo, hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn positive_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// loss = boost * mean(out .* pattern)
fn pattern_loss(tape: &mut Tape, out: NodeId, pattern: &[f32], boost: f32) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let pat = tape.constant(&shape, pattern.to_vec())?;
    let mixed = tape.mul(out, pat)?;
    let mean = tape.mean_all(mixed)?;
    tape.scale(mean, boost)
}

fn matmul_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let m = 2 + rng.below(2);
    let k = 2 + rng.below(2);
    let n = 2 + rng.below(2);
    let a = positive_tensor(&[m, k], 0.5, 1.2, &mut rng).with_grad();
    let b = positive_tensor(&[k, n], 0.5, 1.2, &mut rng).with_grad();
    let pat: Vec<f32> = (0..m * n).map(|_| rng.uniform(0.6, 1.4)).collect();
    KernelCheck {
        name: "matmul/transpose",
        params: vec![a, b],
        program: Box::new(move |tape, ps| {
            let aid = tape.leaf(&ps[0])?;
            let bid = tape.leaf(&ps[1])?;
            let mm = tape.matmul(aid, bid)?;
            let tr = tape.transpose(mm)?;
            let back = tape.transpose(tr)?;
            let loss = pattern_loss(tape, back, &pat, 3.0)?;
            Ok((loss, vec![aid, bid]))
        }),
    }
}

fn elementwise_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 3 + rng.below(3);
    let a = positive_tensor(&[2, n], 0.6, 1.2, &mut rng).with_grad();
    let b = bounded_tensor(&[2, n], 0.1, 0.25, &mut rng).with_grad();
    let pat: Vec<f32> = (0..2 * n).map(|_| rng.uniform(0.6, 1.4)).collect();
    let c = rng.uniform(0.8, 1.6);
    KernelCheck {
        name: "add/multiply/scale",
        params: vec![a, b],
        program: Box::new(move |tape, ps| {
            let aid = tape.leaf(&ps[0])?;
            let bid = tape.leaf(&ps[1])?;
            let sum = tape.add(aid, bid)?;
            let prod = tape.mul(sum, aid)?;
            let scaled = tape.scale(prod, c)?;
            let loss = pattern_loss(tape, scaled, &pat, 6.0)?;
            Ok((loss, vec![aid, bid]))
        }),
    }
}

fn add_row_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 3 + rng.below(3);
    let a = bounded_tensor(&[2, n], 0.3, 1.0, &mut rng).with_grad();
    let bias = bounded_tensor(&[n], 0.3, 1.0, &mut rng).with_grad();
    let pat: Vec<f32> = (0..2 * n).map(|_| rng.uniform(0.6, 1.4)).collect();
    KernelCheck {
        name: "add_row",
        params: vec![a, bias],
        program: Box::new(move |tape, ps| {
            let aid = tape.leaf(&ps[0])?;
            let bid = tape.leaf(&ps[1])?;
            let sum = tape.add_row(aid, bid)?;
            let loss = pattern_loss(tape, sum, &pat, 6.0)?;
            Ok((loss, vec![aid, bid]))
        }),
    }
}

fn softmax_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 4;
    let x = bounded_tensor(&[1, n], 0.0, 0.8, &mut rng).with_grad();
    // alternating far-apart pattern keeps |pat_j - E_p[pat]| bounded below
    let pat: Vec<f32> = (0..n).map(|j| if j % 2 == 0 { 2.5 } else { -2.5 }).collect();
    KernelCheck {
        name: "softmax",
        params: vec![x],
        program: Box::new(move |tape, ps| {
            let xid = tape.leaf(&ps[0])?;
            let sm = tape.softmax_rows(xid)?;
            let loss = pattern_loss(tape, sm, &pat, 8.0)?;
            Ok((loss, vec![xid]))
        }),
    }
}

fn layer_norm_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 4;
    // well-spread rows so normalized activations stay away from zero
    let mut xv = Vec::new();
    for _ in 0..2 {
        let mut row = vec![-1.5, -0.5, 0.5, 1.5];
        for v in row.iter_mut() {
            *v += rng.uniform(-0.15, 0.15);
        }
        rng.shuffle(&mut row);
        xv.extend(row);
    }
    let x = Tensor::from_vec(&[2, n], xv).unwrap().with_grad();
    let gain = positive_tensor(&[n], 0.8, 1.3, &mut rng).with_grad();
    let bias = bounded_tensor(&[n], 0.2, 0.8, &mut rng).with_grad();
    // mixed signs: LN input gradients are zero-sum per row, so a one-sided
    // pattern would pin them near zero
    let pat: Vec<f32> = (0..2 * n).map(|_| bounded(&mut rng, 0.6, 1.4)).collect();
    KernelCheck {
        name: "layer_norm",
        params: vec![x, gain, bias],
        program: Box::new(move |tape, ps| {
            let xid = tape.leaf(&ps[0])?;
            let gid = tape.leaf(&ps[1])?;
            let bid = tape.leaf(&ps[2])?;
            let ln = tape.layer_norm(xid, gid, bid)?;
            let loss = pattern_loss(tape, ln, &pat, 4.0)?;
            Ok((loss, vec![xid, gid, bid]))
        }),
    }
}

fn gather_concat_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 3 + rng.below(3);
    let table = bounded_tensor(&[4, n], 0.4, 1.0, &mut rng).with_grad();
    let other = bounded_tensor(&[2, n], 0.4, 1.0, &mut rng).with_grad();
    // cover every table row so each coordinate receives gradient
    let ids: Vec<usize> = vec![0, 1, 2, 3, rng.below(4)];
    let pat: Vec<f32> = (0..(ids.len() + 2) * n).map(|_| rng.uniform(0.6, 1.4)).collect();
    KernelCheck {
        name: "embedding/concat/reshape",
        params: vec![table, other],
        program: Box::new(move |tape, ps| {
            let tid = tape.leaf(&ps[0])?;
            let oid = tape.leaf(&ps[1])?;
            let rows = tape.gather_rows(tid, &ids)?;
            let cat = tape.concat_rows(rows, oid)?;
            let flat_len = tape.value(cat).len();
            let flat = tape.reshape(cat, &[1, flat_len])?;
            let loss = pattern_loss(tape, flat, &pat, 6.0)?;
            Ok((loss, vec![tid, oid]))
        }),
    }
}

fn masked_fill_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 4;
    let x = bounded_tensor(&[2, n], 0.0, 0.8, &mut rng).with_grad();
    let mut mask = vec![false; 2 * n];
    // mask one entry per row; the rest stay live through the softmax
    mask[1 + rng.below(n - 1)] = true;
    mask[n + 1 + rng.below(n - 1)] = true;
    let pat: Vec<f32> = (0..2 * n)
        .map(|j| if j % 2 == 0 { 2.5 } else { -2.5 })
        .collect();
    KernelCheck {
        name: "masked_fill/mean",
        params: vec![x],
        program: Box::new(move |tape, ps| {
            let xid = tape.leaf(&ps[0])?;
            let filled = tape.masked_fill(xid, &mask, -30.0)?;
            let sm = tape.softmax_rows(filled)?;
            let loss = pattern_loss(tape, sm, &pat, 8.0)?;
            Ok((loss, vec![xid]))
        }),
    }
}

fn cross_entropy_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let v = 4;
    let logits = bounded_tensor(&[2, v], 0.0, 0.8, &mut rng).with_grad();
    let targets: Vec<usize> = (0..2).map(|_| rng.below(v)).collect();
    KernelCheck {
        name: "cross_entropy",
        params: vec![logits],
        program: Box::new(move |tape, ps| {
            let lid = tape.leaf(&ps[0])?;
            let ce = tape.cross_entropy_rows(lid, &targets)?;
            let mean = tape.mean_all(ce)?;
            let loss = tape.scale(mean, 2.0)?; // undo the row mean
            Ok((loss, vec![lid]))
        }),
    }
}

fn sigmoid_bce_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 4;
    let x = bounded_tensor(&[1, n], 0.2, 1.2, &mut rng).with_grad();
    let targets: Vec<f32> = (0..n).map(|_| (rng.next_f32() < 0.5) as u8 as f32).collect();
    KernelCheck {
        name: "sigmoid/bce",
        params: vec![x],
        program: Box::new(move |tape, ps| {
            let xid = tape.leaf(&ps[0])?;
            let p = tape.sigmoid(xid)?;
            let b = tape.bce(p, &targets)?;
            let loss = tape.mean_all(b)?;
            Ok((loss, vec![xid]))
        }),
    }
}

fn kl_check(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let v = 4;
    let logits = bounded_tensor(&[1, v], 0.0, 0.8, &mut rng).with_grad();
    let ref_lp: Vec<f32> = {
        let raw: Vec<f32> = (0..v).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mx = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = mx + raw.iter().map(|x| (x - mx).exp()).sum::<f32>().ln();
        raw.iter().map(|x| x - lse).collect()
    };
    KernelCheck {
        name: "kl_divergence",
        params: vec![logits],
        program: Box::new(move |tape, ps| {
            let lid = tape.leaf(&ps[0])?;
            let kl = tape.kl_rows(lid, &ref_lp)?;
            let loss = tape.mean_all(kl)?;
            let loss = tape.scale(loss, 8.0)?;
            Ok((loss, vec![lid]))
        }),
    }
}

/// One conditioned check program per kernel in the set.
pub fn kernel_checks(seed: u64) -> Vec<KernelCheck> {
    let floor = 0.1;
    vec![
        conditioned(seed, floor, matmul_check),
        conditioned(seed, floor, elementwise_check),
        conditioned(seed, floor, add_row_check),
        conditioned(seed, floor, softmax_check),
        conditioned(seed, floor, layer_norm_check),
        conditioned(seed, floor, gather_concat_check),
        conditioned(seed, floor, masked_fill_check),
        conditioned(seed, floor, cross_entropy_check),
        conditioned(seed, floor, sigmoid_bce_check),
        conditioned(seed, 0.3, kl_check),
    ]
}

fn composition_draw(seed: u64) -> KernelCheck {
    let mut rng = Rng::new(seed);
    let n = 4;
    // positive chain: no cancellation, gradients bounded below
    let w1 = positive_tensor(&[n, n], 0.25, 0.45, &mut rng).with_grad();
    let w2 = positive_tensor(&[n, n], 0.25, 0.45, &mut rng).with_grad();
    let w3 = positive_tensor(&[n, n], 0.25, 0.45, &mut rng).with_grad();
    let x0: Vec<f32> = (0..2 * n).map(|_| rng.uniform(0.5, 1.0)).collect();
    let pat: Vec<f32> = (0..2 * n).map(|_| rng.uniform(0.6, 1.4)).collect();

    KernelCheck {
        name: "three_layer_composition",
        params: vec![w1, w2, w3],
        program: Box::new(move |tape, ps| {
            let w1 = tape.leaf(&ps[0])?;
            let w2 = tape.leaf(&ps[1])?;
            let w3 = tape.leaf(&ps[2])?;
            let x = tape.constant(&[2, n], x0.clone())?;
            let h1 = tape.matmul(x, w1)?;
            let s1 = tape.sigmoid(h1)?;
            let g1 = tape.mul(s1, h1)?; // silu
            let h2 = tape.matmul(g1, w2)?;
            let s2 = tape.sigmoid(h2)?;
            let g2 = tape.mul(s2, h2)?;
            let h3 = tape.matmul(g2, w3)?;
            let loss = pattern_loss(tape, h3, &pat, 2.0)?;
            Ok((loss, vec![w1, w2, w3]))
        }),
    }
}

/// Three stacked matmul+silu layers: the randomized deep-composition oracle
/// for `backward` at eps 1e-3.
pub fn composition_check(seed: u64) -> KernelCheck {
    conditioned(seed, 0.08, composition_draw)
}
