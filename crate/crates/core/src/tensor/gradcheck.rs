//! Finite-difference verification of reverse-mode gradients.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// A differentiable scalar program: given current parameter values, build a
/// tape and return the scalar loss node plus the leaf ids of the parameters
/// (aligned with the `params` slice).
pub type ScalarProgram<'a> = dyn FnMut(&mut Tape, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)> + 'a;

/// Compare analytic gradients against central finite differences.
///
/// Returns the max over sampled coordinates of
/// `|analytic - central_difference| / (|central_difference| + 1e-8)`.
///
/// Up to `max_coords` coordinates are checked per parameter (all coordinates
/// when the parameter is small enough). The program must be deterministic;
/// two evaluations at the same point that disagree are a contract error.
pub fn grad_check(
    f: &mut ScalarProgram,
    params: &[Tensor],
    eps: f32,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f32> {
    if eps <= 0.0 {
        return Err(CoreError::contract(format!(
            "grad_check: eps must be > 0, got {eps}"
        )));
    }

    let eval = |f: &mut ScalarProgram, params: &[Tensor]| -> Result<(f32, Tape, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let (loss, ids) = f(&mut tape, params)?;
        if tape.shape(loss) != [1] {
            return Err(CoreError::contract(
                "grad_check: program must be scalar-valued",
            ));
        }
        let v = tape.value(loss)[0];
        tape.backward(loss)?;
        Ok((v, tape, ids))
    };

    let (loss0, tape, ids) = eval(f, params)?;
    let (loss1, _, _) = eval(f, params)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(CoreError::contract(
            "grad_check: program is non-deterministic (two evaluations differ)",
        ));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f32;

    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rng.choose_distinct(n, max_coords)
        };
        for ci in coords {
            let orig = p.data()[ci];

            work[pi].data_mut()[ci] = orig + eps;
            let mut t_plus = Tape::new();
            let (l_plus, _) = f(&mut t_plus, &work)?;
            let f_plus = t_plus.value(l_plus)[0];

            work[pi].data_mut()[ci] = orig - eps;
            let mut t_minus = Tape::new();
            let (l_minus, _) = f(&mut t_minus, &work)?;
            let f_minus = t_minus.value(l_minus)[0];

            work[pi].data_mut()[ci] = orig;

            let fd = (f_plus as f64 - f_minus as f64) / (2.0 * eps as f64);
            let analytic = tape.grad(ids[pi]).map(|g| g[ci]).unwrap_or(0.0) as f64;
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
            if rel as f32 > max_rel {
                max_rel = rel as f32;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_finite_difference() {
        // fn = x^2 at x=3, eps=1e-3 -> error < 1e-4
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap().with_grad();
        let mut prog = |tape: &mut Tape, ps: &[Tensor]| {
            let xid = tape.leaf(&ps[0])?;
            let sq = tape.mul(xid, xid)?;
            let loss = tape.mean_all(sq)?;
            Ok((loss, vec![xid]))
        };
        let mut rng = Rng::new(0);
        let err = grad_check(&mut prog, &[x], 1e-3, 8, &mut rng).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn constant_program_has_zero_error() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut prog = |tape: &mut Tape, ps: &[Tensor]| {
            let xid = tape.leaf(&ps[0])?;
            let c = tape.scalar(5.0)?;
            Ok((c, vec![xid]))
        };
        let mut rng = Rng::new(0);
        let err = grad_check(&mut prog, &[x], 1e-3, 8, &mut rng).unwrap();
        assert_eq!(err, 0.0);
    }
}
