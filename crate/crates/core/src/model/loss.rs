//! Counting losses. The per-pixel loss sits behind a small trait so a
//! different supervision (e.g. an instance-attention style loss) can be
//! slotted in without touching the training loop.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub trait DensityLoss {
    fn name(&self) -> &'static str;
    /// Builds the scalar loss on the tape. `pred` is the flattened
    /// predicted density; `gt` must have the same number of pixels.
    fn build(&self, tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var>;
}

/// Mean squared pixel error plus a relative count term
/// |Σpred − Σgt| / (Σgt + 1).
pub struct MseCountLoss;

impl DensityLoss for MseCountLoss {
    fn name(&self) -> &'static str {
        "mse_count"
    }

    fn build(&self, tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
        let p = tape.value(pred).len();
        if p != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "density_loss",
                lhs: tape.shape(pred).to_vec(),
                rhs: gt.dims().to_vec(),
            });
        }
        let gt_var = tape.input_slice(gt.data(), tape.shape(pred).to_vec());
        let diff = tape.sub(pred, gt_var)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean_all(sq);

        let count_gt: f64 = gt.data().iter().sum();
        let count_pred = tape.sum_all(pred);
        let count_diff = tape.add_const(count_pred, -count_gt);
        let count_abs = tape.abs(count_diff);
        let count_term = tape.scale(count_abs, 1.0 / (count_gt + 1.0));
        tape.add(mse, count_term)
    }
}

pub fn loss_by_name(name: &str) -> Result<Box<dyn DensityLoss>> {
    match name {
        "mse_count" => Ok(Box::new(MseCountLoss)),
        other => Err(Error::config(format!("unknown loss {other:?} (expected mse_count)"))),
    }
}

/// ℒ = ℒ_sub + λ·𝒬. With λ = 0 or no penalty the sub-loss passes through
/// untouched.
pub fn total_loss(tape: &mut Tape, sub: Var, q: Option<Var>, lambda: f64) -> Var {
    match q {
        Some(q) if lambda != 0.0 => {
            let weighted = tape.scale(q, lambda);
            tape.add(sub, weighted).expect("scalar add")
        }
        _ => sub,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_value(pred: &[f64], gt: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.input_slice(pred, vec![pred.len(), 1]);
        let gt = Tensor::new(vec![gt.len(), 1], gt.to_vec()).unwrap();
        let l = MseCountLoss.build(&mut tape, p, &gt).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn perfect_prediction_is_zero() {
        assert_eq!(loss_value(&[0.5, 1.0, 0.0], &[0.5, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn constant_offset_matches_hand_formula() {
        // pred = gt + c on P pixels: MSE term c², count term P·c/(Σgt+1)
        let gt = [0.2, 0.4, 0.1, 0.3];
        let c = 0.25;
        let pred: Vec<f64> = gt.iter().map(|v| v + c).collect();
        let sum_gt: f64 = gt.iter().sum();
        let expect = c * c + (4.0 * c) / (sum_gt + 1.0);
        assert!((loss_value(&pred, &gt) - expect).abs() < 1e-12);
    }

    #[test]
    fn random_pair_matches_direct_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let pred: Vec<f64> = (0..32).map(|_| r.gen_range(0.0..1.0)).collect();
        let gt: Vec<f64> = (0..32).map(|_| r.gen_range(0.0..1.0)).collect();
        let mse: f64 = pred.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0;
        let (sp, sg): (f64, f64) = (pred.iter().sum(), gt.iter().sum());
        let expect = mse + (sp - sg).abs() / (sg + 1.0);
        assert!((loss_value(&pred, &gt) - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.input_slice(&[0.0; 4], vec![4, 1]);
        let gt = Tensor::zeros(vec![5, 1]);
        assert!(MseCountLoss.build(&mut tape, p, &gt).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let sub = tape.input_slice(&[2.0], vec![1]);
        let q = tape.input_slice(&[3.0], vec![1]);
        // λ=0 passes the sub-loss through unchanged
        let l0 = total_loss(&mut tape, sub, Some(q), 0.0);
        assert_eq!(l0, sub);
        // no penalty at all
        let l_none = total_loss(&mut tape, sub, None, 0.1);
        assert_eq!(l_none, sub);
        // ℒ_sub=2, 𝒬=3, λ=0.1 → 2.3
        let l = total_loss(&mut tape, sub, Some(q), 0.1);
        assert!((tape.value(l)[0] - 2.3).abs() < 1e-15);
    }

    #[test]
    fn unknown_loss_name_is_an_error() {
        assert!(loss_by_name("mse_count").is_ok());
        assert!(loss_by_name("instance_attention").is_err());
    }
}
