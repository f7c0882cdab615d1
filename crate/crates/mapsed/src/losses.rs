//! Training objectives: reconstruction loss, the Frobenius-norm triplet
//! contrastive loss, the dot-product InfoNCE comparator, and the combined
//! objective L = L_r + lambda_c * L_c.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which contrastive objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastMode {
    /// Triplet bound on squared Frobenius distances (the default).
    Frobenius,
    /// Dot-product InfoNCE comparator.
    Dot,
}

impl ContrastMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(ContrastMode::Frobenius),
            "dot" => Ok(ContrastMode::Dot),
            other => Err(Error::Config(format!(
                "unknown contrast mode `{other}` (expected frobenius|dot)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContrastMode::Frobenius => "frobenius",
            ContrastMode::Dot => "dot",
        }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the L1 term inside the reconstruction loss.
    pub lambda: f64,
    /// Weight of the contrastive term in the combined loss.
    pub lambda_c: f64,
    /// Triplet margin.
    pub omega: f64,
    /// Number of negative samples per sequence.
    pub num_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, lambda_c: 0.1, omega: 1.0, num_negatives: 4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.lambda_c < 0.0 || self.omega < 0.0 {
            return Err(Error::Config(
                "loss weights lambda, lambda_c, omega must be nonnegative".into(),
            ));
        }
        if self.num_negatives < 1 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        Ok(())
    }
}

// ── Tape builders ────────────────────────────────────────────────────────

/// (1/n) * sum_tau [ ||Y_tau - Y'_tau||_F^2 + lambda * ||Y_tau - Y'_tau||_1 ].
/// Per-frame Frobenius/L1 sums telescope into totals over all entries.
pub fn recon_loss_tape(tape: &mut Tape, y: Var, y_pred: Var, lambda: f64) -> Result<Var> {
    let (sy, sp) = (tape.value(y).shape(), tape.value(y_pred).shape());
    if sy != sp {
        return Err(Error::dim("recon_loss", "shape", sy.iter().product(), sp.iter().product()));
    }
    let n = tape.value(y).shape()[0];
    let diff = tape.sub(y_pred, y)?;
    let sq = tape.mul(diff, diff)?;
    let fro = tape.sum_all(sq);
    let ab = tape.abs(diff);
    let l1 = tape.sum_all(ab);
    let l1w = tape.scale(l1, lambda);
    let total = tape.add(fro, l1w)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

fn sq_dist_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum_all(sq))
}

/// max( ||S'+ - S'||_F^2 - min_i ||S_i - S'||_F^2 + omega, 0 ).
pub fn contrastive_loss_tape(
    tape: &mut Tape,
    s: Var,
    s_plus: Var,
    s_negs: &[Var],
    omega: f64,
) -> Result<Var> {
    if s_negs.is_empty() {
        return Err(Error::Config("contrastive loss requires a non-empty negative set".into()));
    }
    let d_pos = sq_dist_tape(tape, s_plus, s)?;
    let mut d_negs = Vec::with_capacity(s_negs.len());
    for &neg in s_negs {
        d_negs.push(sq_dist_tape(tape, neg, s)?);
    }
    let d_min = tape.min_scalars(&d_negs)?;
    let gap = tape.sub(d_pos, d_min)?;
    let shifted = tape.offset(gap, omega);
    Ok(tape.relu(shifted))
}

fn dot_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum_all(p))
}

/// -log[ exp<S',S'+> / (exp<S',S'+> + sum_j exp<S',S_j->) ], evaluated as
/// logsumexp(s+, s-...) - s+ so any magnitude stays finite.
pub fn infonce_dot_tape(
    tape: &mut Tape,
    s: Var,
    s_plus: Var,
    s_negs: &[Var],
) -> Result<Var> {
    if s_negs.is_empty() {
        return Err(Error::Config("InfoNCE requires a non-empty negative set".into()));
    }
    let pos = dot_tape(tape, s, s_plus)?;
    let mut scores = vec![pos];
    for &neg in s_negs {
        scores.push(dot_tape(tape, s, neg)?);
    }
    let lse = tape.logsumexp_scalars(&scores)?;
    tape.sub(lse, pos)
}

/// L = L_r + lambda_c * L_c.
pub fn net_loss_tape(tape: &mut Tape, recon: Var, contrastive: Var, lambda_c: f64) -> Result<Var> {
    let cw = tape.scale(contrastive, lambda_c);
    tape.add(recon, cw)
}

// ── Pure wrappers ────────────────────────────────────────────────────────

pub fn recon_loss(y: &Tensor, y_pred: &Tensor, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let pv = tape.constant(y_pred.clone());
    let l = recon_loss_tape(&mut tape, yv, pv, lambda)?;
    Ok(tape.value(l).data()[0])
}

pub fn contrastive_loss(
    s: &Tensor,
    s_plus: &Tensor,
    s_negs: &[Tensor],
    omega: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let pv = tape.constant(s_plus.clone());
    let nv: Vec<Var> = s_negs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = contrastive_loss_tape(&mut tape, sv, pv, &nv, omega)?;
    Ok(tape.value(l).data()[0])
}

pub fn infonce_dot(s: &Tensor, s_plus: &Tensor, s_negs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let pv = tape.constant(s_plus.clone());
    let nv: Vec<Var> = s_negs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = infonce_dot_tape(&mut tape, sv, pv, &nv)?;
    Ok(tape.value(l).data()[0])
}

pub fn net_loss(recon: f64, contrastive: f64, lambda_c: f64) -> f64 {
    recon + lambda_c * contrastive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn recon_zero_when_equal() {
        let mut r = rng(80);
        let y = rand_tensor(&[2, 1, 2, 2], &mut r);
        assert_eq!(recon_loss(&y, &y, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn recon_single_entry_analytic() {
        let y = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let yp = Tensor::zeros(&[1, 1, 1, 1]);
        // ||2||_F^2 + 1 * ||2||_1 = 4 + 2.
        assert_eq!(recon_loss(&y, &yp, 1.0).unwrap(), 6.0);
    }

    #[test]
    fn recon_matches_elementwise_oracle() {
        let mut r = rng(81);
        let y = rand_tensor(&[2, 1, 2, 2], &mut r);
        let yp = rand_tensor(&[2, 1, 2, 2], &mut r);
        let lambda = 0.3;
        let mut acc = 0.0;
        for (a, b) in y.data().iter().zip(yp.data()) {
            let d = b - a;
            acc += d * d + lambda * d.abs();
        }
        acc /= 2.0;
        assert!((recon_loss(&y, &yp, lambda).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn recon_shape_mismatch_is_error() {
        let y = Tensor::zeros(&[2, 1, 2, 2]);
        let yp = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(recon_loss(&y, &yp, 0.0).is_err());
    }

    #[test]
    fn contrastive_margin_satisfied_is_zero() {
        // Positive == anchor (distance 0), nearest negative squared distance
        // 10, omega 1 -> max(0 - 10 + 1, 0) = 0.
        let s = Tensor::zeros(&[2, 2]);
        let s_plus = Tensor::zeros(&[2, 2]);
        let far = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap(); // d^2 = 10
        assert_eq!(contrastive_loss(&s, &s_plus, &[far], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_direct_arithmetic() {
        // d+ = 5, nearest negative 2, omega 1 -> 4.
        let s = Tensor::zeros(&[1, 5]);
        let s_plus = Tensor::from_vec(&[1, 5], vec![1.0, 2.0, 0.0, 0.0, 0.0]).unwrap(); // 5
        let n1 = Tensor::from_vec(&[1, 5], vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(); // 2
        let n2 = Tensor::from_vec(&[1, 5], vec![3.0, 0.0, 0.0, 0.0, 0.0]).unwrap(); // 9
        assert_eq!(contrastive_loss(&s, &s_plus, &[n1, n2], 1.0).unwrap(), 4.0);
    }

    #[test]
    fn contrastive_all_zero_returns_omega() {
        let z = Tensor::zeros(&[3]);
        let omega = 0.75;
        assert_eq!(contrastive_loss(&z, &z, &[z.clone(), z.clone()], omega).unwrap(), omega);
    }

    #[test]
    fn contrastive_empty_negatives_is_config_error() {
        let z = Tensor::zeros(&[3]);
        assert!(matches!(
            contrastive_loss(&z, &z, &[], 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contrastive_invariant_under_negative_permutation() {
        let mut r = rng(82);
        let s = rand_tensor(&[2, 3], &mut r);
        let sp = rand_tensor(&[2, 3], &mut r);
        let negs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&[2, 3], &mut r)).collect();
        let base = contrastive_loss(&s, &sp, &negs, 1.0).unwrap();
        let mut rev = negs.clone();
        rev.reverse();
        assert_eq!(contrastive_loss(&s, &sp, &rev, 1.0).unwrap(), base);
        let rotated: Vec<Tensor> = negs[1..].iter().chain(&negs[..1]).cloned().collect();
        assert_eq!(contrastive_loss(&s, &sp, &rotated, 1.0).unwrap(), base);
    }

    #[test]
    fn contrastive_nonnegative_and_zero_iff_margin_met() {
        let mut r = rng(83);
        for _ in 0..200 {
            let s = rand_tensor(&[2, 2], &mut r);
            let sp = rand_tensor(&[2, 2], &mut r);
            let negs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 2], &mut r)).collect();
            let omega = 0.5;
            let l = contrastive_loss(&s, &sp, &negs, omega).unwrap();
            assert!(l >= 0.0);
            let d = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            let dp = d(&sp, &s);
            let dmin = negs.iter().map(|n| d(n, &s)).fold(f64::INFINITY, f64::min);
            if dp + omega <= dmin {
                assert_eq!(l, 0.0);
            } else {
                assert!((l - (dp - dmin + omega)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_all_zero_single_negative_is_ln2() {
        let z = Tensor::zeros(&[4]);
        let l = infonce_dot(&z, &z, &[z.clone()]).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infonce_saturates_when_positive_dominates() {
        // <s, s+> = 50, negatives at 0: loss ~ log(1 + 2 e^-50) ~ 0.
        let s = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let sp = Tensor::from_vec(&[1], vec![10.0]).unwrap();
        let z = Tensor::zeros(&[1]);
        let l = infonce_dot(&s, &sp, &[z.clone(), z]).unwrap();
        assert!(l < 1e-12, "loss {l}");
    }

    #[test]
    fn infonce_matches_naive_oracle() {
        let mut r = rng(84);
        let s = rand_tensor(&[2, 3], &mut r);
        let sp = rand_tensor(&[2, 3], &mut r);
        let negs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 3], &mut r)).collect();
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let pos = dot(&s, &sp).exp();
        let denom: f64 = pos + negs.iter().map(|n| dot(&s, n).exp()).sum::<f64>();
        let oracle = -(pos / denom).ln();
        let l = infonce_dot(&s, &sp, &negs).unwrap();
        assert!((l - oracle).abs() < 1e-10, "{l} vs {oracle}");
    }

    #[test]
    fn infonce_decreases_as_positive_alignment_grows() {
        let mut r = rng(85);
        let s = rand_tensor(&[3], &mut r);
        let negs: Vec<Tensor> = (0..2).map(|_| rand_tensor(&[3], &mut r)).collect();
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let sp = s.map(|v| v * k as f64);
            let l = infonce_dot(&s, &sp, &negs).unwrap();
            assert!(l < prev);
            assert!(l > 0.0);
            prev = l;
        }
    }

    #[test]
    fn net_loss_combination() {
        assert_eq!(net_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(net_loss(3.5, 100.0, 0.0), 3.5);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { num_negatives: 0, ..Default::default() }.validate().is_err());
    }
}
