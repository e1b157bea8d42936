//! Margin loss on class-capsule norms plus weighted reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

/// Margin-loss thresholds and the reconstruction weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    /// Present-class norm target.
    pub m_plus: f64,
    /// Absent-class norm ceiling.
    pub m_minus: f64,
    /// Down-weight on absent-class terms.
    pub lambda_down: f64,
    /// Multiplier on the reconstruction term.
    pub recon_weight: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams { m_plus: 0.9, m_minus: 0.1, lambda_down: 0.5, recon_weight: 0.0005 }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            bail!(Config, "margin params need 0 < m_minus < m_plus < 1, got m+={} m-={}", self.m_plus, self.m_minus);
        }
        if !(0.0 < self.lambda_down && self.lambda_down <= 1.0) {
            bail!(Config, "lambda_down must be in (0,1], got {}", self.lambda_down);
        }
        if self.recon_weight < 0.0 {
            bail!(Config, "recon_weight must be >= 0, got {}", self.recon_weight);
        }
        Ok(())
    }
}

/// Scalar loss terms for one batch. `total = margin + recon_weight * recon`.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub margin: f64,
    pub recon: f64,
    pub recon_weight: f64,
    /// Per-sample, per-class capsule norms `[N, C]` (row-major).
    pub class_norms: Vec<f64>,
}

fn check_one_hot<E: Element>(labels: &Tensor<E>) -> Result<()> {
    let dims = labels.shape().dims().to_vec();
    if dims.len() != 2 {
        bail!(ShapeMismatch, "labels must be one-hot [N, C], got {}", labels.shape());
    }
    let c = dims[1];
    for (row_idx, row) in labels.values().chunks_exact(c).enumerate() {
        let mut ones = 0usize;
        for &v in row {
            if v == E::one() {
                ones += 1;
            } else if v != E::zero() {
                bail!(InvalidArgument, "label row {row_idx} is not one-hot (entry {v})");
            }
        }
        if ones != 1 {
            bail!(InvalidArgument, "label row {row_idx} has {ones} ones, expected exactly 1");
        }
    }
    Ok(())
}

/// Mean over the batch of
/// `sum_c [T_c * max(0, m+ - ||v_c||)^2 + lambda * (1 - T_c) * max(0, ||v_c|| - m-)^2]`.
pub fn margin_loss<E: Element>(class_norms: &Tensor<E>, labels: &Tensor<E>, p: &MarginParams) -> Result<Tensor<E>> {
    p.validate()?;
    if class_norms.shape() != labels.shape() {
        bail!(ShapeMismatch, "class norms {} vs labels {}", class_norms.shape(), labels.shape());
    }
    check_one_hot(labels)?;
    let n = class_norms.shape().axis(0);
    let m_plus = E::from_f64(p.m_plus);
    let m_minus = E::from_f64(p.m_minus);
    let lambda = E::from_f64(p.lambda_down);

    // present-class hinge: max(0, m+ - v)^2, masked by T
    let present = class_norms.affine(-E::one(), m_plus)?.relu()?;
    let present_sq = present.mul(&present)?;
    let present_term = present_sq.mul(labels)?;

    // absent-class hinge: max(0, v - m-)^2, masked by (1 - T), down-weighted
    let absent = class_norms.affine(E::one(), -m_minus)?.relu()?;
    let absent_sq = absent.mul(&absent)?;
    let inv_mask = labels.affine(-E::one(), E::one())?;
    let absent_term = absent_sq.mul(&inv_mask)?.scale(lambda)?;

    present_term
        .add(&absent_term)?
        .sum_all()?
        .scale(E::one() / E::from_usize(n))
}

/// Sum of squared pixel differences per sample, averaged over the batch.
pub fn reconstruction_loss<E: Element>(recon: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if recon.shape() != target.shape() {
        bail!(ShapeMismatch, "reconstruction {} vs target {}", recon.shape(), target.shape());
    }
    let n = recon.shape().axis(0);
    let diff = recon.sub(target)?;
    diff.mul(&diff)?.sum_all()?.scale(E::one() / E::from_usize(n))
}

/// Combine the margin and reconstruction terms. Returns the scalar tape
/// tensor to backpropagate plus a value-level report.
pub fn total_loss<E: Element>(
    margin: &Tensor<E>,
    recon: Option<&Tensor<E>>,
    class_norms: &Tensor<E>,
    p: &MarginParams,
) -> Result<(Tensor<E>, LossReport)> {
    let margin_v = margin.scalar_value().into_f64();
    let (total_t, recon_v) = match recon {
        Some(r) => {
            let w = E::from_f64(p.recon_weight);
            (margin.add(&r.scale(w)?)?, r.scalar_value().into_f64())
        }
        None => (margin.clone(), 0.0),
    };
    let report = LossReport {
        total: total_t.scalar_value().into_f64(),
        margin: margin_v,
        recon: recon_v,
        recon_weight: p.recon_weight,
        class_norms: class_norms.values().iter().map(|v| v.into_f64()).collect(),
    };
    Ok((total_t, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;
    use crate::tensor::{grad_check, Tape};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn onehot(tape: &Tape<f64>, rows: &[usize], classes: usize) -> Tensor<f64> {
        let mut data = vec![0.0; rows.len() * classes];
        for (i, &c) in rows.iter().enumerate() {
            data[i * classes + c] = 1.0;
        }
        tape.constant(data, shape![rows.len(), classes]).unwrap()
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let tape = Tape::new();
        let norms = tape.var(vec![0.9, 0.1, 0.05, 0.02], shape![1, 4]).unwrap();
        let labels = onehot(&tape, &[0], 4);
        let loss = margin_loss(&norms, &labels, &MarginParams::default()).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn missed_present_class_costs_081() {
        let tape = Tape::new();
        let norms = tape.var(vec![0.0, 0.1, 0.1, 0.1], shape![1, 4]).unwrap();
        let labels = onehot(&tape, &[0], 4);
        let loss = margin_loss(&norms, &labels, &MarginParams::default()).unwrap();
        assert!((loss.scalar_value() - 0.81).abs() < 1e-12);
    }

    #[test]
    fn confident_wrong_class_costs_032() {
        let tape = Tape::new();
        // true class satisfied at 0.9; one absent class at 0.9 costs
        // 0.5 * (0.9 - 0.1)^2 = 0.32
        let norms = tape.var(vec![0.9, 0.9, 0.1, 0.1], shape![1, 4]).unwrap();
        let labels = onehot(&tape, &[0], 4);
        let loss = margin_loss(&norms, &labels, &MarginParams::default()).unwrap();
        assert!((loss.scalar_value() - 0.32).abs() < 1e-12);
    }

    #[test]
    fn non_one_hot_labels_rejected() {
        let tape = Tape::new();
        let norms = tape.var(vec![0.5, 0.5], shape![1, 2]).unwrap();
        for bad in [vec![1.0, 1.0], vec![0.0, 0.0], vec![0.5, 0.5]] {
            let labels = tape.constant(bad, shape![1, 2]).unwrap();
            assert!(margin_loss(&norms, &labels, &MarginParams::default()).is_err());
        }
    }

    #[test]
    fn margin_loss_nonnegative_and_zero_iff_hinges_inactive() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..200 {
            let tape = Tape::new();
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let cls = rng.random_range(0..3);
            let norms = tape.var(v.clone(), shape![2, 3]).unwrap();
            let labels = onehot(&tape, &[cls, (cls + 1) % 3], 3);
            let loss = margin_loss(&norms, &labels, &MarginParams::default()).unwrap().scalar_value();
            assert!(loss >= 0.0);
            let hinges_inactive = {
                let rows = [cls, (cls + 1) % 3];
                (0..2).all(|r| {
                    (0..3).all(|c| {
                        if c == rows[r] {
                            v[r * 3 + c] >= 0.9
                        } else {
                            v[r * 3 + c] <= 0.1
                        }
                    })
                })
            };
            assert_eq!(loss == 0.0, hinges_inactive, "norms {v:?}");
        }
    }

    #[test]
    fn reconstruction_identity_is_zero() {
        let tape = Tape::new();
        let a = tape.var(vec![0.3; 12], shape![2, 6]).unwrap();
        let b = tape.constant(vec![0.3; 12], shape![2, 6]).unwrap();
        assert_eq!(reconstruction_loss(&a, &b).unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn reconstruction_all_zero_vs_all_one_28x28() {
        let tape = Tape::new();
        let recon = tape.var(vec![0.0; 784], shape![1, 28, 28, 1]).unwrap();
        let target = tape.constant(vec![1.0; 784], shape![1, 28, 28, 1]).unwrap();
        let loss = reconstruction_loss(&recon, &target).unwrap();
        assert_eq!(loss.scalar_value(), 784.0);
    }

    #[test]
    fn reconstruction_matches_double_loop() {
        let mut rng = StdRng::seed_from_u64(3);
        let tape = Tape::new();
        let (n, hw) = (3, 10);
        let a: Vec<f64> = (0..n * hw).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n * hw).map(|_| rng.random_range(0.0..1.0)).collect();
        let at = tape.var(a.clone(), shape![n, hw]).unwrap();
        let bt = tape.constant(b.clone(), shape![n, hw]).unwrap();
        let got = reconstruction_loss(&at, &bt).unwrap().scalar_value();
        let mut want = 0.0;
        for s in 0..n {
            for p in 0..hw {
                let d = a[s * hw + p] - b[s * hw + p];
                want += d * d;
            }
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let norms = tape.var(vec![0.0, 0.1], shape![1, 2]).unwrap();
        let labels = onehot(&tape, &[0], 2);
        let p = MarginParams { recon_weight: 0.0005, ..Default::default() };
        let margin = margin_loss(&norms, &labels, &p).unwrap();
        // margin 0.81; recon 784 -> total = 0.81 + 0.392
        let recon = tape.var(vec![0.0; 784], shape![1, 784]).unwrap();
        let target = tape.constant(vec![1.0; 784], shape![1, 784]).unwrap();
        let recon_l = reconstruction_loss(&recon, &target).unwrap();
        let (total, report) = total_loss(&margin, Some(&recon_l), &norms, &p).unwrap();
        assert!((report.recon_weight * report.recon - 0.392).abs() < 1e-9);
        assert!((total.scalar_value() - (0.81 + 0.392)).abs() < 1e-9);

        // weight 0: total equals margin exactly
        let p0 = MarginParams { recon_weight: 0.0, ..Default::default() };
        let (total0, _) = total_loss(&margin, Some(&recon_l), &norms, &p0).unwrap();
        assert_eq!(total0.scalar_value(), margin.scalar_value());
    }

    #[test]
    fn total_report_invariant_random() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let tape = Tape::new();
            let norms = tape
                .var((0..4).map(|_| rng.random_range(0.0..1.0)).collect(), shape![2, 2])
                .unwrap();
            let labels = onehot(&tape, &[0, 1], 2);
            let p = MarginParams { recon_weight: rng.random_range(0.0..0.01), ..Default::default() };
            let margin = margin_loss(&norms, &labels, &p).unwrap();
            let r_in = tape.var(vec![rng.random_range(0.0..1.0); 8], shape![2, 4]).unwrap();
            let r_tg = tape.constant(vec![rng.random_range(0.0..1.0); 8], shape![2, 4]).unwrap();
            let recon = reconstruction_loss(&r_in, &r_tg).unwrap();
            let (total, rep) = total_loss(&margin, Some(&recon), &norms, &p).unwrap();
            assert!((rep.total - (rep.margin + rep.recon_weight * rep.recon)).abs() < 1e-9);
            assert!((total.scalar_value() - rep.total).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_gradient_passes_fd_away_from_kinks() {
        // keep norms clear of the hinge thresholds 0.1 and 0.9
        let norms = vec![0.5, 0.3, 0.7, 0.25];
        let err = grad_check(
            |tape, t| {
                let labels = onehot(tape, &[0, 1], 2);
                margin_loss(t, &labels, &MarginParams::default())
            },
            &norms,
            &shape![2, 2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn zero_recon_weight_leaves_margin_gradients_unchanged() {
        let mut rng = StdRng::seed_from_u64(5);
        let norms_data: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..0.8)).collect();

        let grads = |weight: f64, with_recon: bool| {
            let tape = Tape::<f64>::new();
            let norms = tape.var(norms_data.clone(), shape![2, 2]).unwrap();
            let labels = onehot(&tape, &[0, 1], 2);
            let p = MarginParams { recon_weight: weight, ..Default::default() };
            let margin = margin_loss(&norms, &labels, &p).unwrap();
            let total = if with_recon {
                let r = norms.sigmoid().unwrap();
                let tg = tape.constant(vec![0.5; 4], shape![2, 2]).unwrap();
                let rl = reconstruction_loss(&r, &tg).unwrap();
                total_loss(&margin, Some(&rl), &norms, &p).unwrap().0
            } else {
                margin
            };
            tape.backward(&total).unwrap();
            norms.grad().unwrap()
        };

        // recon present but weighted 0: identical gradients to margin alone
        assert_eq!(grads(0.0, true), grads(0.0, false));
    }
}
