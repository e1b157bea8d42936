//! Dynamic routing by agreement.
//!
//! Child capsules cast votes for parent capsules; coupling coefficients are
//! refined over a fixed number of iterations: couplings are the softmax of
//! the routing logits, each parent is the squash of its coupling-weighted
//! vote sum, and logits grow by the dot product between a parent's output
//! and each child's vote.

use crate::error::{bail, Result};
use crate::tensor::{Element, Shape, Tape, Tensor};

/// Votes from child capsules to parent capsule types, shaped `[B, K, M, d']`.
/// `grouping` records the spatial origin when votes come from 3-D convolution
/// over a capsule grid (batch axis folded as `N * H' * W'`).
pub struct VoteSet<E: Element> {
    pub votes: Tensor<E>,
    pub grouping: Option<VoteGrouping>,
}

/// Spatial metadata for convolutionally generated votes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoteGrouping {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub child_types: usize,
}

impl<E: Element> VoteSet<E> {
    pub fn new(votes: Tensor<E>) -> Result<Self> {
        if votes.shape().rank() != 4 {
            bail!(ShapeMismatch, "VoteSet expects votes [B,K,M,d'], got {}", votes.shape());
        }
        Ok(VoteSet { votes, grouping: None })
    }

    pub fn with_grouping(votes: Tensor<E>, grouping: VoteGrouping) -> Result<Self> {
        let mut vs = Self::new(votes)?;
        vs.grouping = Some(grouping);
        Ok(vs)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.votes.shape();
        (s.axis(0), s.axis(1), s.axis(2), s.axis(3))
    }
}

/// How [`route`] runs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RouteOptions {
    /// Routing iterations, `>= 1`.
    pub iterations: usize,
    /// Differentiate through every iteration's coupling updates instead of
    /// treating pre-final couplings as constants.
    pub full_grad: bool,
    /// Normalize couplings over the child axis instead of the parent axis.
    pub softmax_over_children: bool,
}

impl Default for RouteOptions {
    fn default() -> Self {
        RouteOptions { iterations: 3, full_grad: false, softmax_over_children: false }
    }
}

impl RouteOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        RouteOptions { iterations, ..Default::default() }
    }
}

/// Routing logits `b` and the couplings derived from them, `[B, K, M]` each.
pub struct RoutingState<E: Element> {
    pub logits: Vec<E>,
    pub batch: usize,
    pub children: usize,
    pub parents: usize,
    pub softmax_over_children: bool,
}

impl<E: Element> RoutingState<E> {
    /// Fresh state with logits reset to zero (per forward pass).
    pub fn zeros(batch: usize, children: usize, parents: usize, softmax_over_children: bool) -> Self {
        RoutingState {
            logits: vec![E::zero(); batch * children * parents],
            batch,
            children,
            parents,
            softmax_over_children,
        }
    }
}

/// Couplings: softmax of the logits over the parent axis (or the child axis
/// when the state is configured that way). Rows sum to 1.
pub fn couplings<E: Element>(state: &RoutingState<E>) -> Vec<E> {
    let mut c = vec![E::zero(); state.logits.len()];
    let (b, k, m) = (state.batch, state.children, state.parents);
    if state.softmax_over_children {
        crate::tensor::softmax_mid_axis_raw(&state.logits, b, k, m, &mut c);
    } else {
        crate::tensor::softmax_mid_axis_raw(&state.logits, b * k, m, 1, &mut c);
    }
    c
}

/// Agreement step: `b_ij += <v_j, vote_ij>`.
pub fn agreement_update<E: Element>(state: &mut RoutingState<E>, votes: &[E], parents: &[E]) {
    let (b, k, m) = (state.batch, state.children, state.parents);
    let dp = votes.len() / (b * k * m);
    debug_assert_eq!(parents.len(), b * m * dp);
    for bi in 0..b {
        for ki in 0..k {
            for mi in 0..m {
                let mut dot = E::zero();
                let vbase = ((bi * k + ki) * m + mi) * dp;
                let pbase = (bi * m + mi) * dp;
                for p in 0..dp {
                    dot = dot + votes[vbase + p] * parents[pbase + p];
                }
                let idx = (bi * k + ki) * m + mi;
                state.logits[idx] = state.logits[idx] + dot;
            }
        }
    }
}

/// Coupling-weighted vote sum at value level: `s[b,m,:] = sum_k c * votes`.
/// `canonical` sums each parent's terms in value order, which makes the
/// result exactly invariant under permutations of the child axis.
fn weighted_sum_values<E: Element>(votes: &[E], c: &[E], b: usize, k: usize, m: usize, dp: usize, canonical: bool) -> Vec<E> {
    let mut s = vec![E::zero(); b * m * dp];
    let mut terms = vec![E::zero(); k];
    for bi in 0..b {
        for mi in 0..m {
            for p in 0..dp {
                if canonical {
                    for ki in 0..k {
                        terms[ki] = c[(bi * k + ki) * m + mi] * votes[((bi * k + ki) * m + mi) * dp + p];
                    }
                    terms.sort_unstable_by(|a, b| a.total_cmp(b));
                    s[(bi * m + mi) * dp + p] = terms.iter().copied().sum();
                } else {
                    let mut acc = E::zero();
                    for ki in 0..k {
                        acc = acc + c[(bi * k + ki) * m + mi] * votes[((bi * k + ki) * m + mi) * dp + p];
                    }
                    s[(bi * m + mi) * dp + p] = acc;
                }
            }
        }
    }
    s
}

/// Iteratively route votes to parents; returns parent activity vectors
/// `[B, M, d']`.
///
/// Logits start at zero each call. By default couplings computed in
/// non-final iterations are constants on the tape (gradients flow through
/// the final weighted sum and squash only); `full_grad` differentiates the
/// whole recurrence.
pub fn route<E: Element>(votes: &VoteSet<E>, opts: &RouteOptions) -> Result<Tensor<E>> {
    if opts.iterations < 1 {
        bail!(InvalidArgument, "route: iterations must be >= 1, got {}", opts.iterations);
    }
    let (b, k, m, dp) = votes.dims();
    let tape = votes.votes.tape().clone();
    let softmax_axis = if opts.softmax_over_children { 1 } else { 2 };

    if opts.full_grad {
        let mut logits = tape.constant(vec![E::zero(); b * k * m], Shape::new(vec![b, k, m])?)?;
        let mut parents = None;
        for it in 0..opts.iterations {
            let c = logits.softmax_axis(softmax_axis)?;
            let v = votes.votes.route_sum(&c)?.squash()?;
            if it + 1 < opts.iterations {
                let agree = v.agreement_dot(&votes.votes)?;
                logits = logits.add(&agree)?;
            }
            parents = Some(v);
        }
        return Ok(parents.expect("iterations >= 1"));
    }

    // value-level pre-iterations with couplings treated as constants
    let canonical = tape.is_deterministic();
    let vote_vals = votes.votes.values();
    let mut state = RoutingState::<E>::zeros(b, k, m, opts.softmax_over_children);
    for _ in 0..opts.iterations - 1 {
        let c = couplings(&state);
        let s = weighted_sum_values(&vote_vals, &c, b, k, m, dp, canonical);
        let mut v = vec![E::zero(); s.len()];
        crate::tensor::squash_rows_raw(&s, dp, &mut v);
        agreement_update(&mut state, &vote_vals, &v);
    }
    let c_final = couplings(&state);
    let c_t = tape.constant(c_final, Shape::new(vec![b, k, m])?)?;
    votes.votes.route_sum(&c_t)?.squash()
}

/// Convenience for routing without spatial structure: votes as raw values.
pub fn route_values<E: Element>(
    vote_values: &[E],
    b: usize,
    k: usize,
    m: usize,
    dp: usize,
    opts: &RouteOptions,
) -> Result<Vec<E>> {
    let tape = Tape::<E>::deterministic();
    let votes = VoteSet::new(tape.var(vote_values.to_vec(), Shape::new(vec![b, k, m, dp])?)?)?;
    Ok(route(&votes, opts)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::shape;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn squash_vec(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().map(|x| x * x).sum();
        let f = (s + 1e-8).sqrt() / (1.0 + s);
        v.iter().map(|x| x * f).collect()
    }

    #[test]
    fn single_parent_single_child_is_squash_of_vote() {
        let vote = vec![0.3, -0.2, 0.8];
        let out = route_values(&vote, 1, 1, 1, 3, &RouteOptions::with_iterations(3)).unwrap();
        let want = squash_vec(&vote);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_votes_keep_uniform_couplings() {
        // all children cast the same vote u for every parent: couplings stay
        // uniform and every parent returns squash((K/M) * u)
        let (k, m, dp) = (4, 2, 3);
        let u = [0.5, -1.0, 0.25];
        let mut votes = Vec::new();
        for _ in 0..k * m {
            votes.extend_from_slice(&u);
        }
        for r in 1..=4 {
            let out = route_values(&votes, 1, k, m, dp, &RouteOptions::with_iterations(r)).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| x * k as f64 / m as f64).collect();
            let want = squash_vec(&scaled);
            for mi in 0..m {
                for p in 0..dp {
                    assert!((out[mi * dp + p] - want[p]).abs() < 1e-9, "r={r}");
                }
            }
        }
    }

    #[test]
    fn matches_straightline_recurrence() {
        let mut rng = StdRng::seed_from_u64(42);
        for case in 0..25 {
            let (k, m, dp) = (rng.random_range(1..=6), rng.random_range(1..=4), rng.random_range(1..=4));
            let r = rng.random_range(1..=4);
            let votes: Vec<f64> = (0..k * m * dp).map(|_| rng.random_range(-1.5..1.5)).collect();
            let got = route_values(&votes, 1, k, m, dp, &RouteOptions::with_iterations(r)).unwrap();
            let want = reference::route_straightline(&votes, k, m, dp, r, false);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn r1_equals_uniform_coupling_sum() {
        let mut rng = StdRng::seed_from_u64(1);
        let (k, m, dp) = (5, 3, 2);
        let votes: Vec<f64> = (0..k * m * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = route_values(&votes, 1, k, m, dp, &RouteOptions::with_iterations(1)).unwrap();
        for mi in 0..m {
            let mut s = vec![0.0; dp];
            for ki in 0..k {
                for p in 0..dp {
                    s[p] += votes[(ki * m + mi) * dp + p] / m as f64;
                }
            }
            let want = squash_vec(&s);
            for p in 0..dp {
                assert!((got[mi * dp + p] - want[p]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_zero_iterations() {
        let tape = Tape::<f64>::new();
        let votes = VoteSet::new(tape.var(vec![0.0; 4], shape![1, 2, 2, 1]).unwrap()).unwrap();
        assert!(route(&votes, &RouteOptions { iterations: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn couplings_uniform_and_analytic() {
        let state = RoutingState::<f64>::zeros(1, 2, 4, false);
        let c = couplings(&state);
        assert!(c.iter().all(|v| (v - 0.25).abs() < 1e-12));

        let mut state = RoutingState::<f64>::zeros(1, 1, 2, false);
        state.logits = vec![2.0f64.ln(), 0.0];
        let c = couplings(&state);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_rows_sum_to_one_for_random_logits() {
        let mut rng = StdRng::seed_from_u64(5);
        let (b, k, m) = (2, 3, 4);
        let mut state = RoutingState::<f64>::zeros(b, k, m, false);
        state.logits = (0..b * k * m).map(|_| rng.random_range(-30.0..30.0)).collect();
        let c = couplings(&state);
        for row in c.chunks(m) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn agreement_update_orthogonal_and_aligned() {
        // orthogonal parent leaves the logit unchanged; aligned unit vote adds 1
        let votes = vec![1.0, 0.0, /* child 0, parent 0 */ 0.0, 1.0 /* child 1, parent 0 */];
        let mut state = RoutingState::<f64>::zeros(1, 2, 1, false);
        let parents = vec![1.0, 0.0];
        agreement_update(&mut state, &votes, &parents);
        assert!((state.logits[0] - 1.0).abs() < 1e-12);
        assert!(state.logits[1].abs() < 1e-12);
    }

    #[test]
    fn agreement_update_matches_dot_loop() {
        let mut rng = StdRng::seed_from_u64(77);
        let (b, k, m, dp) = (2, 3, 2, 4);
        let votes: Vec<f64> = (0..b * k * m * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let parents: Vec<f64> = (0..b * m * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut state = RoutingState::<f64>::zeros(b, k, m, false);
        agreement_update(&mut state, &votes, &parents);
        for bi in 0..b {
            for ki in 0..k {
                for mi in 0..m {
                    let mut dot = 0.0;
                    for p in 0..dp {
                        dot += votes[((bi * k + ki) * m + mi) * dp + p] * parents[(bi * m + mi) * dp + p];
                    }
                    let got = state.logits[(bi * k + ki) * m + mi];
                    assert!((got - dot).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn route_invariant_under_child_permutation() {
        let mut rng = StdRng::seed_from_u64(9);
        let (k, m, dp) = (6, 3, 4);
        let votes: Vec<f64> = (0..k * m * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = route_values(&votes, 1, k, m, dp, &RouteOptions::with_iterations(3)).unwrap();
        // permute children
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pv = vec![0.0; votes.len()];
        for (new_k, &old_k) in perm.iter().enumerate() {
            pv[new_k * m * dp..(new_k + 1) * m * dp].copy_from_slice(&votes[old_k * m * dp..(old_k + 1) * m * dp]);
        }
        let permuted = route_values(&pv, 1, k, m, dp, &RouteOptions::with_iterations(3)).unwrap();
        assert_eq!(base, permuted, "bitwise equality in deterministic mode");
    }

    #[test]
    fn planted_signal_sharpens_couplings() {
        // one parent receives aligned votes from all children; the aligned
        // parent's mean coupling after r=3 must exceed its r=1 value
        let mut improvements = 0;
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let (k, m, dp) = (5, 3, 4);
            let aligned: Vec<f64> = (0..dp).map(|_| rng.random_range(0.5..1.0)).collect();
            let mut votes = vec![0.0; k * m * dp];
            for ki in 0..k {
                for mi in 0..m {
                    for p in 0..dp {
                        votes[(ki * m + mi) * dp + p] = if mi == 0 {
                            aligned[p]
                        } else {
                            rng.random_range(-1.0..1.0)
                        };
                    }
                }
            }
            let coupling_after = |r: usize| -> f64 {
                // replay the recurrence, reading the final couplings
                let mut state = RoutingState::<f64>::zeros(1, k, m, false);
                for _ in 0..r - 1 {
                    let c = couplings(&state);
                    let s = super::weighted_sum_values(&votes, &c, 1, k, m, dp, false);
                    let mut v = vec![0.0; s.len()];
                    crate::tensor::squash_rows_raw(&s, dp, &mut v);
                    agreement_update(&mut state, &votes, &v);
                }
                let c = couplings(&state);
                (0..k).map(|ki| c[ki * m]).sum::<f64>() / k as f64
            };
            if coupling_after(3) > coupling_after(1) {
                improvements += 1;
            }
        }
        assert!(improvements >= 18, "aligned parent coupling grew in only {improvements}/20 seeds");
    }
}
