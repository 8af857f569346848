//! Counting, robust Bayesian multinomial estimates over partitions, the
//! posterior KL loss under single-pseudocount Dirichlet priors, and
//! Rao-Blackwellised branch probabilities.
//!
//! Counts are `u64`, Dirichlet parameters are `f64` slices of the same
//! length. All losses are in nats.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ising::{IsingModel, PartialState, Spin, SpinState};
use crate::math::{digamma, log, sigmoid};

/// How leaf probabilities are estimated from a population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorMode {
    /// Robust Bayes estimate from counts.
    #[default]
    Count,
    /// Counts replaced by sums of exact single-site conditionals.
    RaoBlackwell,
}

/// Number of `samples` agreeing with every assigned coordinate of `pattern`.
pub fn count<'a, I>(pattern: &PartialState, samples: I) -> usize
where
    I: IntoIterator<Item = &'a SpinState>,
{
    samples.into_iter().filter(|s| pattern.matches(s)).count()
}

/// Unit pseudocount spread evenly over the minimum-count cells.
pub fn robust_alphas(counts: &[u64]) -> Vec<f64> {
    let Some(&min) = counts.iter().min() else {
        return Vec::new();
    };
    let ties = counts.iter().filter(|&&c| c == min).count();
    let share = 1.0 / ties as f64;
    counts.iter().map(|&c| if c == min { share } else { 0.0 }).collect()
}

/// `(#(cell) + alpha(cell)) / (N + sum(alpha))`.
pub fn bayes_estimate(counts: &[u64], alphas: &[f64]) -> Vec<f64> {
    debug_assert_eq!(counts.len(), alphas.len());
    let denom = counts.iter().sum::<u64>() as f64 + alphas.iter().sum::<f64>();
    counts
        .iter()
        .zip(alphas)
        .map(|(&c, &a)| (c as f64 + a) / denom)
        .collect()
}

/// Relative frequencies. Reference only: unseen cells get probability
/// zero, which breaks importance sampling.
pub fn histogram_mle(counts: &[u64]) -> Vec<f64> {
    let n = counts.iter().sum::<u64>() as f64;
    counts.iter().map(|&c| c as f64 / n).collect()
}

/// Expected KL divergence from the truth to the Bayes estimate under
/// `alpha`, when the truth has posterior `Dir(alpha_prime + counts)`.
///
/// Returns `+inf` if some cell has `alpha + # = 0` but `alpha' + # > 0`.
pub fn posterior_kl_loss(alpha_prime: &[f64], alpha: &[f64], counts: &[u64]) -> f64 {
    debug_assert!(alpha_prime.len() == counts.len() && alpha.len() == counts.len());
    let n = counts.iter().sum::<u64>() as f64;
    let psi_total = digamma(n + 2.0);
    let mut loss = 0.0;
    for ((&ap, &a), &c) in alpha_prime.iter().zip(alpha).zip(counts) {
        let c = c as f64;
        let post = ap + c;
        if post == 0.0 {
            continue;
        }
        let est = a + c;
        if est == 0.0 {
            return f64::INFINITY;
        }
        loss += post / (1.0 + n) * (digamma(post + 1.0) - psi_total - log(est / (1.0 + n)));
    }
    loss
}

/// Worst-case posterior loss of the robust estimate, from the two
/// candidate vertex priors: unit mass on a minimum-count cell and on a
/// second-lowest-count cell.
pub fn worst_case_kl(counts: &[u64], alphas: &[f64]) -> f64 {
    let Some(&min) = counts.iter().min() else {
        return 0.0;
    };
    let first = counts.iter().position(|&c| c == min).unwrap();
    let second = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > min)
        .min_by_key(|(k, &c)| (c, *k))
        .map(|(k, _)| k);
    let mut vertex = vec![0.0; counts.len()];
    let mut worst = f64::NEG_INFINITY;
    for k in core::iter::once(first).chain(second) {
        vertex[k] = 1.0;
        worst = worst.max(posterior_kl_loss(&vertex, alphas, counts));
        vertex[k] = 0.0;
    }
    worst
}

/// Largest posterior loss over all vertex priors (unit mass on a single
/// cell) for arbitrary `alpha`, in time linear in the number of cells.
pub fn max_vertex_kl(counts: &[u64], alpha: &[f64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.iter().sum::<u64>() as f64;
    let psi_total = digamma(n + 2.0);
    let term = |c: u64, a: f64, extra: f64| {
        let post = c as f64 + extra;
        if post == 0.0 {
            return 0.0;
        }
        let est = c as f64 + a;
        if est == 0.0 {
            return f64::INFINITY;
        }
        post / (1.0 + n) * (digamma(post + 1.0) - psi_total - log(est / (1.0 + n)))
    };
    let base: f64 = counts.iter().zip(alpha).map(|(&c, &a)| term(c, a, 0.0)).sum();
    counts
        .iter()
        .zip(alpha)
        .map(|(&c, &a)| base - term(c, a, 0.0) + term(c, a, 1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// [`worst_case_kl`] under robust alphas for a partition given as
/// `(count, number of cells with that count)` pairs in increasing count
/// order. Cost is linear in the number of distinct counts.
pub fn worst_case_kl_grouped<I>(classes: I) -> f64
where
    I: IntoIterator<Item = (u64, usize)>,
    I::IntoIter: Clone,
{
    let classes = classes.into_iter();
    let mut iter = classes.clone().filter(|&(_, k)| k > 0);
    let Some((min, ties)) = iter.next() else {
        return 0.0;
    };
    let second = iter.next().map(|(c, _)| c);
    let n = classes.clone().map(|(c, k)| c * k as u64).sum::<u64>() as f64;
    let psi_total = digamma(n + 2.0);
    let min_alpha = 1.0 / ties as f64;
    let alpha_of = |c: u64| if c == min { min_alpha } else { 0.0 };
    // Contribution of one cell with count `c` when its prior mass is `extra`.
    let term = |c: u64, extra: f64| {
        let post = c as f64 + extra;
        if post == 0.0 {
            return 0.0;
        }
        let est = c as f64 + alpha_of(c);
        if est == 0.0 {
            return f64::INFINITY;
        }
        post / (1.0 + n) * (digamma(post + 1.0) - psi_total - log(est / (1.0 + n)))
    };
    let base: f64 = classes
        .filter(|&(_, k)| k > 0)
        .map(|(c, k)| k as f64 * term(c, 0.0))
        .sum();
    let candidate = |c: u64| base - term(c, 0.0) + term(c, 1.0);
    let mut worst = candidate(min);
    if let Some(c) = second {
        worst = worst.max(candidate(c));
    }
    worst
}

/// Sum over `members` of the equilibrium probability that spin `v` is up
/// given the rest of the member.
pub fn rb_up_mass<'a, I>(model: &IsingModel, beta: f64, members: I, v: usize) -> f64
where
    I: IntoIterator<Item = &'a SpinState>,
{
    members
        .into_iter()
        .map(|u| sigmoid(-2.0 * beta * model.local_field(u.as_slice(), v)))
        .sum()
}

/// Rao-Blackwellised probabilities of the `(+, -)` children of a branch on
/// `v`: `(sum_j P(v = ± | u_j) + alpha_±) / (#(parent) + alpha_+ + alpha_-)`,
/// where the sum runs over the members in the parent's subcube.
pub fn rao_blackwell_estimate<'a, I>(
    model: &IsingModel,
    beta: f64,
    members: I,
    v: usize,
    alpha_plus: f64,
    alpha_minus: f64,
) -> Result<[f64; 2]>
where
    I: IntoIterator<Item = &'a SpinState>,
{
    let mut n = 0usize;
    let mut up = 0.0;
    for u in members {
        n += 1;
        up += sigmoid(-2.0 * beta * model.local_field(u.as_slice(), v));
    }
    let denom = n as f64 + alpha_plus + alpha_minus;
    if denom <= 0.0 {
        return Err(Error::invalid("empty parent with zero child pseudocounts"));
    }
    Ok([(up + alpha_plus) / denom, (n as f64 - up + alpha_minus) / denom])
}

/// Count-based binary estimate for spin `v` among `members`, with robust
/// alphas over the two outcomes. Returns `(P(+), P(-))`.
pub fn binary_count_estimate<'a, I>(members: I, v: usize) -> [f64; 2]
where
    I: IntoIterator<Item = &'a SpinState>,
{
    let mut counts = [0u64; 2];
    for u in members {
        counts[usize::from(u.get(v) == Spin::Down)] += 1;
    }
    let alphas = robust_alphas(&counts);
    let q = bayes_estimate(&counts, &alphas);
    [q[0], q[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::Topology;
    use core::f64::consts::LN_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn count_examples() {
        let samples: Vec<SpinState> = ["++-", "+-+", "++-"].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(count(&"++.".parse().unwrap(), &samples), 2);
        assert_eq!(count(&"...".parse().unwrap(), &samples), 3);
        assert_eq!(count(&"..+".parse().unwrap(), &samples), 1);
    }

    #[test]
    fn robust_alpha_examples() {
        assert_eq!(robust_alphas(&[3, 0, 0, 7]), vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(robust_alphas(&[2, 2]), vec![0.5, 0.5]);
        assert_eq!(robust_alphas(&[5]), vec![1.0]);
    }

    #[test]
    fn bayes_examples() {
        let q = bayes_estimate(&[3, 0, 0, 7], &robust_alphas(&[3, 0, 0, 7]));
        let expected = [3.0 / 11.0, 1.0 / 22.0, 1.0 / 22.0, 7.0 / 11.0];
        for (a, b) in q.iter().zip(expected) {
            assert!(close(*a, b, 1e-15));
        }
        assert_eq!(bayes_estimate(&[0, 0], &[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(bayes_estimate(&[2, 2], &[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(histogram_mle(&[3, 0, 1]), vec![0.75, 0.0, 0.25]);
    }

    #[test]
    fn kl_examples() {
        assert!(close(posterior_kl_loss(&[1.0], &[1.0], &[7]), 0.0, 1e-14));
        assert!(close(posterior_kl_loss(&[1.0, 0.0], &[0.5, 0.5], &[0, 0]), LN_2, 1e-14));
        let v = posterior_kl_loss(&[1.0, 0.0], &[0.0, 1.0], &[10, 0]);
        assert!(close(v, log(1.1), 1e-13));
        assert!(close(v, 0.09531, 1e-5));
        assert_eq!(posterior_kl_loss(&[0.0, 1.0], &[1.0, 0.0], &[3, 0]), f64::INFINITY);
    }

    #[test]
    fn worst_case_examples() {
        assert_eq!(worst_case_kl(&[4], &[1.0]), 0.0);
        assert!(close(worst_case_kl(&[0, 0], &[0.5, 0.5]), LN_2, 1e-14));
        assert!(close(worst_case_kl(&[10, 0], &[0.0, 1.0]), log(1.1), 1e-13));
    }

    #[test]
    fn grouped_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let cells = rng.gen_range(1..=8);
            let counts: Vec<u64> = (0..cells).map(|_| rng.gen_range(0..=50)).collect();
            let direct = worst_case_kl(&counts, &robust_alphas(&counts));
            let mut sorted = counts.clone();
            sorted.sort_unstable();
            let mut classes: Vec<(u64, usize)> = Vec::new();
            for c in sorted {
                match classes.last_mut() {
                    Some((last, k)) if *last == c => *k += 1,
                    _ => classes.push((c, 1)),
                }
            }
            let grouped = worst_case_kl_grouped(classes.iter().copied());
            assert!(close(direct, grouped, 1e-12), "{counts:?}: {direct} vs {grouped}");
        }
    }

    #[test]
    fn robust_estimate_covers_unseen_cells() {
        let counts = [0, 5, 0, 9, 0];
        let q = bayes_estimate(&counts, &robust_alphas(&counts));
        assert!(close(q.iter().sum::<f64>(), 1.0, 1e-12));
        let unseen: f64 = counts.iter().zip(&q).filter(|(&c, _)| c == 0).map(|(_, p)| p).sum();
        assert!(close(unseen, 1.0 / 15.0, 1e-15));
    }

    #[test]
    fn rao_blackwell_examples() {
        // h = -atanh(0.6) gives P(+) = 0.8 at beta = 1
        let h = -libm::atanh(0.6);
        let model = IsingModel::new(vec![h], vec![], Topology::Independent).unwrap();
        let members: Vec<SpinState> = ["+", "+", "-", "+"].iter().map(|s| s.parse().unwrap()).collect();
        let q = rao_blackwell_estimate(&model, 1.0, &members, 0, 0.5, 0.5).unwrap();
        assert!(close(q[0], 0.74, 1e-12));
        assert!(close(q[0] + q[1], 1.0, 1e-15));

        let flat = IsingModel::new(vec![0.0], vec![], Topology::Independent).unwrap();
        let q = rao_blackwell_estimate(&flat, 1.0, &members, 0, 0.5, 0.5).unwrap();
        assert_eq!(q, [0.5, 0.5]);

        assert!(rao_blackwell_estimate(&flat, 1.0, &[], 0, 0.0, 0.0).is_err());
    }

    #[test]
    fn binary_count_estimate_examples() {
        let members: Vec<SpinState> = ["+", "+", "+"].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(binary_count_estimate(&members, 0), [0.75, 0.25]);
        assert_eq!(binary_count_estimate(&[], 0), [0.5, 0.5]);
    }
}
