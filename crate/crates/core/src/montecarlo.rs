//! Importance-sampling estimates from scored draws, weight diagnostics, and
//! the Metropolis-Hastings kernel built on the constraining process.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::heuristic::{Heuristic, SeedStream};
use crate::ising::{IsingModel, SpinState};
use crate::math::{exp, log, sqrt};
use crate::sampler::{scp_pass, DrawResult, SamplerParams};
use crate::sstree::BranchChooser;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub state: SpinState,
    pub log_q: f64,
    /// `-beta E(state)`.
    pub log_pi_tilde: f64,
    /// `log_pi_tilde - log_q`.
    pub log_w: f64,
}

/// Unnormalised log importance weights `-beta E(y) - log q(y)`.
pub fn weigh(draws: &[DrawResult], model: &IsingModel, beta: f64) -> Result<Vec<WeightedSample>> {
    draws
        .iter()
        .map(|d| {
            let log_pi_tilde = model.log_pi_tilde(&d.state, beta)?;
            let log_w = log_pi_tilde - d.log_q;
            if !log_w.is_finite() {
                return Err(Error::invalid("draw has a non-finite importance weight"));
            }
            Ok(WeightedSample {
                state: d.state.clone(),
                log_q: d.log_q,
                log_pi_tilde,
                log_w,
            })
        })
        .collect()
}

fn max_log_w(samples: &[WeightedSample]) -> f64 {
    samples.iter().map(|s| s.log_w).fold(f64::NEG_INFINITY, f64::max)
}

/// Self-normalised estimate `sum w h / sum w`.
pub fn estimate_expectation<F>(samples: &[WeightedSample], h: F) -> Result<f64>
where
    F: Fn(&SpinState) -> f64,
{
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let shift = max_log_w(samples);
    let mut num = 0.0;
    let mut den = 0.0;
    for s in samples {
        let w = exp(s.log_w - shift);
        num += w * h(&s.state);
        den += w;
    }
    Ok(num / den)
}

/// Partition function estimate: mean unnormalised weight and its standard
/// error, kept in the log domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogZEstimate {
    /// `log` of the mean weight. `exp(log_z)` is unbiased for `Z`.
    pub log_z: f64,
    /// `log` of the standard error of the mean weight (`-inf` if zero).
    pub log_std_error: f64,
    /// Standard error divided by the mean weight.
    pub relative_std_error: f64,
    pub samples: usize,
}

pub fn estimate_logz(samples: &[WeightedSample]) -> Result<LogZEstimate> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples for an error bar"));
    }
    let n = samples.len() as f64;
    let shift = max_log_w(samples);
    let w: Vec<f64> = samples.iter().map(|s| exp(s.log_w - shift)).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let se = sqrt(var / n);
    Ok(LogZEstimate {
        log_z: shift + log(mean),
        log_std_error: shift + log(se),
        relative_std_error: se / mean,
        samples: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    /// `Var[w] / mean(w)^2` with the population variance.
    pub variance: f64,
    /// Kish effective sample size `n / (1 + variance)`.
    pub ess: f64,
}

pub fn weight_diagnostics(samples: &[WeightedSample]) -> Result<WeightDiagnostics> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let n = samples.len() as f64;
    let shift = max_log_w(samples);
    let w: Vec<f64> = samples.iter().map(|s| exp(s.log_w - shift)).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let variance = var / (mean * mean);
    Ok(WeightDiagnostics {
        variance,
        ess: n / (1.0 + variance),
    })
}

/// Chain state of the Metropolis-Hastings kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcState {
    pub state: SpinState,
    pub log_pi_tilde: f64,
    pub steps: u64,
    pub accepted: u64,
}

impl McmcState {
    pub fn new(model: &IsingModel, state: SpinState, beta: f64) -> Result<Self> {
        let log_pi_tilde = model.log_pi_tilde(&state, beta)?;
        Ok(McmcState {
            state,
            log_pi_tilde,
            steps: 0,
            accepted: 0,
        })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// `min(1, pi(y) q(x) / (pi(x) q(y)))` from logs.
pub fn acceptance_probability(log_pi_x: f64, log_q_x: f64, log_pi_y: f64, log_q_y: f64) -> f64 {
    let log_ratio = (log_pi_y - log_pi_x) + (log_q_x - log_q_y);
    if log_ratio >= 0.0 {
        1.0
    } else {
        exp(log_ratio)
    }
}

/// One move of the kernel: a forward constraining pass proposes `y` with
/// estimated probability `q(y)`, a reverse pass over the same variable
/// order scores the current state `x` with fresh populations, and `y` is
/// accepted with [`acceptance_probability`].
///
/// Heuristics that depend on the current state are refused.
pub fn mcmc_step<H: Heuristic + ?Sized, R: Rng + ?Sized>(
    mcmc: &mut McmcState,
    model: &IsingModel,
    heuristic: &H,
    params: &SamplerParams,
    chooser: &BranchChooser,
    seeds: &mut SeedStream,
    rng: &mut R,
) -> Result<bool> {
    if heuristic.state_dependent() {
        return Err(Error::Unsupported(
            "the reverse pass is only defined for state-independent heuristics".into(),
        ));
    }
    let order = chooser.variable_order(model, rng);
    let (y, log_q_y) = scp_pass(model, heuristic, params, &order, None, seeds, rng)?;
    let (_, log_q_x) = scp_pass(model, heuristic, params, &order, Some(&mcmc.state), seeds, rng)?;
    let log_pi_y = model.log_pi_tilde(&y, params.beta)?;
    let alpha = acceptance_probability(mcmc.log_pi_tilde, log_q_x, log_pi_y, log_q_y);
    mcmc.steps += 1;
    let accept = rng.gen::<f64>() < alpha;
    if accept {
        mcmc.state = y;
        mcmc.log_pi_tilde = log_pi_y;
        mcmc.accepted += 1;
    }
    Ok(accept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::heuristic::{ExactSampler, HeuristicRequest, SamplePopulation};
    use crate::ising::{Family, Topology};
    use crate::sstree::BranchRule;
    use core::f64::consts::LN_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(log_w: f64) -> WeightedSample {
        WeightedSample {
            state: SpinState::new(Vec::new()),
            log_q: 0.0,
            log_pi_tilde: log_w,
            log_w,
        }
    }

    #[test]
    fn exact_proposal_gives_constant_weights() {
        let model = IsingModel::generate(Family::Chain { m: 6 }, 2).unwrap();
        let beta = 1.0;
        let e = model.enumerate(beta).unwrap();
        let draws: Vec<DrawResult> = e
            .states()
            .take(20)
            .map(|(y, p)| DrawResult {
                state: y,
                log_q: log(p),
                refresh_calls: 0,
                fallback: false,
            })
            .collect();
        let ws = weigh(&draws, &model, beta).unwrap();
        for w in &ws {
            assert!((w.log_w - e.log_z).abs() < 1e-10);
        }
        let est = estimate_logz(&ws).unwrap();
        assert!((est.log_z - e.log_z).abs() < 1e-10);
        assert!(est.relative_std_error < 1e-7);
        let d = weight_diagnostics(&ws).unwrap();
        assert!(d.variance < 1e-12);
        assert!((d.ess - 20.0).abs() < 1e-9);
    }

    #[test]
    fn infinite_temperature_uniform_proposal() {
        let model = IsingModel::generate(Family::Sk { m: 5 }, 2).unwrap();
        let draws: Vec<DrawResult> = (0..8u64)
            .map(|k| DrawResult {
                state: SpinState::from_index(k * 3, 5),
                log_q: -5.0 * LN_2,
                refresh_calls: 0,
                fallback: false,
            })
            .collect();
        for w in weigh(&draws, &model, 0.0).unwrap() {
            assert!((w.log_w - 5.0 * LN_2).abs() < 1e-14);
        }
    }

    #[test]
    fn expectation_examples() {
        let ws: Vec<WeightedSample> = [0.3, -2.0, 1.0].iter().map(|&l| sample(l)).collect();
        assert_eq!(estimate_expectation(&ws, |_| 1.0).unwrap(), 1.0);
        let one = [sample(4.0)];
        assert_eq!(estimate_expectation(&one, |_| 2.5).unwrap(), 2.5);
        assert!(estimate_expectation(&[], |_| 1.0).is_err());
    }

    #[test]
    fn logz_of_constant_weights() {
        let ws: Vec<WeightedSample> = (0..5).map(|_| sample(1.7)).collect();
        let est = estimate_logz(&ws).unwrap();
        assert!((est.log_z - 1.7).abs() < 1e-15);
        assert_eq!(est.log_std_error, f64::NEG_INFINITY);
        assert!(estimate_logz(&ws[..1]).is_err());
    }

    #[test]
    fn diagnostics_limit_case() {
        let ws = [sample(0.0), sample(-700.0)];
        let d = weight_diagnostics(&ws).unwrap();
        assert!((d.variance - 1.0).abs() < 1e-12);
        assert!((d.ess - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_probability(-1.0, -2.0, -1.0, -2.0), 1.0);
        let a = acceptance_probability(0.0, log(0.25), log(2.0), 0.0);
        assert!((a - 0.5).abs() < 1e-15);
    }

    struct StateDependent;

    impl Heuristic for StateDependent {
        fn run_constrained(&self, _: &IsingModel, _: &HeuristicRequest) -> Result<SamplePopulation> {
            unreachable!()
        }

        fn state_dependent(&self) -> bool {
            true
        }
    }

    #[test]
    fn state_dependent_heuristics_are_refused() {
        let model = IsingModel::new(vec![0.0; 2], vec![], Topology::Independent).unwrap();
        let params = SamplerParams::default();
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut mcmc = McmcState::new(&model, "++".parse().unwrap(), 1.0).unwrap();
        let mut seeds = SeedStream::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = mcmc_step(&mut mcmc, &model, &StateDependent, &params, &chooser, &mut seeds, &mut rng);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn mcmc_with_exact_proposal_mostly_accepts() {
        let model = IsingModel::generate(Family::Chain { m: 4 }, 6).unwrap();
        let params = SamplerParams {
            population_size: 200,
            ..SamplerParams::default()
        };
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut mcmc = McmcState::new(&model, "++++".parse().unwrap(), 1.0).unwrap();
        let mut seeds = SeedStream::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            mcmc_step(&mut mcmc, &model, &ExactSampler::new(1.0), &params, &chooser, &mut seeds, &mut rng).unwrap();
        }
        assert_eq!(mcmc.steps, 300);
        assert!(mcmc.acceptance_rate() > 0.9, "{}", mcmc.acceptance_rate());
        let recomputed = model.log_pi_tilde(&mcmc.state, 1.0).unwrap();
        assert_eq!(recomputed, mcmc.log_pi_tilde);
    }
}
