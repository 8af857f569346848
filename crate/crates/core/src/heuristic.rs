//! Constrained proposal processes: given a clamping condition, return a
//! population of full states drawn from the heuristic's conditional law.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ising::{IsingModel, PartialState, Spin, SpinState};
use crate::math::{derive_seed, exp, log_add_exp, sigmoid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeuristicRequest {
    pub constraint: PartialState,
    pub population_size: usize,
    pub seed: u64,
}

impl HeuristicRequest {
    pub fn new(constraint: PartialState, population_size: usize, seed: u64) -> Self {
        HeuristicRequest {
            constraint,
            population_size,
            seed,
        }
    }

    pub fn validate(&self, model: &IsingModel) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::invalid("population size must be at least 1"));
        }
        if self.constraint.len() != model.num_spins() {
            return Err(Error::invalid(format!(
                "constraint has {} spins, model has {}",
                self.constraint.len(),
                model.num_spins()
            )));
        }
        Ok(())
    }

    /// Seed of population member `j`.
    #[inline]
    pub fn member_seed(&self, j: usize) -> u64 {
        derive_seed(self.seed, j as u64)
    }
}

/// Request seeds derived from a master seed and a running counter, so the
/// `k`-th request of a run always gets `derive_seed(master, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream { master, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(self.master, self.counter);
        self.counter += 1;
        s
    }

    /// Number of seeds handed out so far.
    pub fn issued(&self) -> u64 {
        self.counter
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePopulation {
    pub states: Vec<SpinState>,
}

impl SamplePopulation {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of members lying in the subcube of `pattern`.
    pub fn count(&self, pattern: &PartialState) -> usize {
        self.states.iter().filter(|s| pattern.matches(s)).count()
    }

    /// Fails unless every member agrees with `constraint`.
    pub fn check_constraint(&self, constraint: &PartialState) -> Result<()> {
        match self.states.iter().position(|s| !constraint.matches(s)) {
            None => Ok(()),
            Some(k) => Err(Error::invalid(format!(
                "heuristic returned member {k} violating its clamping condition"
            ))),
        }
    }
}

/// A constrained stochastic heuristic. Members of one population need not
/// be independent.
pub trait Heuristic {
    fn run_constrained(&self, model: &IsingModel, request: &HeuristicRequest) -> Result<SamplePopulation>;

    /// True if the heuristic's output depends on a current state (needed
    /// for the reverse pass of the MCMC kernel, which is unsupported).
    fn state_dependent(&self) -> bool {
        false
    }
}

/// A heuristic whose population members are independent runs, each
/// determined by its own seed. Any `MemberRun` is a [`Heuristic`] that
/// runs member `j` with `request.member_seed(j)`, so sequential and
/// parallel drivers produce identical populations.
pub trait MemberRun: Sync {
    /// Checks that the heuristic can handle `model`.
    fn supports(&self, _model: &IsingModel) -> Result<()> {
        Ok(())
    }

    fn run_member(&self, model: &IsingModel, constraint: &PartialState, seed: u64) -> SpinState;
}

impl<T: MemberRun> Heuristic for T {
    fn run_constrained(&self, model: &IsingModel, request: &HeuristicRequest) -> Result<SamplePopulation> {
        request.validate(model)?;
        self.supports(model)?;
        let states = (0..request.population_size)
            .map(|j| self.run_member(model, &request.constraint, request.member_seed(j)))
            .collect();
        Ok(SamplePopulation { states })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    Sequential,
    RandomPermutation,
}

/// Linear inverse-temperature schedule. Step `k` of `n_steps` runs
/// `sweeps_per_step` heat-bath sweeps at
/// `beta_start + (beta_end - beta_start) k / (n_steps - 1)`; a single step
/// runs at `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_steps: usize,
    pub sweeps_per_step: usize,
    pub order: SweepOrder,
}

impl SaSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, n_steps: usize, sweeps_per_step: usize) -> Self {
        SaSchedule {
            beta_start,
            beta_end,
            n_steps,
            sweeps_per_step,
            order: SweepOrder::RandomPermutation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start.is_finite() && self.beta_end.is_finite()) {
            return Err(Error::invalid("schedule temperatures must be finite"));
        }
        if self.beta_start < 0.0 || self.beta_start > self.beta_end {
            return Err(Error::invalid("schedule needs 0 <= beta_start <= beta_end"));
        }
        Ok(())
    }

    pub fn beta_at(&self, step: usize) -> f64 {
        if self.n_steps <= 1 {
            return self.beta_end;
        }
        let t = step as f64 / (self.n_steps - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t
    }
}

/// Simulated annealing with hard clamping and heat-bath single-site moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedAnnealing {
    pub schedule: SaSchedule,
}

impl SimulatedAnnealing {
    pub fn new(schedule: SaSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(SimulatedAnnealing { schedule })
    }
}

impl MemberRun for SimulatedAnnealing {
    fn run_member(&self, model: &IsingModel, constraint: &PartialState, seed: u64) -> SpinState {
        sa_sample(model, constraint, &self.schedule, seed)
    }
}

/// One annealing run: clamped spins fixed from the start, free spins
/// initialised uniformly at random, then heat-bath sweeps over the free
/// spins only.
pub fn sa_sample(model: &IsingModel, constraint: &PartialState, schedule: &SaSchedule, seed: u64) -> SpinState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<i8> = constraint
        .values()
        .iter()
        .map(|v| match v {
            Some(s) => *s as i8,
            None => {
                if rng.gen::<bool>() {
                    1
                } else {
                    -1
                }
            }
        })
        .collect();
    let mut free: Vec<usize> = constraint.free_variables().collect();
    for step in 0..schedule.n_steps {
        let beta = schedule.beta_at(step);
        for _ in 0..schedule.sweeps_per_step {
            if schedule.order == SweepOrder::RandomPermutation {
                free.shuffle(&mut rng);
            }
            for &i in &free {
                let lambda = model.local_field_i8(&y, i);
                let p_up = sigmoid(-2.0 * beta * lambda);
                y[i] = if rng.gen::<f64>() < p_up { 1 } else { -1 };
            }
        }
    }
    SpinState::new(y.into_iter().map(|s| Spin::from_bool(s > 0)).collect())
}

/// Exact conditional sampler for models whose couplings only join
/// consecutive spins (chains and independent spins), by forward filtering
/// and backward sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactSampler {
    pub beta: f64,
}

impl ExactSampler {
    pub fn new(beta: f64) -> Self {
        ExactSampler { beta }
    }
}

impl MemberRun for ExactSampler {
    fn supports(&self, model: &IsingModel) -> Result<()> {
        model
            .chain_bonds()
            .map(|_| ())
            .ok_or_else(|| Error::invalid("exact sampler needs an independent or chain model"))
    }

    fn run_member(&self, model: &IsingModel, constraint: &PartialState, seed: u64) -> SpinState {
        let bonds = model.chain_bonds().expect("checked by supports");
        exact_chain_sample(model.fields(), &bonds, constraint, self.beta, seed)
    }
}

fn exact_chain_sample(fields: &[f64], bonds: &[f64], constraint: &PartialState, beta: f64, seed: u64) -> SpinState {
    const SPINS: [f64; 2] = [1.0, -1.0];
    let m = fields.len();
    let allowed = |k: usize, slot: usize| match constraint.get(k) {
        None => true,
        Some(s) => (s == Spin::Up) == (slot == 0),
    };
    // forward[k][slot]: log-weight of spins 0..=k with spin k in `slot`.
    let mut forward = vec![[f64::NEG_INFINITY; 2]; m];
    for k in 0..m {
        for slot in 0..2 {
            if !allowed(k, slot) {
                continue;
            }
            let s = SPINS[slot];
            let own = -beta * fields[k] * s;
            forward[k][slot] = if k == 0 {
                own
            } else {
                let j = bonds[k - 1];
                let up = forward[k - 1][0] - beta * j * s;
                let down = forward[k - 1][1] + beta * j * s;
                own + log_add_exp(up, down)
            };
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spins = vec![Spin::Down; m];
    let mut next: Option<f64> = None;
    for k in (0..m).rev() {
        let mut logits = forward[k];
        if let Some(y_next) = next {
            let j = bonds[k];
            logits[0] -= beta * j * y_next;
            logits[1] += beta * j * y_next;
        }
        let p_up = if logits[0] == f64::NEG_INFINITY {
            0.0
        } else if logits[1] == f64::NEG_INFINITY {
            1.0
        } else {
            1.0 / (1.0 + exp(logits[1] - logits[0]))
        };
        let up = rng.gen::<f64>() < p_up;
        spins[k] = Spin::from_bool(up);
        next = Some(if up { 1.0 } else { -1.0 });
    }
    SpinState::new(spins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::{Coupling, Family, Topology};

    fn request(constraint: &str, n: usize, seed: u64) -> HeuristicRequest {
        HeuristicRequest::new(constraint.parse().unwrap(), n, seed)
    }

    #[test]
    fn unconstrained_and_clamped_populations() {
        let model = IsingModel::generate(Family::Chain { m: 6 }, 1).unwrap();
        let sa = SimulatedAnnealing::new(SaSchedule::linear(0.1, 1.0, 10, 1)).unwrap();
        let pop = sa.run_constrained(&model, &request("......", 5, 3)).unwrap();
        assert_eq!(pop.len(), 5);
        assert!(pop.states.iter().all(|s| s.len() == 6));

        let clamp = request("...+..", 5, 3);
        for h in [&sa as &dyn Heuristic, &ExactSampler::new(1.0)] {
            let pop = h.run_constrained(&model, &clamp).unwrap();
            assert!(pop.states.iter().all(|s| s.get(3) == Spin::Up));
            pop.check_constraint(&clamp.constraint).unwrap();
        }
    }

    #[test]
    fn requests_are_validated() {
        let model = IsingModel::generate(Family::Chain { m: 3 }, 1).unwrap();
        let sa = SimulatedAnnealing::new(SaSchedule::linear(0.1, 1.0, 2, 1)).unwrap();
        assert!(sa.run_constrained(&model, &request("..", 2, 0)).is_err());
        assert!(sa.run_constrained(&model, &request("...", 0, 0)).is_err());
        assert!(SimulatedAnnealing::new(SaSchedule::linear(1.0, 0.5, 2, 1)).is_err());
        let sk = IsingModel::generate(Family::Sk { m: 3 }, 1).unwrap();
        assert!(ExactSampler::new(1.0).run_constrained(&sk, &request("...", 2, 0)).is_err());
    }

    #[test]
    fn populations_are_seed_deterministic() {
        let model = IsingModel::generate(Family::Sk { m: 10 }, 2).unwrap();
        let sa = SimulatedAnnealing::new(SaSchedule::linear(0.1, 1.6, 5, 2)).unwrap();
        let a = sa.run_constrained(&model, &request("+.........", 20, 9)).unwrap();
        let b = sa.run_constrained(&model, &request("+.........", 20, 9)).unwrap();
        let c = sa.run_constrained(&model, &request("+.........", 20, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_schedule_is_uniform() {
        let model = IsingModel::new(vec![5.0; 3], vec![], Topology::Independent).unwrap();
        let schedule = SaSchedule::linear(1.0, 1.0, 0, 0);
        let n = 40_000;
        let c: PartialState = "-..".parse().unwrap();
        let ups = (0..n)
            .filter(|&s| sa_sample(&model, &c, &schedule, s).get(1) == Spin::Up)
            .count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ups as f64 - n as f64 / 2.0).abs() < 4.0 * sigma);
    }

    #[test]
    fn schedule_interpolates_linearly() {
        let s = SaSchedule::linear(0.1, 1.0, 10, 1);
        assert!((s.beta_at(0) - 0.1).abs() < 1e-15);
        assert!((s.beta_at(9) - 1.0).abs() < 1e-15);
        assert!((s.beta_at(3) - 0.4).abs() < 1e-12);
        assert_eq!(SaSchedule::linear(0.1, 1.0, 1, 1).beta_at(0), 1.0);
    }

    #[test]
    fn single_free_spin_reaches_local_equilibrium() {
        // spin 1 is free, its neighbours are clamped
        let model = IsingModel::new(
            vec![0.2, -0.4, 0.1],
            vec![Coupling { i: 0, j: 1, value: 0.7 }, Coupling { i: 1, j: 2, value: -0.3 }],
            Topology::Chain,
        )
        .unwrap();
        let c: PartialState = "+.-".parse().unwrap();
        let beta = 1.0;
        let schedule = SaSchedule::linear(beta, beta, 100, 1);
        let n = 100_000u64;
        let ups = (0..n)
            .filter(|&s| sa_sample(&model, &c, &schedule, s).get(1) == Spin::Up)
            .count();
        let reference: SpinState = "++-".parse().unwrap();
        let p = model.local_conditional(&reference, 1, Spin::Up, beta);
        let freq = ups as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * sigma, "freq={freq} p={p}");
        assert!((freq - p).abs() < 0.02);
    }

    #[test]
    fn exact_independent_two_spins_uniform() {
        let model = IsingModel::new(vec![0.0, 0.0], vec![], Topology::Independent).unwrap();
        let pop = ExactSampler::new(1.0)
            .run_constrained(&model, &request("..", 100_000, 5))
            .unwrap();
        let n = pop.len() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        for cell in ["++", "+-", "-+", "--"] {
            let k = pop.count(&cell.parse().unwrap()) as f64;
            assert!((k - n / 4.0).abs() < 4.0 * sigma, "{cell}: {k}");
        }
    }

    #[test]
    fn exact_chain_matches_enumeration() {
        let chain = IsingModel::generate(Family::Chain { m: 8 }, 4).unwrap();
        let fields: Vec<f64> = (0..8).map(|k| 0.3 * (k as f64 - 3.5) / 3.5).collect();
        let model = IsingModel::new(fields, chain.couplings().to_vec(), Topology::Chain).unwrap();
        let beta = 1.0;
        let exact = model.enumerate(beta).unwrap();
        let n = 100_000;
        let pop = ExactSampler::new(beta)
            .run_constrained(&model, &request("........", n, 77))
            .unwrap();
        let mut hist = vec![0usize; 256];
        for s in &pop.states {
            hist[s.index() as usize] += 1;
        }
        for (k, &p) in exact.probabilities.iter().enumerate() {
            let expected = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!((hist[k] as f64 - expected).abs() < 4.0 * sigma, "cell {k}");
        }
    }

    #[test]
    fn exact_chain_respects_clamps_conditionally() {
        let model = IsingModel::generate(Family::Chain { m: 4 }, 8).unwrap();
        let beta = 1.0;
        let exact = model.enumerate(beta).unwrap();
        let c: PartialState = ".-.+".parse().unwrap();
        let mass: f64 = exact.states().filter(|(y, _)| c.matches(y)).map(|(_, p)| p).sum();
        let n = 50_000;
        let pop = ExactSampler::new(beta)
            .run_constrained(&model, &HeuristicRequest::new(c.clone(), n, 1))
            .unwrap();
        pop.check_constraint(&c).unwrap();
        for (y, p) in exact.states().filter(|(y, _)| c.matches(y)) {
            let q = p / mass;
            let k = pop.states.iter().filter(|s| **s == y).count() as f64;
            let sigma = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((k - n as f64 * q).abs() < 4.0 * sigma);
        }
    }
}
