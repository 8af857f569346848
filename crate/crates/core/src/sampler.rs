//! Drawing states with estimated proposal probabilities: the tree-cached
//! sampler and the one-variable-at-a-time constraining process.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{binary_count_estimate, rao_blackwell_estimate, robust_alphas, EstimatorMode};
use crate::heuristic::{Heuristic, HeuristicRequest, SamplePopulation, SeedStream};
use crate::ising::{IsingModel, PartialState, Spin, SpinState};
use crate::math::{derive_seed, log};
use crate::sstree::{BranchChooser, BranchRule, ExtendParams, ExtensionRecord, NodeId, SubcubeTree};

/// Whether the tree survives between draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TreeMode {
    #[default]
    Cached,
    /// A bare root for every draw.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerParams {
    /// Population size per heuristic call.
    pub population_size: usize,
    /// Worst-case KL budget per extension, in nats.
    pub theta: f64,
    pub max_tree_size: usize,
    /// Nodes with at most this many members are not branched.
    pub count_threshold: u64,
    pub beta: f64,
    pub estimator: EstimatorMode,
    pub branch_rule: BranchRule,
    pub seed: u64,
    pub tree_mode: TreeMode,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            population_size: 2000,
            theta: 0.05,
            max_tree_size: 100_000,
            count_threshold: 0,
            beta: 1.0,
            estimator: EstimatorMode::Count,
            branch_rule: BranchRule::Neighbour,
            seed: 0,
            tree_mode: TreeMode::Cached,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::invalid("population size must be at least 1"));
        }
        if !(self.theta > 0.0) {
            return Err(Error::invalid("theta must be positive"));
        }
        if self.max_tree_size < 3 {
            return Err(Error::invalid("maximum tree size must be at least 3"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn extend_params(&self) -> ExtendParams {
        ExtendParams {
            theta: self.theta,
            count_threshold: self.count_threshold,
            beta: self.beta,
            estimator: self.estimator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawResult {
    pub state: SpinState,
    /// Natural log of the estimated proposal probability of `state`.
    pub log_q: f64,
    /// Heuristic populations consumed by this draw.
    pub refresh_calls: usize,
    /// The draw ended at a leaf that could not be extended and was
    /// completed from a single population.
    pub fallback: bool,
}

/// Tree-cached sampler over a fixed model and heuristic.
///
/// Request seeds come from `SeedStream::new(params.seed)`; branch choices
/// and child sampling use a separate ChaCha8 stream seeded with
/// `derive_seed(params.seed, u64::MAX)`.
pub struct StateSpaceSampler<'a, H: Heuristic + ?Sized> {
    model: &'a IsingModel,
    heuristic: &'a H,
    params: SamplerParams,
    chooser: BranchChooser,
    tree: SubcubeTree,
    seeds: SeedStream,
    rng: ChaCha8Rng,
    extensions: Vec<ExtensionRecord>,
    record_extensions: bool,
}

impl<'a, H: Heuristic + ?Sized> StateSpaceSampler<'a, H> {
    pub fn new(model: &'a IsingModel, heuristic: &'a H, params: SamplerParams) -> Result<Self> {
        params.validate()?;
        let chooser = BranchChooser::new(params.branch_rule, model)?;
        Ok(StateSpaceSampler {
            model,
            heuristic,
            params,
            chooser,
            tree: SubcubeTree::new(model.num_spins(), params.max_tree_size)?,
            seeds: SeedStream::new(params.seed),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(params.seed, u64::MAX)),
            extensions: Vec::new(),
            record_extensions: false,
        })
    }

    pub fn params(&self) -> &SamplerParams {
        &self.params
    }

    pub fn tree(&self) -> &SubcubeTree {
        &self.tree
    }

    /// Keep a record of every extension (see [`Self::extensions`]).
    pub fn record_extensions(&mut self, on: bool) {
        self.record_extensions = on;
    }

    pub fn extensions(&self) -> &[ExtensionRecord] {
        &self.extensions
    }

    /// Total heuristic populations requested so far.
    pub fn heuristic_calls(&self) -> u64 {
        self.seeds.issued()
    }

    fn population(&mut self, constraint: &PartialState) -> Result<SamplePopulation> {
        let request = HeuristicRequest::new(constraint.clone(), self.params.population_size, self.seeds.next_seed());
        let population = self.heuristic.run_constrained(self.model, &request)?;
        if population.is_empty() {
            return Err(Error::invalid("heuristic returned an empty population"));
        }
        population.check_constraint(constraint)?;
        Ok(population)
    }

    /// Walks from the root, sampling children at internal nodes and
    /// extending incomplete leaves, until a single state is reached.
    pub fn draw(&mut self) -> Result<DrawResult> {
        if self.params.tree_mode == TreeMode::Fresh {
            self.tree = SubcubeTree::new(self.model.num_spins(), self.params.max_tree_size)?;
        }
        let mut state = self.tree.root_state().clone();
        let mut cur = self.tree.root();
        let mut refresh_calls = 0;
        loop {
            if self.tree.node(cur).is_leaf() {
                if let Some(y) = state.to_state() {
                    return Ok(DrawResult {
                        state: y,
                        log_q: self.tree.node(cur).log_q(),
                        refresh_calls,
                        fallback: false,
                    });
                }
                let population = self.population(&state)?;
                refresh_calls += 1;
                let record = self.tree.extend_with_population(
                    cur,
                    &population,
                    self.model,
                    &self.params.extend_params(),
                    &self.chooser,
                    &mut self.rng,
                )?;
                if self.record_extensions {
                    self.extensions.push(record);
                }
                if self.tree.node(cur).is_leaf() {
                    return self.complete_from_population(cur, state, &population, refresh_calls);
                }
            }
            let v = self.tree.node(cur).branch_variable().unwrap();
            let (next, spin) = self.tree.sample_child(cur, &mut self.rng)?;
            state.set(v, Some(spin));
            cur = next;
        }
    }

    /// Fallback for a leaf that could not be branched: fixes its free
    /// variables one at a time in branch-rule order, each from a robust
    /// count estimate over the members still consistent with the choices
    /// so far.
    fn complete_from_population(
        &mut self,
        leaf: NodeId,
        mut state: PartialState,
        population: &SamplePopulation,
        refresh_calls: usize,
    ) -> Result<DrawResult> {
        let mut log_q = self.tree.node(leaf).log_q();
        let mut members: Vec<&SpinState> = population.states.iter().collect();
        while !state.is_complete() {
            let v = self.chooser.choose(self.model, &state, &mut self.rng)?;
            let q = binary_count_estimate(members.iter().copied(), v);
            let spin = if self.rng.gen::<f64>() < q[0] { Spin::Up } else { Spin::Down };
            log_q += log(if spin == Spin::Up { q[0] } else { q[1] });
            state.set(v, Some(spin));
            members.retain(|u| u.get(v) == spin);
        }
        Ok(DrawResult {
            state: state.to_state().unwrap(),
            log_q,
            refresh_calls,
            fallback: true,
        })
    }

    /// One draw of the basic constraining process with this sampler's
    /// seeds (no tree).
    pub fn draw_scp(&mut self) -> Result<DrawResult> {
        let order = self.chooser.variable_order(self.model, &mut self.rng);
        let (state, log_q) = scp_pass(
            self.model,
            self.heuristic,
            &self.params,
            &order,
            None,
            &mut self.seeds,
            &mut self.rng,
        )?;
        Ok(DrawResult {
            state,
            log_q,
            refresh_calls: order.len(),
            fallback: false,
        })
    }
}

/// Binary estimate of `P(v = +), P(v = -)` from a population already
/// constrained on the earlier variables.
fn single_variable_estimate(
    model: &IsingModel,
    params: &SamplerParams,
    population: &SamplePopulation,
    v: usize,
) -> Result<[f64; 2]> {
    match params.estimator {
        EstimatorMode::Count => Ok(binary_count_estimate(&population.states, v)),
        EstimatorMode::RaoBlackwell => {
            let up = population.states.iter().filter(|u| u.get(v) == Spin::Up).count() as u64;
            let counts = [up, population.len() as u64 - up];
            let alphas = robust_alphas(&counts);
            rao_blackwell_estimate(model, params.beta, &population.states, v, alphas[0], alphas[1])
        }
    }
}

/// One pass of the constraining process over `order`. With `target` the
/// pass follows the target's values and returns its log-probability;
/// otherwise each variable is sampled from its estimate. Every step draws
/// a fresh population constrained on the variables fixed so far.
pub fn scp_pass<H: Heuristic + ?Sized, R: Rng + ?Sized>(
    model: &IsingModel,
    heuristic: &H,
    params: &SamplerParams,
    order: &[usize],
    target: Option<&SpinState>,
    seeds: &mut SeedStream,
    rng: &mut R,
) -> Result<(SpinState, f64)> {
    let m = model.num_spins();
    if order.len() != m {
        return Err(Error::invalid("variable order must cover every spin"));
    }
    let mut state = PartialState::free(m);
    let mut log_q = 0.0;
    for &v in order {
        let request = HeuristicRequest::new(state.clone(), params.population_size, seeds.next_seed());
        let population = heuristic.run_constrained(model, &request)?;
        population.check_constraint(&state)?;
        let q = single_variable_estimate(model, params, &population, v)?;
        let spin = match target {
            Some(t) => t.get(v),
            None => {
                if rng.gen::<f64>() < q[0] {
                    Spin::Up
                } else {
                    Spin::Down
                }
            }
        };
        log_q += log(if spin == Spin::Up { q[0] } else { q[1] });
        state.set(v, Some(spin));
    }
    Ok((state.to_state().unwrap(), log_q))
}

/// Independent draws of the basic constraining process: `m` populations
/// per draw, variable order from the branch rule.
pub fn scp_basic<H: Heuristic + ?Sized, R: Rng + ?Sized>(
    model: &IsingModel,
    heuristic: &H,
    params: &SamplerParams,
    seeds: &mut SeedStream,
    rng: &mut R,
) -> Result<DrawResult> {
    params.validate()?;
    let chooser = BranchChooser::new(params.branch_rule, model)?;
    let order = chooser.variable_order(model, rng);
    let (state, log_q) = scp_pass(model, heuristic, params, &order, None, seeds, rng)?;
    Ok(DrawResult {
        state,
        log_q,
        refresh_calls: order.len(),
        fallback: false,
    })
}
