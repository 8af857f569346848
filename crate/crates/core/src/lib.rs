//! Importance sampling and MCMC driven by arbitrary constrained heuristics
//! over binary (Ising) state spaces.
//!
//! A heuristic is run repeatedly with some spins clamped. The resulting
//! populations are summarised by robust Bayesian estimates over a subcube
//! tree that grows on demand and is kept under a node budget. Every drawn
//! state comes with the log of its estimated proposal probability, which is
//! all an importance sampler or a Metropolis-Hastings acceptance test needs.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod error;
pub mod estimator;
pub mod heuristic;
pub mod ising;
pub mod math;
pub mod montecarlo;
pub mod sampler;
pub mod sstree;

pub use error::{Error, Result};
pub use estimator::EstimatorMode;
pub use heuristic::{
    ExactSampler, Heuristic, HeuristicRequest, MemberRun, SamplePopulation, SaSchedule,
    SeedStream, SimulatedAnnealing, SweepOrder,
};
pub use ising::{Family, IsingModel, PartialState, Spin, SpinState, Topology};
pub use montecarlo::{McmcState, WeightedSample};
pub use sampler::{DrawResult, SamplerParams, StateSpaceSampler, TreeMode};
pub use sstree::{BranchChooser, BranchRule, NodeId, SubcubeTree};
