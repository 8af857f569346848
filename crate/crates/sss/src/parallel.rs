//! Population generation across threads.

use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;
use sss_core::heuristic::Heuristic;
use sss_core::{HeuristicRequest, IsingModel, MemberRun, SamplePopulation};

/// Runs the members of each population in parallel. Member seeds do not
/// depend on scheduling, so the result equals the sequential one.
pub struct Threaded<H> {
    inner: H,
    pool: Option<Arc<ThreadPool>>,
}

impl<H: MemberRun> Threaded<H> {
    /// Uses rayon's global pool.
    pub fn new(inner: H) -> Self {
        Threaded { inner, pool: None }
    }

    pub fn with_pool(inner: H, pool: Arc<ThreadPool>) -> Self {
        Threaded { inner, pool: Some(pool) }
    }

    pub fn inner(&self) -> &H {
        &self.inner
    }
}

impl<H: MemberRun> Heuristic for Threaded<H> {
    fn run_constrained(&self, model: &IsingModel, request: &HeuristicRequest) -> sss_core::Result<SamplePopulation> {
        request.validate(model)?;
        self.inner.supports(model)?;
        let run = || {
            (0..request.population_size)
                .into_par_iter()
                .map(|j| self.inner.run_member(model, &request.constraint, request.member_seed(j)))
                .collect()
        };
        let states = match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        };
        Ok(SamplePopulation { states })
    }
}
