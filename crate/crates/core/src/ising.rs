//! Ising models: representation, energies, single-site conditionals,
//! reproducible problem generators and exact reference computations.
//!
//! Energy convention: `E(y) = sum_i h_i y_i + sum_{(i,j)} J_ij y_i y_j` and
//! the target is `pi(y) ∝ exp(-beta E(y))`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{exp, log, log_2cosh, log_add_exp, log_sum_exp, sigmoid};

/// Largest model that [`IsingModel::enumerate`] accepts.
pub const MAX_ENUMERATION_SPINS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(i8)]
pub enum Spin {
    Down = -1,
    Up = 1,
}

impl Spin {
    #[inline]
    pub fn value(self) -> f64 {
        self as i8 as f64
    }

    #[inline]
    pub fn flipped(self) -> Spin {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }

    #[inline]
    pub fn from_bool(up: bool) -> Spin {
        if up {
            Spin::Up
        } else {
            Spin::Down
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Spin::Up => '+',
            Spin::Down => '-',
        }
    }
}

/// A full assignment of every spin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinState(Vec<Spin>);

impl SpinState {
    pub fn new(spins: Vec<Spin>) -> Self {
        SpinState(spins)
    }

    pub fn all(m: usize, spin: Spin) -> Self {
        SpinState(vec![spin; m])
    }

    /// State whose spin `i` is up iff bit `i` of `index` is set.
    pub fn from_index(index: u64, m: usize) -> Self {
        SpinState((0..m).map(|i| Spin::from_bool(index >> i & 1 == 1)).collect())
    }

    /// Inverse of [`SpinState::from_index`]; only meaningful for `m <= 64`.
    pub fn index(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Spin::Up)
            .fold(0u64, |acc, (i, _)| acc | 1 << i)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Spin {
        self.0[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, spin: Spin) {
        self.0[i] = spin;
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] = self.0[i].flipped();
    }

    pub fn as_slice(&self) -> &[Spin] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Spin> {
        self.0
    }
}

impl fmt::Display for SpinState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{}", s.symbol())?;
        }
        Ok(())
    }
}

impl FromStr for SpinState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '+' => Ok(Spin::Up),
                '-' => Ok(Spin::Down),
                other => Err(Error::invalid(format!("bad spin symbol {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(SpinState)
    }
}

/// An element of `{+, -, free}^m`, identifying the subcube of all full
/// states that agree with its assigned coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartialState {
    values: Vec<Option<Spin>>,
    assigned: usize,
}

impl PartialState {
    pub fn free(m: usize) -> Self {
        PartialState {
            values: vec![None; m],
            assigned: 0,
        }
    }

    pub fn from_values(values: Vec<Option<Spin>>) -> Self {
        let assigned = values.iter().filter(|v| v.is_some()).count();
        PartialState { values, assigned }
    }

    pub fn from_state(state: &SpinState) -> Self {
        PartialState::from_values(state.as_slice().iter().map(|&s| Some(s)).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Option<Spin> {
        self.values[i]
    }

    pub fn set(&mut self, i: usize, value: Option<Spin>) {
        match (self.values[i].is_some(), value.is_some()) {
            (false, true) => self.assigned += 1,
            (true, false) => self.assigned -= 1,
            _ => {}
        }
        self.values[i] = value;
    }

    #[inline]
    pub fn num_assigned(&self) -> usize {
        self.assigned
    }

    #[inline]
    pub fn num_free(&self) -> usize {
        self.values.len() - self.assigned
    }

    #[inline]
    pub fn is_complete(&self) -> bool {
        self.assigned == self.values.len()
    }

    pub fn values(&self) -> &[Option<Spin>] {
        &self.values
    }

    pub fn free_variables(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
    }

    /// True if `state` lies in this subcube.
    pub fn matches(&self, state: &SpinState) -> bool {
        self.values
            .iter()
            .zip(state.as_slice())
            .all(|(v, s)| v.is_none_or(|v| v == *s))
    }

    /// The single state of a complete partial state.
    pub fn to_state(&self) -> Option<SpinState> {
        self.values.iter().copied().collect::<Option<Vec<_>>>().map(SpinState)
    }
}

impl fmt::Display for PartialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.values {
            let c = v.map_or('.', Spin::symbol);
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for PartialState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '+' => Ok(Some(Spin::Up)),
                '-' => Ok(Some(Spin::Down)),
                '.' | '_' => Ok(None),
                other => Err(Error::invalid(format!("bad partial-state symbol {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PartialState::from_values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Independent,
    /// Open chain: couplings only between `i` and `i + 1`.
    Chain,
    Complete,
    /// Nearest-neighbour lattice; spin `(x, y, z)` has index `x + lx (y + ly z)`.
    Grid {
        lx: usize,
        ly: usize,
        lz: usize,
        periodic: bool,
    },
    /// Any other coupling graph.
    Sparse,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Independent => write!(f, "independent"),
            Topology::Chain => write!(f, "chain"),
            Topology::Complete => write!(f, "complete"),
            Topology::Grid { lx, ly, lz, periodic } => {
                write!(f, "grid3d {lx} {ly} {lz} {}", if *periodic { "periodic" } else { "open" })
            }
            Topology::Sparse => write!(f, "sparse"),
        }
    }
}

/// Problem families with reproducible random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `h_i ~ N(0, 1)`, no couplings.
    Independent { m: usize },
    /// Open chain, `J ~ N(0, 1)`, zero field.
    Chain { m: usize },
    /// Complete graph, `J ~ N(0, 1/m)` (standard deviation `1/sqrt(m)`), zero field.
    Sk { m: usize },
    /// Cubic lattice, `J ~ N(0, 1)`, zero field.
    Grid3d { lx: usize, ly: usize, lz: usize, periodic: bool },
}

/// Compressed adjacency for fast local-field evaluation.
#[derive(Debug, Clone, PartialEq)]
struct Adjacency {
    offsets: Vec<usize>,
    neighbours: Vec<usize>,
    weights: Vec<f64>,
}

impl Adjacency {
    fn build(m: usize, couplings: &[Coupling]) -> Self {
        let mut degree = vec![0usize; m];
        for c in couplings {
            degree[c.i] += 1;
            degree[c.j] += 1;
        }
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..m].to_vec();
        let mut neighbours = vec![0; offsets[m]];
        let mut weights = vec![0.0; offsets[m]];
        for c in couplings {
            neighbours[fill[c.i]] = c.j;
            weights[fill[c.i]] = c.value;
            fill[c.i] += 1;
            neighbours[fill[c.j]] = c.i;
            weights[fill[c.j]] = c.value;
            fill[c.j] += 1;
        }
        Adjacency {
            offsets,
            neighbours,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsingModel {
    fields: Vec<f64>,
    couplings: Vec<Coupling>,
    topology: Topology,
    adjacency: Adjacency,
}

impl IsingModel {
    /// Builds a model, normalising every coupling to `i < j` and checking
    /// the invariants of the topology tag.
    pub fn new(fields: Vec<f64>, couplings: Vec<Coupling>, topology: Topology) -> Result<Self> {
        let m = fields.len();
        let mut seen = BTreeSet::new();
        let mut normalised = Vec::with_capacity(couplings.len());
        for c in couplings {
            if c.i == c.j {
                return Err(Error::invalid(format!("self-coupling on spin {}", c.i)));
            }
            if c.i >= m || c.j >= m {
                return Err(Error::invalid(format!(
                    "coupling ({}, {}) out of range for {m} spins",
                    c.i, c.j
                )));
            }
            let (i, j) = if c.i < c.j { (c.i, c.j) } else { (c.j, c.i) };
            if !seen.insert((i, j)) {
                return Err(Error::invalid(format!("duplicate coupling ({i}, {j})")));
            }
            normalised.push(Coupling { i, j, value: c.value });
        }
        match topology {
            Topology::Independent if !normalised.is_empty() => {
                return Err(Error::invalid("independent topology cannot have couplings"));
            }
            Topology::Chain if normalised.iter().any(|c| c.j != c.i + 1) => {
                return Err(Error::invalid("chain topology only couples i and i+1"));
            }
            Topology::Grid { lx, ly, lz, periodic } => {
                if lx * ly * lz != m {
                    return Err(Error::invalid(format!(
                        "grid {lx}x{ly}x{lz} does not have {m} spins"
                    )));
                }
                let expected: BTreeSet<_> = grid_edges(lx, ly, lz, periodic).into_iter().collect();
                if expected != seen {
                    return Err(Error::invalid("couplings differ from the grid's nearest-neighbour edges"));
                }
            }
            _ => {}
        }
        let adjacency = Adjacency::build(m, &normalised);
        Ok(IsingModel {
            fields,
            couplings: normalised,
            topology,
            adjacency,
        })
    }

    /// Builds a model and picks the most specific topology tag the
    /// coupling graph satisfies (grids cannot be recognised this way).
    pub fn with_inferred_topology(fields: Vec<f64>, couplings: Vec<Coupling>) -> Result<Self> {
        let m = fields.len();
        let mut model = IsingModel::new(fields, couplings, Topology::Sparse)?;
        model.topology = if model.couplings.is_empty() {
            Topology::Independent
        } else if model.couplings.iter().all(|c| c.j == c.i + 1) {
            Topology::Chain
        } else if m > 1 && model.couplings.len() == m * (m - 1) / 2 {
            Topology::Complete
        } else {
            Topology::Sparse
        };
        Ok(model)
    }

    /// Reproducible random instance of `family`.
    ///
    /// Gaussian variates come from the `gaussian-v1` stream: ChaCha8 seeded
    /// with `seed_from_u64(seed)`; each variate consumes two `u64` words
    /// `a, b`, maps them to `u1 = ((a >> 11) + 1) / 2^53` and
    /// `u2 = (b >> 11) / 2^53`, and returns `sqrt(-2 ln u1) cos(2 pi u2)`.
    /// Fields are drawn first (spin order), then couplings in the order
    /// they are listed.
    pub fn generate(family: Family, seed: u64) -> Result<Self> {
        let mut gauss = GaussianStream::new(seed);
        match family {
            Family::Independent { m } => {
                check_positive(m, "m")?;
                let fields = (0..m).map(|_| gauss.next()).collect();
                IsingModel::new(fields, Vec::new(), Topology::Independent)
            }
            Family::Chain { m } => {
                check_positive(m, "m")?;
                let couplings = (1..m)
                    .map(|j| Coupling {
                        i: j - 1,
                        j,
                        value: gauss.next(),
                    })
                    .collect();
                IsingModel::new(vec![0.0; m], couplings, Topology::Chain)
            }
            Family::Sk { m } => {
                check_positive(m, "m")?;
                let sd = 1.0 / crate::math::sqrt(m as f64);
                let mut couplings = Vec::with_capacity(m * m.saturating_sub(1) / 2);
                for i in 0..m {
                    for j in i + 1..m {
                        couplings.push(Coupling {
                            i,
                            j,
                            value: sd * gauss.next(),
                        });
                    }
                }
                IsingModel::new(vec![0.0; m], couplings, Topology::Complete)
            }
            Family::Grid3d { lx, ly, lz, periodic } => {
                check_positive(lx, "lx")?;
                check_positive(ly, "ly")?;
                check_positive(lz, "lz")?;
                let couplings = grid_edges(lx, ly, lz, periodic)
                    .into_iter()
                    .map(|(i, j)| Coupling {
                        i,
                        j,
                        value: gauss.next(),
                    })
                    .collect();
                IsingModel::new(
                    vec![0.0; lx * ly * lz],
                    couplings,
                    Topology::Grid { lx, ly, lz, periodic },
                )
            }
        }
    }

    #[inline]
    pub fn num_spins(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Neighbours of spin `i` with their coupling strengths.
    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let a = &self.adjacency;
        let range = a.offsets[i]..a.offsets[i + 1];
        a.neighbours[range.clone()]
            .iter()
            .copied()
            .zip(a.weights[range].iter().copied())
    }

    fn check_state(&self, y: &SpinState) -> Result<()> {
        if y.len() != self.num_spins() {
            return Err(Error::invalid(format!(
                "state has {} spins, model has {}",
                y.len(),
                self.num_spins()
            )));
        }
        Ok(())
    }

    /// `E(y) = sum_i h_i y_i + sum_{(i,j)} J_ij y_i y_j`.
    pub fn energy(&self, y: &SpinState) -> Result<f64> {
        self.check_state(y)?;
        Ok(self.energy_unchecked(y.as_slice()))
    }

    pub(crate) fn energy_unchecked(&self, y: &[Spin]) -> f64 {
        let field: f64 = self
            .fields
            .iter()
            .zip(y)
            .map(|(h, s)| h * s.value())
            .sum();
        let pair: f64 = self
            .couplings
            .iter()
            .map(|c| c.value * y[c.i].value() * y[c.j].value())
            .sum();
        field + pair
    }

    /// `lambda_i = h_i + sum_j J_ij y_j`.
    #[inline]
    pub fn local_field(&self, y: &[Spin], i: usize) -> f64 {
        let a = &self.adjacency;
        let mut acc = self.fields[i];
        for k in a.offsets[i]..a.offsets[i + 1] {
            acc += a.weights[k] * y[a.neighbours[k]].value();
        }
        acc
    }

    /// Same as [`IsingModel::local_field`] over raw `+1/-1` bytes.
    #[inline]
    pub(crate) fn local_field_i8(&self, y: &[i8], i: usize) -> f64 {
        let a = &self.adjacency;
        let mut acc = self.fields[i];
        for k in a.offsets[i]..a.offsets[i + 1] {
            acc += a.weights[k] * y[a.neighbours[k]] as f64;
        }
        acc
    }

    /// Equilibrium probability that spin `i` takes `value` given the rest of
    /// `y`: `exp(-beta s lambda) / (exp(beta lambda) + exp(-beta lambda))`.
    pub fn local_conditional(&self, y: &SpinState, i: usize, value: Spin, beta: f64) -> f64 {
        let lambda = self.local_field(y.as_slice(), i);
        sigmoid(-2.0 * beta * value.value() * lambda)
    }

    /// `-beta E(y)`, the unnormalised log target.
    pub fn log_pi_tilde(&self, y: &SpinState, beta: f64) -> Result<f64> {
        Ok(-beta * self.energy(y)?)
    }

    /// `log Z` for a model without couplings.
    pub fn exact_logz_independent(&self, beta: f64) -> Result<f64> {
        if !self.couplings.is_empty() {
            return Err(Error::invalid("closed-form log Z needs a model without couplings"));
        }
        Ok(self.fields.iter().map(|h| log_2cosh(beta * h)).sum())
    }

    /// Couplings `J_{k,k+1}` if the model is an open chain (missing bonds
    /// are zero).
    pub fn chain_bonds(&self) -> Option<Vec<f64>> {
        let m = self.num_spins();
        let mut bonds = vec![0.0; m.saturating_sub(1)];
        for c in &self.couplings {
            if c.j != c.i + 1 {
                return None;
            }
            bonds[c.i] = c.value;
        }
        Some(bonds)
    }

    /// `log Z` of an open chain by forward elimination in the log domain.
    pub fn exact_logz_chain(&self, beta: f64) -> Result<f64> {
        let bonds = self
            .chain_bonds()
            .ok_or_else(|| Error::invalid("transfer-matrix log Z needs chain topology"))?;
        let m = self.num_spins();
        if m == 0 {
            return Ok(0.0);
        }
        // msg[s] = log sum over spins 0..k with spin k = s; index 0 is up.
        let h0 = self.fields[0];
        let mut msg = [-beta * h0, beta * h0];
        for k in 1..m {
            let j = bonds[k - 1];
            let h = self.fields[k];
            let mut next = [0.0; 2];
            for (slot, s) in [1.0f64, -1.0].iter().enumerate() {
                let from_up = msg[0] - beta * j * s;
                let from_down = msg[1] + beta * j * s;
                next[slot] = -beta * h * s + log_add_exp(from_up, from_down);
            }
            msg = next;
        }
        Ok(log_add_exp(msg[0], msg[1]))
    }

    /// Exhaustive Boltzmann distribution. Entry `k` of the table is the
    /// probability of [`SpinState::from_index`]`(k, m)`.
    pub fn enumerate(&self, beta: f64) -> Result<Enumeration> {
        let m = self.num_spins();
        if m > MAX_ENUMERATION_SPINS {
            return Err(Error::TooLarge {
                m,
                limit: MAX_ENUMERATION_SPINS,
            });
        }
        let count = 1u64 << m;
        let mut log_weights = Vec::with_capacity(count as usize);
        let mut spins = vec![Spin::Down; m];
        for index in 0..count {
            for (i, s) in spins.iter_mut().enumerate() {
                *s = Spin::from_bool(index >> i & 1 == 1);
            }
            log_weights.push(-beta * self.energy_unchecked(&spins));
        }
        let log_z = log_sum_exp(&log_weights);
        let probabilities = log_weights.iter().map(|w| exp(w - log_z)).collect();
        Ok(Enumeration {
            m,
            log_z,
            probabilities,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub m: usize,
    pub log_z: f64,
    pub probabilities: Vec<f64>,
}

impl Enumeration {
    pub fn probability(&self, y: &SpinState) -> f64 {
        self.probabilities[y.index() as usize]
    }

    pub fn log_probability(&self, y: &SpinState) -> f64 {
        log(self.probability(y))
    }

    pub fn states(&self) -> impl Iterator<Item = (SpinState, f64)> + '_ {
        self.probabilities
            .iter()
            .enumerate()
            .map(move |(k, &p)| (SpinState::from_index(k as u64, self.m), p))
    }
}

fn check_positive(v: usize, name: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::invalid(format!("{name} must be positive")));
    }
    Ok(())
}

/// Nearest-neighbour edges of an `lx x ly x lz` lattice as sorted `(i, j)`,
/// `i < j`, deduplicated. Axes of extent 1 contribute nothing, and periodic
/// wrap on an axis of extent 2 coincides with the open bond.
pub fn grid_edges(lx: usize, ly: usize, lz: usize, periodic: bool) -> Vec<(usize, usize)> {
    let idx = |x: usize, y: usize, z: usize| x + lx * (y + ly * z);
    let mut edges = BTreeSet::new();
    let dims = [lx, ly, lz];
    for z in 0..lz {
        for y in 0..ly {
            for x in 0..lx {
                let here = [x, y, z];
                for axis in 0..3 {
                    let extent = dims[axis];
                    if extent < 2 {
                        continue;
                    }
                    let next = here[axis] + 1;
                    let next = if next < extent {
                        next
                    } else if periodic {
                        0
                    } else {
                        continue;
                    };
                    let mut there = here;
                    there[axis] = next;
                    let a = idx(here[0], here[1], here[2]);
                    let b = idx(there[0], there[1], there[2]);
                    if a != b {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    edges.into_iter().collect()
}

struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (self.rng.next_u64() >> 11) as f64 * SCALE;
        crate::math::sqrt(-2.0 * log(u1)) * crate::math::cos(2.0 * core::f64::consts::PI * u2)
    }
}
