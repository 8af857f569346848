//! Subcube trees: full binary trees over partial states whose leaves
//! partition the root subcube, grown from heuristic populations under a
//! worst-case KL budget and kept under a node budget by retracting the
//! least probable subleaves.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};
use core::fmt::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::{max_vertex_kl, rb_up_mass, worst_case_kl_grouped, EstimatorMode};
use crate::heuristic::SamplePopulation;
use crate::ising::{IsingModel, PartialState, Spin, SpinState, Topology};
use crate::math::{exp, log, log_add_exp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// How the next branch variable is picked. No rule looks at sample values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchRule {
    /// Lowest unassigned index.
    Fixed,
    /// Uniform over unassigned variables.
    Random,
    /// Uniform over unassigned neighbours of assigned variables, or over
    /// all unassigned variables when there are none.
    #[default]
    Neighbour,
    /// First unassigned variable of a recursive separator order (chains
    /// and grids).
    Bisection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchChooser {
    rule: BranchRule,
    order: Vec<usize>,
}

impl BranchChooser {
    pub fn new(rule: BranchRule, model: &IsingModel) -> Result<Self> {
        let order = match rule {
            BranchRule::Bisection => bisection_order(model.topology(), model.num_spins())?,
            _ => Vec::new(),
        };
        Ok(BranchChooser { rule, order })
    }

    pub fn rule(&self) -> BranchRule {
        self.rule
    }

    pub fn choose<R: Rng + ?Sized>(&self, model: &IsingModel, state: &PartialState, rng: &mut R) -> Result<usize> {
        if state.is_complete() {
            return Err(Error::invalid("no unassigned variable to branch on"));
        }
        let v = match self.rule {
            BranchRule::Fixed => state.free_variables().next().unwrap(),
            BranchRule::Random => pick(state.free_variables(), rng),
            BranchRule::Neighbour => {
                let frontier: Vec<usize> = state
                    .free_variables()
                    .filter(|&i| model.neighbours(i).any(|(j, _)| state.get(j).is_some()))
                    .collect();
                if frontier.is_empty() {
                    pick(state.free_variables(), rng)
                } else {
                    frontier[rng.gen_range(0..frontier.len())]
                }
            }
            BranchRule::Bisection => *self.order.iter().find(|&&i| state.get(i).is_none()).unwrap(),
        };
        Ok(v)
    }

    /// Complete variable order produced by repeated choices from the
    /// all-free state. Choices only depend on which variables are
    /// assigned, so this matches what the tree would pick on any path.
    pub fn variable_order<R: Rng + ?Sized>(&self, model: &IsingModel, rng: &mut R) -> Vec<usize> {
        let m = model.num_spins();
        let mut state = PartialState::free(m);
        let mut order = Vec::with_capacity(m);
        while !state.is_complete() {
            let v = self.choose(model, &state, rng).expect("state not complete");
            state.set(v, Some(Spin::Up));
            order.push(v);
        }
        order
    }
}

fn pick<R: Rng + ?Sized>(iter: impl Iterator<Item = usize>, rng: &mut R) -> usize {
    let all: Vec<usize> = iter.collect();
    all[rng.gen_range(0..all.len())]
}

/// Recursive separator order of a lattice: the box is cut through the
/// middle of its longest axis (ties go x, y, z), the cut plane is listed,
/// and the two halves are processed breadth-first so each level's
/// separators come before the next level's.
pub fn bisection_order(topology: Topology, m: usize) -> Result<Vec<usize>> {
    let (lx, ly, lz) = match topology {
        Topology::Grid { lx, ly, lz, .. } => (lx, ly, lz),
        Topology::Chain | Topology::Independent => (m, 1, 1),
        other => {
            return Err(Error::Unsupported(format!("bisection order needs a chain or grid, not {other}")));
        }
    };
    let dims = [lx, ly, lz];
    let mut order = Vec::with_capacity(m);
    let mut queue = alloc::collections::VecDeque::new();
    queue.push_back(([0usize; 3], dims));
    while let Some((lo, hi)) = queue.pop_front() {
        if (0..3).any(|a| hi[a] <= lo[a]) {
            continue;
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = lo[axis] + (hi[axis] - lo[axis]) / 2;
        let mut cut_lo = lo;
        let mut cut_hi = hi;
        cut_lo[axis] = mid;
        cut_hi[axis] = mid + 1;
        for z in cut_lo[2]..cut_hi[2] {
            for y in cut_lo[1]..cut_hi[1] {
                for x in cut_lo[0]..cut_hi[0] {
                    order.push(x + lx * (y + ly * z));
                }
            }
        }
        let mut left_hi = hi;
        left_hi[axis] = mid;
        let mut right_lo = lo;
        right_lo[axis] = mid + 1;
        queue.push_back((lo, left_hi));
        queue.push_back((right_lo, hi));
    }
    debug_assert_eq!(order.len(), m);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    parent: Option<NodeId>,
    children: Option<[NodeId; 2]>,
    branch_var: Option<usize>,
    count: u64,
    alpha: f64,
    log_q: f64,
    population: Option<u64>,
    queued: Option<u64>,
    alive: bool,
}

impl Node {
    fn new(parent: Option<NodeId>, count: u64) -> Self {
        Node {
            parent,
            children: None,
            branch_var: None,
            count,
            alpha: 0.0,
            log_q: 0.0,
            population: None,
            queued: None,
            alive: true,
        }
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    /// `[plus, minus]` children.
    pub fn children(&self) -> Option<[NodeId; 2]> {
        self.children
    }

    pub fn branch_variable(&self) -> Option<usize> {
        self.branch_var
    }

    /// Population count of this node's subcube in the population that
    /// created it.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Pseudocount of this node in the estimate that created it (sum over
    /// its leaves for internal nodes).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn log_q(&self) -> f64 {
        self.log_q
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    /// Size of the refresh population drawn here, if this node roots an
    /// estimated subtree.
    pub fn population(&self) -> Option<u64> {
        self.population
    }

    pub fn is_refresh_point(&self) -> bool {
        self.population.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RetractEntry {
    log_q: f64,
    stamp: u64,
    node: NodeId,
}

impl Eq for RetractEntry {}

impl Ord for RetractEntry {
    // Max-heap order: lowest logQ first, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .log_q
            .total_cmp(&self.log_q)
            .then(other.stamp.cmp(&self.stamp))
    }
}

impl PartialOrd for RetractEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Parameters of one tree extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendParams {
    pub theta: f64,
    pub count_threshold: u64,
    pub beta: f64,
    pub estimator: EstimatorMode,
}

/// What one extension did.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionRecord {
    pub node: NodeId,
    pub population: usize,
    pub branches: usize,
    /// A branch was undone for exceeding the KL threshold.
    pub rejected: bool,
    /// Extension stopped because nothing could be retracted.
    pub retraction_failed: bool,
    /// Worst-case KL of the accepted subtree.
    pub worst_case_kl: f64,
}

struct Pending {
    state: PartialState,
    members: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SubcubeTree {
    root_state: PartialState,
    nodes: Vec<Node>,
    free_slots: Vec<NodeId>,
    size: usize,
    max_size: usize,
    retraction: BinaryHeap<RetractEntry>,
    stamp: u64,
}

impl SubcubeTree {
    /// A bare root over all of `{+,-}^m`.
    pub fn new(m: usize, max_size: usize) -> Result<Self> {
        SubcubeTree::with_root_state(PartialState::free(m), max_size)
    }

    pub fn with_root_state(root_state: PartialState, max_size: usize) -> Result<Self> {
        if max_size < 3 {
            return Err(Error::invalid("maximum tree size must be at least 3"));
        }
        let mut root = Node::new(None, 0);
        root.alpha = 1.0;
        Ok(SubcubeTree {
            root_state,
            nodes: vec![root],
            free_slots: Vec::new(),
            size: 1,
            max_size,
            retraction: BinaryHeap::new(),
            stamp: 0,
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root_state(&self) -> &PartialState {
        &self.root_state
    }

    pub fn num_spins(&self) -> usize {
        self.root_state.len()
    }

    /// Number of live nodes.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn node(&self, id: NodeId) -> &Node {
        let node = &self.nodes[id.index()];
        debug_assert!(node.alive, "stale node id {id:?}");
        node
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.index()]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.get(id.index()).is_some_and(|n| n.alive)
    }

    pub fn is_subleaf(&self, id: NodeId) -> bool {
        match self.node(id).children {
            Some([a, b]) => self.node(a).is_leaf() && self.node(b).is_leaf(),
            None => false,
        }
    }

    /// True if `id` currently sits in the retraction queue.
    pub fn is_queued(&self, id: NodeId) -> bool {
        self.node(id).queued.is_some()
    }

    /// Live nodes in the retraction queue.
    pub fn retraction_queue_len(&self) -> usize {
        self.preorder(self.root()).iter().filter(|&&id| self.is_queued(id)).count()
    }

    pub fn partial_state(&self, id: NodeId) -> PartialState {
        let mut state = self.root_state.clone();
        let mut cur = id;
        while let Some(parent) = self.node(cur).parent {
            let p = self.node(parent);
            let [plus, _] = p.children.expect("parent has children");
            let v = p.branch_var.expect("parent has branch variable");
            state.set(v, Some(if plus == cur { Spin::Up } else { Spin::Down }));
            cur = parent;
        }
        state
    }

    /// Nodes of the subtree under `id` in pre-order (plus child first).
    pub fn preorder(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            if let Some([plus, minus]) = self.node(n).children {
                stack.push(minus);
                stack.push(plus);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder(self.root())
            .into_iter()
            .filter(|&id| self.node(id).is_leaf())
            .collect()
    }

    /// Leaf whose subcube contains `state`, with the path from the root.
    pub fn locate(&self, state: &SpinState) -> Vec<NodeId> {
        let mut path = vec![self.root()];
        let mut cur = self.root();
        while let (Some([plus, minus]), Some(v)) = (self.node(cur).children, self.node(cur).branch_var) {
            cur = if state.get(v) == Spin::Up { plus } else { minus };
            path.push(cur);
        }
        path
    }

    /// Picks the plus child with probability `exp(logQ(plus) - logQ(node))`.
    pub fn sample_child<R: Rng + ?Sized>(&self, id: NodeId, rng: &mut R) -> Result<(NodeId, Spin)> {
        let node = self.node(id);
        let [plus, minus] = node
            .children
            .ok_or_else(|| Error::invalid("cannot sample a child of a leaf"))?;
        let p_plus = exp(self.node(plus).log_q - node.log_q);
        if rng.gen::<f64>() < p_plus {
            Ok((plus, Spin::Up))
        } else {
            Ok((minus, Spin::Down))
        }
    }

    /// Ancestral draw of a leaf without extending the tree.
    pub fn sample_leaf<R: Rng + ?Sized>(&self, rng: &mut R) -> (NodeId, PartialState) {
        let mut state = self.root_state.clone();
        let mut cur = self.root();
        while !self.node(cur).is_leaf() {
            let v = self.node(cur).branch_var.unwrap();
            let (next, spin) = self.sample_child(cur, rng).unwrap();
            state.set(v, Some(spin));
            cur = next;
        }
        (cur, state)
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        self.size += 1;
        if let Some(id) = self.free_slots.pop() {
            self.nodes[id.index()] = node;
            id
        } else {
            self.nodes.push(node);
            NodeId((self.nodes.len() - 1) as u32)
        }
    }

    fn release(&mut self, id: NodeId) {
        let node = self.node_mut(id);
        node.alive = false;
        node.queued = None;
        self.free_slots.push(id);
        self.size -= 1;
    }

    fn branch(&mut self, id: NodeId, v: usize, counts: [u64; 2]) -> [NodeId; 2] {
        let plus = self.alloc(Node::new(Some(id), counts[0]));
        let minus = self.alloc(Node::new(Some(id), counts[1]));
        let node = self.node_mut(id);
        node.children = Some([plus, minus]);
        node.branch_var = Some(v);
        [plus, minus]
    }

    /// Deletes the two leaf children of `id`.
    fn unbranch(&mut self, id: NodeId) {
        let [plus, minus] = self.node(id).children.expect("unbranch on a leaf");
        debug_assert!(self.node(plus).is_leaf() && self.node(minus).is_leaf());
        self.release(plus);
        self.release(minus);
        let node = self.node_mut(id);
        node.children = None;
        node.branch_var = None;
        node.population = None;
    }

    fn enqueue(&mut self, id: NodeId) {
        if self.node(id).queued.is_some() {
            return;
        }
        self.stamp += 1;
        let stamp = self.stamp;
        let log_q = self.node(id).log_q;
        self.node_mut(id).queued = Some(stamp);
        self.retraction.push(RetractEntry { log_q, stamp, node: id });
        if self.retraction.len() > 2 * self.size + 64 {
            let nodes = &self.nodes;
            self.retraction
                .retain(|e| nodes[e.node.index()].alive && nodes[e.node.index()].queued == Some(e.stamp));
        }
    }

    fn dequeue(&mut self, id: NodeId) {
        self.node_mut(id).queued = None;
    }

    /// Enters every subleaf under `id` into the retraction queue once.
    pub fn update_retraction_queue(&mut self, id: NodeId) {
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if self.node(n).is_leaf() {
                continue;
            }
            if self.is_subleaf(n) {
                self.enqueue(n);
            } else {
                let [plus, minus] = self.node(n).children.unwrap();
                stack.push(minus);
                stack.push(plus);
            }
        }
    }

    /// Makes room for one more branch. Does nothing while
    /// `len() + 2 <= max_size()`; otherwise deletes the children of the
    /// queued subleaf with the lowest stored logQ and queues its parent if
    /// that became a subleaf (unless it is `protected`). Returns `false` if
    /// room was needed but the queue was empty.
    pub fn retract_worst_subleaf(&mut self, protected: Option<NodeId>) -> bool {
        if self.size + 2 <= self.max_size {
            return true;
        }
        while let Some(entry) = self.retraction.pop() {
            let id = entry.node;
            let node = &self.nodes[id.index()];
            if !node.alive || node.queued != Some(entry.stamp) || !self.is_subleaf(id) {
                continue;
            }
            self.dequeue(id);
            self.unbranch(id);
            if let Some(parent) = self.node(id).parent {
                if Some(parent) != protected && self.is_subleaf(parent) {
                    self.enqueue(parent);
                }
            }
            return true;
        }
        false
    }

    /// Count-based probabilities over the subtree under `id`: leaves get
    /// `log((# + alpha) / (1 + n)) + log_q_r`, internal nodes the
    /// log-sum-exp of their children.
    pub fn set_tree_ps(&mut self, id: NodeId, n: u64, log_q_r: f64) {
        let order = self.preorder(id);
        let norm = log(1.0 + n as f64);
        for &node in order.iter().rev() {
            let value = match self.node(node).children {
                None => log(self.node(node).count as f64 + self.node(node).alpha) - norm + log_q_r,
                Some([plus, minus]) => log_add_exp(self.node(plus).log_q, self.node(minus).log_q),
            };
            self.node_mut(node).log_q = value;
        }
    }

    /// Rao-Blackwellised probabilities: per branch,
    /// `q(child) = (up mass or its complement + alpha(child)) / (#(parent) + alpha(parent))`,
    /// applied top-down from `log_q_r`, then internal nodes are reset to the
    /// log-sum-exp of their children.
    fn set_tree_ps_rb(&mut self, id: NodeId, n: u64, log_q_r: f64, up_mass: &BTreeMap<NodeId, f64>) {
        let order = self.preorder(id);
        self.node_mut(id).log_q = log_q_r;
        for &node in &order {
            let Some([plus, minus]) = self.node(node).children else {
                continue;
            };
            let members = if node == id { n } else { self.node(node).count } as f64;
            let (a_plus, a_minus) = (self.node(plus).alpha, self.node(minus).alpha);
            let up = up_mass[&node];
            let denom = members + a_plus + a_minus;
            let base = self.node(node).log_q;
            self.node_mut(plus).log_q = base + log((up + a_plus) / denom);
            self.node_mut(minus).log_q = base + log((members - up + a_minus) / denom);
        }
        for &node in order.iter().rev() {
            if let Some([plus, minus]) = self.node(node).children {
                let value = log_add_exp(self.node(plus).log_q, self.node(minus).log_q);
                self.node_mut(node).log_q = value;
            }
        }
    }

    /// Robust alphas over the leaves under `id` (whose counts come from
    /// one population); internal nodes get the sum over their leaves.
    fn assign_robust_alphas(&mut self, id: NodeId) {
        let order = self.preorder(id);
        let leaves: Vec<NodeId> = order.iter().copied().filter(|&n| self.node(n).is_leaf()).collect();
        let min = leaves.iter().map(|&n| self.node(n).count).min().unwrap();
        let ties = leaves.iter().filter(|&&n| self.node(n).count == min).count();
        let share = 1.0 / ties as f64;
        for &leaf in &leaves {
            let node = self.node_mut(leaf);
            node.alpha = if node.count == min { share } else { 0.0 };
        }
        for &node in order.iter().rev() {
            if node == id {
                continue;
            }
            if let Some([plus, minus]) = self.node(node).children {
                let sum = self.node(plus).alpha + self.node(minus).alpha;
                self.node_mut(node).alpha = sum;
            }
        }
    }

    /// Grows a subtree under the incomplete leaf `leaf` from `population`,
    /// which must lie in the leaf's subcube.
    ///
    /// Nodes are branched most-populated first; after each branch the
    /// robust estimate over the subtree's leaves is re-derived and its
    /// worst-case KL compared with `theta`. The first branch over budget is
    /// undone and growth stops. Before each branch the tree makes room by
    /// retraction, never re-queuing the leaf's parent.
    pub fn extend_with_population<R: Rng + ?Sized>(
        &mut self,
        leaf: NodeId,
        population: &SamplePopulation,
        model: &IsingModel,
        params: &ExtendParams,
        chooser: &BranchChooser,
        rng: &mut R,
    ) -> Result<ExtensionRecord> {
        if !self.node(leaf).is_leaf() {
            return Err(Error::invalid("extension must start at a leaf"));
        }
        let leaf_state = self.partial_state(leaf);
        if leaf_state.is_complete() {
            return Err(Error::invalid("cannot extend a leaf holding a single state"));
        }
        if population.is_empty() {
            return Err(Error::invalid("empty population"));
        }
        population.check_constraint(&leaf_state)?;
        let n = population.len() as u64;
        let protected = self.node(leaf).parent;
        if let Some(p) = protected {
            if self.is_subleaf(p) {
                self.dequeue(p);
            }
        }
        let log_q_r = self.node(leaf).log_q;

        let mut record = ExtensionRecord {
            node: leaf,
            population: population.len(),
            branches: 0,
            rejected: false,
            retraction_failed: false,
            worst_case_kl: 0.0,
        };
        let mut pending: BTreeMap<NodeId, Pending> = BTreeMap::new();
        pending.insert(
            leaf,
            Pending {
                state: leaf_state,
                members: (0..n as u32).collect(),
            },
        );
        let mut up_mass: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut leaf_counts: BTreeMap<u64, usize> = BTreeMap::new();
        leaf_counts.insert(n, 1);
        let mut frontier = BinaryHeap::new();
        let mut seq = 0u64;
        frontier.push((n, Reverse(seq), leaf));

        while !frontier.is_empty() {
            if !self.retract_worst_subleaf(protected) {
                record.retraction_failed = true;
                break;
            }
            let (count, _, id) = frontier.pop().unwrap();
            let entry = pending.remove(&id).expect("frontier node has pending data");
            let v = chooser.choose(model, &entry.state, rng)?;
            let (plus, minus): (Vec<u32>, Vec<u32>) = entry
                .members
                .iter()
                .partition(|&&j| population.states[j as usize].get(v) == Spin::Up);
            let counts = [plus.len() as u64, minus.len() as u64];
            let children = self.branch(id, v, counts);
            multiset_remove(&mut leaf_counts, count);
            multiset_add(&mut leaf_counts, counts[0]);
            multiset_add(&mut leaf_counts, counts[1]);
            let kl = worst_case_kl_grouped(leaf_counts.iter().map(|(&c, &k)| (c, k)));
            if kl > params.theta {
                self.unbranch(id);
                multiset_remove(&mut leaf_counts, counts[0]);
                multiset_remove(&mut leaf_counts, counts[1]);
                multiset_add(&mut leaf_counts, count);
                record.rejected = true;
                break;
            }
            record.branches += 1;
            record.worst_case_kl = kl;
            if params.estimator == EstimatorMode::RaoBlackwell {
                let members = entry.members.iter().map(|&j| &population.states[j as usize]);
                up_mass.insert(id, rb_up_mass(model, params.beta, members, v));
            }
            for (slot, (child, members)) in children.into_iter().zip([plus, minus]).enumerate() {
                let mut state = entry.state.clone();
                state.set(v, Some(if slot == 0 { Spin::Up } else { Spin::Down }));
                if state.is_complete() {
                    continue;
                }
                let c = members.len() as u64;
                if c > params.count_threshold {
                    seq += 1;
                    frontier.push((c, Reverse(seq), child));
                    pending.insert(child, Pending { state, members });
                }
            }
        }

        if record.branches > 0 {
            self.node_mut(leaf).population = Some(n);
            self.assign_robust_alphas(leaf);
            match params.estimator {
                EstimatorMode::Count => self.set_tree_ps(leaf, n, log_q_r),
                EstimatorMode::RaoBlackwell => self.set_tree_ps_rb(leaf, n, log_q_r, &up_mass),
            }
            self.update_retraction_queue(leaf);
        } else if let Some(p) = protected {
            if self.is_subleaf(p) {
                self.enqueue(p);
            }
        }
        Ok(record)
    }

    /// Indented text listing, one node per line: partial state, count,
    /// alpha, logQ, branch variable of internal nodes and the population
    /// size of refresh points.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root(), self.root_state.clone(), 0usize)];
        while let Some((id, state, depth)) = stack.pop() {
            let node = self.node(id);
            let _ = write!(
                out,
                "{:indent$}{} #{} a={:.4} logq={:.6}",
                "",
                state,
                node.count,
                node.alpha,
                node.log_q,
                indent = 2 * depth
            );
            if let Some(v) = node.branch_var {
                let _ = write!(out, " v={v}");
            }
            if let Some(n) = node.population {
                let _ = write!(out, " N={n}");
            }
            out.push('\n');
            if let (Some([plus, minus]), Some(v)) = (node.children, node.branch_var) {
                let mut s_minus = state.clone();
                s_minus.set(v, Some(Spin::Down));
                let mut s_plus = state;
                s_plus.set(v, Some(Spin::Up));
                stack.push((minus, s_minus, depth + 1));
                stack.push((plus, s_plus, depth + 1));
            }
        }
        out
    }

    /// Checks the structural invariants; `theta` also checks the KL budget
    /// of every refresh point's partition.
    pub fn check_invariants(&self, theta: Option<f64>) -> core::result::Result<(), String> {
        if self.size > self.max_size {
            return Err(format!("size {} exceeds budget {}", self.size, self.max_size));
        }
        let order = self.preorder(self.root());
        if order.len() != self.size {
            return Err(format!("{} reachable nodes, size says {}", order.len(), self.size));
        }
        if self.nodes.iter().filter(|n| n.alive).count() != self.size {
            return Err(String::from("live node count differs from size"));
        }
        let mut states = BTreeMap::new();
        states.insert(self.root(), self.root_state.clone());
        for &id in &order {
            let node = self.node(id);
            let state = states[&id].clone();
            if !node.log_q.is_finite() {
                return Err(format!("node {id:?} has logQ {}", node.log_q));
            }
            match (node.children, node.branch_var) {
                (None, None) => {}
                (Some([plus, minus]), Some(v)) => {
                    if state.get(v).is_some() {
                        return Err(format!("node {id:?} branches on assigned variable {v}"));
                    }
                    let (a, b) = (self.node(plus), self.node(minus));
                    if a.parent != Some(id) || b.parent != Some(id) {
                        return Err(format!("children of {id:?} have wrong parent"));
                    }
                    let expected = node.population.unwrap_or(node.count);
                    if a.count + b.count != expected {
                        return Err(format!("children counts of {id:?} do not add up"));
                    }
                    let lse = log_add_exp(a.log_q, b.log_q);
                    if (lse - node.log_q).abs() > 1e-10 {
                        return Err(format!("logsumexp mismatch at {id:?}: {lse} vs {}", node.log_q));
                    }
                    let mut sp = state.clone();
                    sp.set(v, Some(Spin::Up));
                    let mut sm = state;
                    sm.set(v, Some(Spin::Down));
                    states.insert(plus, sp);
                    states.insert(minus, sm);
                }
                _ => return Err(format!("node {id:?} has children without branch variable or vice versa")),
            }
            if node.queued.is_some() && !self.is_subleaf(id) {
                return Err(format!("queued node {id:?} is not a subleaf"));
            }
        }
        if let Some(theta) = theta {
            for &id in &order {
                let node = self.node(id);
                let (Some(n), false) = (node.population, node.is_leaf()) else {
                    continue;
                };
                let (counts, alphas) = self.partition_cells(id);
                if counts.iter().sum::<u64>() != n {
                    return Err(format!("partition of {id:?} does not hold its population"));
                }
                let kl = max_vertex_kl(&counts, &alphas);
                if kl > theta + 1e-12 {
                    return Err(format!("partition of {id:?} has worst-case KL {kl} > {theta}"));
                }
            }
        }
        Ok(())
    }

    /// Counts and alphas of the cells estimated at refresh point `id`:
    /// its descendants that are leaves or later refresh points.
    pub fn partition_cells(&self, id: NodeId) -> (Vec<u64>, Vec<f64>) {
        let mut counts = Vec::new();
        let mut alphas = Vec::new();
        let mut stack: Vec<NodeId> = self.node(id).children.map_or(Vec::new(), |c| c.to_vec());
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            match node.children {
                Some([plus, minus]) if !node.is_refresh_point() => {
                    stack.push(plus);
                    stack.push(minus);
                }
                _ => {
                    counts.push(node.count);
                    alphas.push(node.alpha);
                }
            }
        }
        (counts, alphas)
    }

    /// Exhaustive check that every state of the root subcube lies in
    /// exactly one leaf. Refuses roots with more than 20 free variables.
    pub fn check_partition(&self) -> core::result::Result<(), String> {
        let free: Vec<usize> = self.root_state.free_variables().collect();
        if free.len() > 20 {
            return Err(String::from("too many free variables for an exhaustive check"));
        }
        let leaf_states: Vec<PartialState> = self
            .leaves()
            .into_iter()
            .map(|id| self.partial_state(id))
            .collect();
        let mut spins: Vec<Spin> = self
            .root_state
            .values()
            .iter()
            .map(|v| v.unwrap_or(Spin::Down))
            .collect();
        for index in 0u64..1 << free.len() {
            for (bit, &i) in free.iter().enumerate() {
                spins[i] = Spin::from_bool(index >> bit & 1 == 1);
            }
            let y = SpinState::new(spins.clone());
            let hits = leaf_states.iter().filter(|s| s.matches(&y)).count();
            if hits != 1 {
                return Err(format!("state {y} lies in {hits} leaves"));
            }
        }
        Ok(())
    }
}

fn multiset_add(set: &mut BTreeMap<u64, usize>, c: u64) {
    *set.entry(c).or_insert(0) += 1;
}

fn multiset_remove(set: &mut BTreeMap<u64, usize>, c: u64) {
    let k = set.get_mut(&c).expect("count present");
    *k -= 1;
    if *k == 0 {
        set.remove(&c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::{Coupling, Family};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn population(states: &[&str]) -> SamplePopulation {
        SamplePopulation {
            states: states.iter().map(|s| s.parse().unwrap()).collect(),
        }
    }

    fn repeated(state: &str, n: usize) -> SamplePopulation {
        SamplePopulation {
            states: vec![state.parse().unwrap(); n],
        }
    }

    fn params(theta: f64) -> ExtendParams {
        ExtendParams {
            theta,
            count_threshold: 0,
            beta: 1.0,
            estimator: EstimatorMode::Count,
        }
    }

    fn free_model(m: usize) -> IsingModel {
        IsingModel::new(vec![0.0; m], vec![], Topology::Independent).unwrap()
    }

    #[test]
    fn small_population_branch_is_rejected() {
        let model = free_model(1);
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut tree = SubcubeTree::new(1, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = tree
            .extend_with_population(tree.root(), &repeated("+", 10), &model, &params(0.05), &chooser, &mut rng)
            .unwrap();
        assert!(rec.rejected);
        assert_eq!(rec.branches, 0);
        assert!(tree.node(tree.root()).is_leaf());
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn large_population_branch_is_accepted() {
        let model = free_model(1);
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut tree = SubcubeTree::new(1, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = tree
            .extend_with_population(tree.root(), &repeated("+", 2000), &model, &params(0.05), &chooser, &mut rng)
            .unwrap();
        assert_eq!(rec.branches, 1);
        assert!((rec.worst_case_kl - log(2001.0 / 2000.0)).abs() < 1e-12);
        let [plus, minus] = tree.node(tree.root()).children().unwrap();
        assert!((exp(tree.node(plus).log_q()) - 2000.0 / 2001.0).abs() < 1e-12);
        assert!((exp(tree.node(minus).log_q()) - 1.0 / 2001.0).abs() < 1e-12);
        tree.check_invariants(Some(0.05)).unwrap();
        tree.check_partition().unwrap();
    }

    #[test]
    fn set_tree_ps_example() {
        // leaves (+,+), (+,-), (-,+), (-,-) with counts 3, 0, 0, 7
        let mut tree = SubcubeTree::new(2, 100).unwrap();
        let root = tree.root();
        let [a, b] = tree.branch(root, 0, [3, 7]);
        tree.branch(a, 1, [3, 0]);
        tree.branch(b, 1, [0, 7]);
        tree.node_mut(root).population = Some(10);
        tree.assign_robust_alphas(root);
        tree.set_tree_ps(root, 10, 0.0);
        let leaves: Vec<f64> = tree.leaves().iter().map(|&l| tree.node(l).log_q()).collect();
        let expected = [3.0 / 11.0, 1.0 / 22.0, 1.0 / 22.0, 7.0 / 11.0];
        for (got, want) in leaves.iter().zip(expected) {
            assert!((got - log(want)).abs() < 1e-14);
        }
        assert!(tree.node(root).log_q().abs() < 1e-15);
        tree.check_invariants(None).unwrap();

        tree.update_retraction_queue(root);
        assert_eq!(tree.retraction_queue_len(), 2);
        tree.update_retraction_queue(root);
        assert_eq!(tree.retraction_queue_len(), 2);
        assert_eq!(tree.retraction.len(), 2);
    }

    #[test]
    fn single_leaf_subtree_keeps_reference_probability() {
        let mut tree = SubcubeTree::new(2, 10).unwrap();
        tree.node_mut(tree.root()).log_q = -1.5;
        tree.node_mut(tree.root()).count = 4;
        tree.node_mut(tree.root()).alpha = 1.0;
        tree.set_tree_ps(tree.root(), 4, -1.5);
        assert!((tree.node(tree.root()).log_q() + 1.5).abs() < 1e-15);
        tree.update_retraction_queue(tree.root());
        assert_eq!(tree.retraction_queue_len(), 0);
    }

    #[test]
    fn retraction_contract() {
        let mut tree = SubcubeTree::new(3, 5).unwrap();
        let root = tree.root();
        assert!(tree.retract_worst_subleaf(None));
        let [a, _] = tree.branch(root, 0, [1, 1]);
        assert_eq!(tree.len(), 3);
        assert!(tree.retract_worst_subleaf(None));
        assert_eq!(tree.len(), 3);
        tree.branch(a, 1, [1, 0]);
        // at capacity, nothing queued
        let before = tree.dump();
        assert!(!tree.retract_worst_subleaf(None));
        assert_eq!(tree.dump(), before);
        // queue both subleaf candidates: only `a` is a subleaf
        tree.update_retraction_queue(root);
        assert!(tree.is_queued(a));
        assert!(tree.retract_worst_subleaf(None));
        assert_eq!(tree.len(), 3);
        assert!(tree.is_queued(root));
        assert!(!tree.contains(NodeId(3)));
    }

    #[test]
    fn retraction_prefers_lowest_log_q_and_protects() {
        let mut tree = SubcubeTree::new(3, 5).unwrap();
        let root = tree.root();
        let [a, b] = tree.branch(root, 0, [5, 5]);
        tree.branch(a, 1, [3, 2]);
        tree.branch(b, 1, [3, 2]);
        tree.node_mut(a).log_q = -0.5;
        tree.node_mut(b).log_q = -0.9;
        tree.update_retraction_queue(root);
        assert!(tree.retract_worst_subleaf(None));
        assert!(tree.node(b).is_leaf());
        assert!(!tree.node(a).is_leaf());
        assert!(!tree.is_queued(root));
        assert!(tree.retract_worst_subleaf(Some(root)));
        assert!(tree.node(a).is_leaf());
        assert!(!tree.is_queued(root));
    }

    #[test]
    fn chooser_rules() {
        let chain = IsingModel::generate(Family::Chain { m: 8 }, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fixed = BranchChooser::new(BranchRule::Fixed, &chain).unwrap();
        assert_eq!(fixed.choose(&chain, &PartialState::free(8), &mut rng).unwrap(), 0);
        let neighbour = BranchChooser::new(BranchRule::Neighbour, &chain).unwrap();
        let only3: PartialState = "...+....".parse().unwrap();
        for _ in 0..50 {
            let v = neighbour.choose(&chain, &only3, &mut rng).unwrap();
            assert!(v == 2 || v == 4);
        }
        let full: PartialState = "++++++++".parse().unwrap();
        assert!(fixed.choose(&chain, &full, &mut rng).is_err());
        let random = BranchChooser::new(BranchRule::Random, &chain).unwrap();
        let mut seen = [false; 8];
        for _ in 0..200 {
            let v = random.choose(&chain, &only3, &mut rng).unwrap();
            assert_ne!(v, 3);
            seen[v] = true;
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), 7);

        let sk = IsingModel::generate(Family::Sk { m: 5 }, 1).unwrap();
        assert!(matches!(
            BranchChooser::new(BranchRule::Bisection, &sk),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn bisection_starts_with_central_column() {
        let order = bisection_order(
            Topology::Grid {
                lx: 7,
                ly: 7,
                lz: 1,
                periodic: false,
            },
            49,
        )
        .unwrap();
        assert!(order[..7].iter().all(|&i| i % 7 == 3));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..49).collect::<Vec<_>>());

        let chain = bisection_order(Topology::Chain, 7).unwrap();
        assert_eq!(chain, vec![3, 1, 5, 0, 2, 4, 6]);
    }

    #[test]
    fn variable_orders_are_permutations() {
        let model = IsingModel::generate(
            Family::Grid3d {
                lx: 3,
                ly: 3,
                lz: 2,
                periodic: true,
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rule in [BranchRule::Fixed, BranchRule::Random, BranchRule::Neighbour, BranchRule::Bisection] {
            let chooser = BranchChooser::new(rule, &model).unwrap();
            let mut order = chooser.variable_order(&model, &mut rng);
            order.sort_unstable();
            assert_eq!(order, (0..18).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rb_extension_uses_conditionals() {
        // two independent spins with P(+) = 0.8 each; every member is "++"
        let h = -libm::atanh(0.6);
        let model = IsingModel::new(vec![h, h], vec![], Topology::Independent).unwrap();
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut tree = SubcubeTree::new(2, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = params(1.0);
        p.estimator = EstimatorMode::RaoBlackwell;
        tree.extend_with_population(tree.root(), &repeated("++", 4), &model, &p, &chooser, &mut rng)
            .unwrap();
        tree.check_invariants(None).unwrap();
        let [plus, minus] = tree.node(tree.root()).children().unwrap();
        // counts [4, 0]: after both branches leaves are (4, 0, 0) -> alpha on the
        // two zero-count leaves; the minus child of the root holds alpha 0.5
        let a_minus = tree.node(minus).alpha();
        let a_plus = tree.node(plus).alpha();
        let q_plus = (4.0 * 0.8 + a_plus) / (4.0 + a_plus + a_minus);
        assert!((exp(tree.node(plus).log_q()) - q_plus).abs() < 1e-12);
    }

    #[test]
    fn frontier_skips_empty_nodes() {
        let model = free_model(3);
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut tree = SubcubeTree::new(3, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pop = population(&["++-", "++-", "+--", "++-"]);
        tree.extend_with_population(tree.root(), &pop, &model, &params(10.0), &chooser, &mut rng)
            .unwrap();
        let [_, minus] = tree.node(tree.root()).children().unwrap();
        assert!(tree.node(minus).is_leaf());
        assert_eq!(tree.node(minus).count(), 0);
        tree.check_invariants(Some(10.0)).unwrap();
        tree.check_partition().unwrap();
    }

    #[test]
    fn extension_rejects_bad_input() {
        let model = IsingModel::new(
            vec![0.0; 2],
            vec![Coupling { i: 0, j: 1, value: 1.0 }],
            Topology::Chain,
        )
        .unwrap();
        let chooser = BranchChooser::new(BranchRule::Fixed, &model).unwrap();
        let mut tree = SubcubeTree::new(2, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let root = tree.root();
        let empty = SamplePopulation { states: vec![] };
        assert!(tree
            .extend_with_population(root, &empty, &model, &params(1.0), &chooser, &mut rng)
            .is_err());
        tree.extend_with_population(root, &repeated("+-", 50), &model, &params(1.0), &chooser, &mut rng)
            .unwrap();
        let leaf = *tree.leaves().iter().find(|&&l| tree.partial_state(l).is_complete()).unwrap();
        assert!(tree
            .extend_with_population(leaf, &repeated("+-", 5), &model, &params(1.0), &chooser, &mut rng)
            .is_err());
        let [_, minus] = tree.node(root).children().unwrap();
        if tree.node(minus).is_leaf() {
            assert!(tree
                .extend_with_population(minus, &repeated("+-", 5), &model, &params(1.0), &chooser, &mut rng)
                .is_err());
        }
    }
}
