//! Communication graph and the index sets that map each agent's local
//! variable onto the global consensus variable.
//!
//! All agent ids and global entry indices exposed here are 1-based.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("agent count must be positive")]
    NoAgents,
    #[error("unknown agent id {0}")]
    UnknownAgent(usize),
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("global dimension must be positive")]
    EmptyGlobal,
    #[error("expected index sets for {expected} agents, got {got}")]
    AgentCountMismatch { expected: usize, got: usize },
    #[error("agent {agent}: alpha length {alpha_len} exceeds local dimension {local_dim}")]
    AlphaTooLong { agent: usize, alpha_len: usize, local_dim: usize },
    #[error("agent {agent}: global entry {entry} outside 1..={global_dim}")]
    EntryOutOfRange { agent: usize, entry: usize, global_dim: usize },
    #[error("agent {agent}: global entry {entry} listed twice")]
    DuplicateEntry { agent: usize, entry: usize },
    #[error("global entry {entry} averaged by both agent {first} and agent {second}")]
    SharedOwnership { entry: usize, first: usize, second: usize },
    #[error("global entry {0} has no averaging agent")]
    UnownedEntry(usize),
    #[error("global entry {0} is used by no agent")]
    UnusedEntry(usize),
}

/// Undirected communication graph over agents `1..=M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl CommGraph {
    pub fn new(agent_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if agent_count == 0 {
            return Err(GraphError::NoAgents);
        }
        let mut adjacency = vec![BTreeSet::new(); agent_count];
        for &(i, j) in edges {
            for id in [i, j] {
                if id == 0 || id > agent_count {
                    return Err(GraphError::UnknownAgent(id));
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            adjacency[i - 1].insert(j);
            adjacency[j - 1].insert(i);
        }
        Ok(Self { adjacency })
    }

    /// Cycle `1 - 2 - ... - M - 1`.
    pub fn ring(agent_count: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = match agent_count {
            0 => return Err(GraphError::NoAgents),
            1 => Vec::new(),
            2 => vec![(1, 2)],
            m => (1..=m).map(|i| (i, i % m + 1)).collect(),
        };
        Self::new(agent_count, &edges)
    }

    pub fn star(agent_count: usize, hub: usize) -> Result<Self, GraphError> {
        if hub == 0 || hub > agent_count {
            return Err(GraphError::UnknownAgent(hub));
        }
        let edges: Vec<_> = (1..=agent_count).filter(|&i| i != hub).map(|i| (hub, i)).collect();
        Self::new(agent_count, &edges)
    }

    pub fn agent_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn agents(&self) -> impl Iterator<Item = usize> {
        1..=self.adjacency.len()
    }

    /// Sorted neighbor list of agent `i`.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, GraphError> {
        self.neighbor_set(i).map(|s| s.iter().copied().collect())
    }

    pub fn neighbor_set(&self, i: usize) -> Result<&BTreeSet<usize>, GraphError> {
        if i == 0 {
            return Err(GraphError::UnknownAgent(i));
        }
        self.adjacency.get(i - 1).ok_or(GraphError::UnknownAgent(i))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbor_set(i).map(|s| s.contains(&j)).unwrap_or(false)
    }

    /// Edge list with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(idx, nbrs)| {
                let i = idx + 1;
                nbrs.iter().filter(move |&&j| j > i).map(move |&j| (i, j))
            })
            .collect()
    }
}

/// Ordered index lists `K_i` plus averaging responsibilities `A_i`.
///
/// `A_i` is the prefix of length `alpha_len[i]` of `K_i`; the `A_i`
/// partition `1..=global_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexLayout {
    global_dim: usize,
    index_sets: Vec<Vec<usize>>,
    alpha_len: Vec<usize>,
    owner: Vec<usize>,
}

impl IndexLayout {
    pub fn new(
        global_dim: usize,
        index_sets: Vec<Vec<usize>>,
        alpha_len: Vec<usize>,
    ) -> Result<Self, GraphError> {
        if global_dim == 0 {
            return Err(GraphError::EmptyGlobal);
        }
        if index_sets.len() != alpha_len.len() {
            return Err(GraphError::AgentCountMismatch {
                expected: index_sets.len(),
                got: alpha_len.len(),
            });
        }
        if index_sets.is_empty() {
            return Err(GraphError::NoAgents);
        }
        let mut owner = vec![0usize; global_dim];
        for (idx, (set, &alen)) in index_sets.iter().zip(&alpha_len).enumerate() {
            let agent = idx + 1;
            if alen > set.len() {
                return Err(GraphError::AlphaTooLong {
                    agent,
                    alpha_len: alen,
                    local_dim: set.len(),
                });
            }
            let mut seen = BTreeSet::new();
            for &k in set {
                if k == 0 || k > global_dim {
                    return Err(GraphError::EntryOutOfRange { agent, entry: k, global_dim });
                }
                if !seen.insert(k) {
                    return Err(GraphError::DuplicateEntry { agent, entry: k });
                }
            }
            for &k in &set[..alen] {
                match owner[k - 1] {
                    0 => owner[k - 1] = agent,
                    first => {
                        return Err(GraphError::SharedOwnership { entry: k, first, second: agent })
                    }
                }
            }
        }
        if let Some(pos) = owner.iter().position(|&o| o == 0) {
            return Err(GraphError::UnownedEntry(pos + 1));
        }
        Ok(Self { global_dim, index_sets, alpha_len, owner })
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn agent_count(&self) -> usize {
        self.index_sets.len()
    }

    /// `K_i`.
    pub fn index_set(&self, i: usize) -> &[usize] {
        &self.index_sets[i - 1]
    }

    /// `A_i`.
    pub fn alpha_set(&self, i: usize) -> &[usize] {
        &self.index_sets[i - 1][..self.alpha_len[i - 1]]
    }

    /// Entries of `K_i` that are copies of neighbors' quantities.
    pub fn gamma_set(&self, i: usize) -> &[usize] {
        &self.index_sets[i - 1][self.alpha_len[i - 1]..]
    }

    pub fn alpha_len(&self, i: usize) -> usize {
        self.alpha_len[i - 1]
    }

    /// `v_i`.
    pub fn local_dim(&self, i: usize) -> usize {
        self.index_sets[i - 1].len()
    }

    /// The agent whose `A_i` contains `k`.
    pub fn owner(&self, k: usize) -> usize {
        self.owner[k - 1]
    }

    /// 0-based local position `k_i` of global entry `k` in `z_i`.
    pub fn local_position(&self, i: usize, k: usize) -> Option<usize> {
        self.index_sets[i - 1].iter().position(|&e| e == k)
    }

    pub fn contains(&self, i: usize, k: usize) -> bool {
        self.index_sets[i - 1].contains(&k)
    }

    /// For every gamma entry of agent `i`: the owning agent and the 0-based
    /// position inside that agent's alpha block.
    pub fn gamma_sources(&self, i: usize) -> Vec<(usize, usize)> {
        self.gamma_set(i)
            .iter()
            .map(|&k| {
                let j = self.owner(k);
                let pos = self.local_position(j, k).expect("owner contains its entries");
                (j, pos)
            })
            .collect()
    }
}

/// `I_k` for every global entry `k`, each sorted ascending.
pub fn responsibility_sets(layout: &IndexLayout) -> Result<BTreeMap<usize, Vec<usize>>, GraphError> {
    let mut sets: BTreeMap<usize, Vec<usize>> =
        (1..=layout.global_dim()).map(|k| (k, Vec::new())).collect();
    for i in 1..=layout.agent_count() {
        for &k in layout.index_set(i) {
            sets.get_mut(&k).expect("entries validated").push(i);
        }
    }
    if let Some((&k, _)) = sets.iter().find(|(_, users)| users.is_empty()) {
        return Err(GraphError::UnusedEntry(k));
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LocalityViolation {
    pub entry: usize,
    pub owner: usize,
    /// Users of the entry that are neither the owner nor its neighbors.
    pub unreachable: Vec<usize>,
}

impl fmt::Display for LocalityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entry {} (averaged by agent {}) is used by non-neighbors {:?}",
            self.entry, self.owner, self.unreachable
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LocalityReport {
    pub violations: Vec<LocalityViolation>,
    /// Structural problems that prevent the check (agent count mismatch).
    pub errors: Vec<String>,
}

impl LocalityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty() && self.errors.is_empty()
    }
}

/// Checks that every global entry can be averaged by its owner using only
/// data from the owner's neighbors.
pub fn validate_locality(graph: &CommGraph, layout: &IndexLayout) -> LocalityReport {
    let mut report = LocalityReport::default();
    if graph.agent_count() != layout.agent_count() {
        report.errors.push(format!(
            "graph has {} agents, layout has {}",
            graph.agent_count(),
            layout.agent_count()
        ));
        return report;
    }
    let sets = match responsibility_sets(layout) {
        Ok(s) => s,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    for (k, users) in sets {
        let owner = layout.owner(k);
        let nbrs = graph.neighbor_set(owner).expect("owner is a valid agent");
        let unreachable: Vec<usize> =
            users.into_iter().filter(|&u| u != owner && !nbrs.contains(&u)).collect();
        if !unreachable.is_empty() {
            report.violations.push(LocalityViolation { entry: k, owner, unreachable });
        }
    }
    report
}
