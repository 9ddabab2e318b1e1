//! Plaintext distributed ADMM over a consensus problem.
//!
//! The engine is transport free: agents run in lock-step rounds and the data
//! exchanged between them follows a precomputed [`Schedule`].

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{responsibility_sets, CommGraph, IndexLayout};
use crate::linalg::{factor, kkt_matrix, Matrix, Vector};
use crate::problem::{validate_problem, AgentCost, ConsensusProblem, ProblemError};

/// Allowed deviation of `K · K⁻¹` from the identity.
const GAMMA_IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdmmError {
    #[error("rho must be positive and finite, got {0}")]
    BadRho(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("local KKT matrix is singular")]
    SingularKkt,
    #[error("inverse check failed: residual {0:e}")]
    InverseResidual(f64),
    #[error("entry {entry}: missing contribution from agent {agent}")]
    MissingContributor { entry: usize, agent: usize },
    #[error("entry {entry}: unexpected contribution from agent {agent}")]
    UnexpectedContributor { entry: usize, agent: usize },
    #[error("schedule mismatch: {0}")]
    Schedule(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmmParams {
    pub rho: f64,
    pub iterations: usize,
}

impl AdmmParams {
    pub fn new(rho: f64, iterations: usize) -> Result<Self, AdmmError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(AdmmError::BadRho(rho));
        }
        Ok(Self { rho, iterations })
    }
}

/// Upper blocks of the inverse of `[[H + ρI, Gᵀ], [G, 0]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaBlocks {
    pub g11: Matrix,
    pub g12: Matrix,
    pub rho_g11: Matrix,
    /// `Γ¹²E − Γ¹¹F`
    pub pmat: Matrix,
}

fn shifted_kkt(cost: &AgentCost, rho: f64) -> Matrix {
    let v = cost.var_dim();
    kkt_matrix(&(&cost.h + Matrix::identity(v, v) * rho), &cost.g)
}

pub fn precompute_gamma(cost: &AgentCost, rho: f64) -> Result<GammaBlocks, AdmmError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(AdmmError::BadRho(rho));
    }
    cost.check_dims()?;
    let v = cost.var_dim();
    let c = cost.constraint_count();
    let kkt = shifted_kkt(cost, rho);
    let lu = factor(&kkt).ok_or(AdmmError::SingularKkt)?;
    let inv = lu.try_inverse().ok_or(AdmmError::SingularKkt)?;
    let residual = (&kkt * &inv - Matrix::identity(v + c, v + c)).amax();
    if residual > GAMMA_IDENTITY_TOL {
        return Err(AdmmError::InverseResidual(residual));
    }
    let g11 = inv.view((0, 0), (v, v)).into_owned();
    let g12 = inv.view((0, v), (v, c)).into_owned();
    let rho_g11 = &g11 * rho;
    let pmat = &g12 * &cost.e - &g11 * &cost.f;
    Ok(GammaBlocks { g11, g12, rho_g11, pmat })
}

fn expect_len(what: &str, v: &Vector, len: usize) -> Result<(), AdmmError> {
    if v.len() == len {
        Ok(())
    } else {
        Err(AdmmError::Dimension(format!("{what} has {} entries, expected {len}", v.len())))
    }
}

/// Explicit z-update `ρΓ¹¹ζ − Γ¹¹λ + (Γ¹²E − Γ¹¹F)p`.
pub fn z_update(
    g: &GammaBlocks,
    zeta_slice: &Vector,
    lambda: &Vector,
    p: &Vector,
) -> Result<Vector, AdmmError> {
    let v = g.g11.nrows();
    expect_len("zeta slice", zeta_slice, v)?;
    expect_len("lambda", lambda, v)?;
    expect_len("p", p, g.pmat.ncols())?;
    Ok(&g.rho_g11 * zeta_slice - &g.g11 * lambda + &g.pmat * p)
}

/// The same update obtained by solving the local KKT system directly.
pub fn z_update_direct(
    cost: &AgentCost,
    rho: f64,
    zeta_slice: &Vector,
    lambda: &Vector,
    p: &Vector,
) -> Result<Vector, AdmmError> {
    cost.check_dims()?;
    let v = cost.var_dim();
    let c = cost.constraint_count();
    expect_len("zeta slice", zeta_slice, v)?;
    expect_len("lambda", lambda, v)?;
    expect_len("p", p, cost.param_dim())?;
    let mut rhs = Vector::zeros(v + c);
    rhs.rows_mut(0, v).copy_from(&(zeta_slice * rho - &cost.f * p - lambda));
    rhs.rows_mut(v, c).copy_from(&(&cost.e * p));
    let lu = factor(&shifted_kkt(cost, rho)).ok_or(AdmmError::SingularKkt)?;
    let sol = lu.solve(&rhs).ok_or(AdmmError::SingularKkt)?;
    Ok(sol.rows(0, v).into_owned())
}

/// Averages each entry over the agents that use it.
///
/// `contributions` maps a global entry `k` to `(agent, value)` pairs and must
/// hold exactly one value from every agent in `I_k`.
pub fn zeta_average(
    layout: &IndexLayout,
    contributions: &BTreeMap<usize, Vec<(usize, f64)>>,
) -> Result<BTreeMap<usize, f64>, AdmmError> {
    let sets = responsibility_sets(layout).map_err(|e| AdmmError::Schedule(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (&k, values) in contributions {
        let users = sets.get(&k).ok_or_else(|| {
            AdmmError::Dimension(format!("entry {k} outside 1..={}", layout.global_dim()))
        })?;
        let mut seen = BTreeSet::new();
        for &(agent, _) in values {
            if !users.contains(&agent) || !seen.insert(agent) {
                return Err(AdmmError::UnexpectedContributor { entry: k, agent });
            }
        }
        if let Some(&agent) = users.iter().find(|a| !seen.contains(a)) {
            return Err(AdmmError::MissingContributor { entry: k, agent });
        }
        let sum: f64 = values.iter().map(|&(_, x)| x).sum();
        out.insert(k, sum / values.len() as f64);
    }
    Ok(out)
}

/// `λ + ρ(z − ζ)`
pub fn lambda_update(
    rho: f64,
    lambda: &Vector,
    z: &Vector,
    zeta_slice: &Vector,
) -> Result<Vector, AdmmError> {
    expect_len("z", z, lambda.len())?;
    expect_len("zeta slice", zeta_slice, lambda.len())?;
    Ok(lambda + (z - zeta_slice) * rho)
}

/// One directed bundle of global entries sent in a communication phase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub entries: Vec<usize>,
}

/// Who sends what to whom in every communication phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    /// Guessed alpha entries distributed during initialization.
    pub init: Vec<Transfer>,
    /// Copies of z-entries sent to the averaging agent.
    pub z_share: Vec<Transfer>,
    /// Averaged entries returned to their users.
    pub zeta_return: Vec<Transfer>,
}

fn bundle(pairs: impl IntoIterator<Item = (usize, usize, usize)>) -> Vec<Transfer> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (from, to, k) in pairs {
        map.entry((from, to)).or_default().push(k);
    }
    map.into_iter()
        .map(|((from, to), mut entries)| {
            entries.sort_unstable();
            Transfer { from, to, entries }
        })
        .collect()
}

impl Schedule {
    /// Builds the send lists from each sender's point of view.
    pub fn new(graph: &CommGraph, layout: &IndexLayout) -> Result<Self, AdmmError> {
        let m = layout.agent_count();
        if graph.agent_count() != m {
            return Err(AdmmError::Schedule(format!(
                "graph has {} agents, layout has {m}",
                graph.agent_count()
            )));
        }
        let nbrs = |i: usize| graph.neighbors(i).expect("agent ids in range");
        let mut init = Vec::new();
        let mut z_share = Vec::new();
        let mut zeta_return = Vec::new();
        for i in 1..=m {
            for j in nbrs(i) {
                for &k in layout.alpha_set(i) {
                    if layout.gamma_set(j).contains(&k) {
                        init.push((i, j, k));
                    }
                    if layout.contains(j, k) {
                        zeta_return.push((i, j, k));
                    }
                }
                for &k in layout.gamma_set(i) {
                    if layout.alpha_set(j).contains(&k) {
                        z_share.push((i, j, k));
                    }
                }
            }
        }
        let schedule = Self { init: bundle(init), z_share: bundle(z_share), zeta_return: bundle(zeta_return) };
        schedule.check_consistency(graph, layout)?;
        Ok(schedule)
    }

    /// The receive lists derived from each receiver's point of view; they must
    /// match the send lists exactly and cover every entry a receiver needs.
    pub fn check_consistency(&self, graph: &CommGraph, layout: &IndexLayout) -> Result<(), AdmmError> {
        let m = layout.agent_count();
        let nbrs = |i: usize| graph.neighbors(i).expect("agent ids in range");
        let mut init = Vec::new();
        let mut z_recv = Vec::new();
        let mut zeta_recv = Vec::new();
        for i in 1..=m {
            for j in nbrs(i) {
                for &k in layout.alpha_set(i) {
                    if layout.contains(j, k) {
                        z_recv.push((j, i, k));
                    }
                }
                for &k in layout.alpha_set(j) {
                    if layout.contains(i, k) {
                        zeta_recv.push((j, i, k));
                    }
                }
            }
            for &k in layout.gamma_set(i) {
                let j = layout.owner(k);
                if !graph.has_edge(i, j) {
                    return Err(AdmmError::Schedule(format!(
                        "agent {i} needs entry {k} from non-neighbor {j}"
                    )));
                }
                init.push((j, i, k));
            }
        }
        for (phase, sent, expected) in [
            ("init", &self.init, bundle(init)),
            ("z share", &self.z_share, bundle(z_recv)),
            ("zeta return", &self.zeta_return, bundle(zeta_recv)),
        ] {
            if *sent != expected {
                return Err(AdmmError::Schedule(format!("{phase}: sends do not match receives")));
            }
        }
        Ok(())
    }
}

/// Per-agent iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentState {
    pub z: Vector,
    pub lambda: Vector,
    pub zeta_slice: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmmTrace {
    /// `states[τ][i-1]`; `states[0]` is the initialization, where `z` holds
    /// the initial `ζ⁰` slice.
    pub states: Vec<Vec<AgentState>>,
    /// Assembled global `ζ^τ` for every round.
    pub zeta: Vec<Vector>,
}

impl AdmmTrace {
    pub fn iterations(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &[AgentState] {
        self.states.last().expect("trace always holds the initial state")
    }

    /// `α_i` of the final iterate for every agent, usable as the next guess.
    pub fn final_alpha(&self, layout: &IndexLayout) -> Vec<Vector> {
        self.last()
            .iter()
            .enumerate()
            .map(|(idx, s)| s.z.rows(0, layout.alpha_len(idx + 1)).into_owned())
            .collect()
    }
}

fn assemble_zeta(layout: &IndexLayout, slices: &[Vector]) -> Vector {
    let mut zeta = Vector::zeros(layout.global_dim());
    for (idx, slice) in slices.iter().enumerate() {
        let agent = idx + 1;
        for (pos, &k) in layout.alpha_set(agent).iter().enumerate() {
            zeta[k - 1] = slice[pos];
        }
    }
    zeta
}

/// Initialization from alpha guesses followed by `params.iterations` rounds.
pub fn run_plain_admm(
    problem: &ConsensusProblem,
    params: &AdmmParams,
    guesses: &[Vector],
) -> Result<AdmmTrace, AdmmError> {
    validate_problem(problem).into_result()?;
    AdmmParams::new(params.rho, params.iterations)?;
    let layout = &problem.layout;
    let m = layout.agent_count();
    if guesses.len() != m {
        return Err(AdmmError::Dimension(format!("{} guesses for {m} agents", guesses.len())));
    }
    for (idx, g) in guesses.iter().enumerate() {
        expect_len(&format!("guess of agent {}", idx + 1), g, layout.alpha_len(idx + 1))?;
    }
    let schedule = Schedule::new(&problem.graph, layout)?;
    let gammas = problem
        .costs
        .iter()
        .map(|c| precompute_gamma(c, params.rho))
        .collect::<Result<Vec<_>, _>>()?;
    let ps: Vec<Vector> = problem.params.iter().map(|p| p.stacked()).collect();
    let pos = |i: usize, k: usize| layout.local_position(i, k).expect("schedule entries are local");

    // Initialization: own guesses plus copies received from neighbors.
    let mut slices: Vec<Vector> = (1..=m).map(|i| Vector::zeros(layout.local_dim(i))).collect();
    for (idx, g) in guesses.iter().enumerate() {
        slices[idx].rows_mut(0, g.len()).copy_from(g);
    }
    for t in &schedule.init {
        for &k in &t.entries {
            slices[t.to - 1][pos(t.to, k)] = guesses[t.from - 1][pos(t.from, k)];
        }
    }
    let mut lambdas: Vec<Vector> = (1..=m).map(|i| Vector::zeros(layout.local_dim(i))).collect();
    let snapshot = |zs: &[Vector], ls: &[Vector], ss: &[Vector]| -> Vec<AgentState> {
        (0..m)
            .map(|a| AgentState { z: zs[a].clone(), lambda: ls[a].clone(), zeta_slice: ss[a].clone() })
            .collect()
    };
    let mut states = vec![snapshot(&slices, &lambdas, &slices)];
    let mut zetas = vec![assemble_zeta(layout, &slices)];

    for _ in 0..params.iterations {
        let zs = (0..m)
            .map(|a| z_update(&gammas[a], &slices[a], &lambdas[a], &ps[a]))
            .collect::<Result<Vec<_>, _>>()?;

        let mut contributions: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for i in 1..=m {
            for &k in layout.alpha_set(i) {
                contributions.entry(k).or_default().push((i, zs[i - 1][pos(i, k)]));
            }
        }
        for t in &schedule.z_share {
            for &k in &t.entries {
                contributions.entry(k).or_default().push((t.from, zs[t.from - 1][pos(t.from, k)]));
            }
        }
        let averaged = zeta_average(layout, &contributions)?;

        let mut next: Vec<Vector> = (1..=m).map(|i| Vector::zeros(layout.local_dim(i))).collect();
        for i in 1..=m {
            for &k in layout.alpha_set(i) {
                next[i - 1][pos(i, k)] = averaged[&k];
            }
        }
        for t in &schedule.zeta_return {
            for &k in &t.entries {
                next[t.to - 1][pos(t.to, k)] = averaged[&k];
            }
        }
        lambdas = (0..m)
            .map(|a| lambda_update(params.rho, &lambdas[a], &zs[a], &next[a]))
            .collect::<Result<Vec<_>, _>>()?;
        slices = next;
        states.push(snapshot(&zs, &lambdas, &slices));
        zetas.push(assemble_zeta(layout, &slices));
    }
    Ok(AdmmTrace { states, zeta: zetas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{centralized_solve, StructuredParam};
    use nalgebra::{dmatrix, dvector};

    fn pinned_scalar() -> AgentCost {
        AgentCost { h: dmatrix![2.0], f: dmatrix![0.0], g: dmatrix![1.0], e: dmatrix![1.0] }
    }

    #[test]
    fn gamma_scalar_examples() {
        let free = AgentCost::unconstrained(dmatrix![1.0], Matrix::zeros(1, 0));
        let g = precompute_gamma(&free, 1.0).unwrap();
        assert!((g.g11[(0, 0)] - 0.5).abs() < 1e-15);

        // Oracle: [[4,1],[1,0]]⁻¹ = [[0,1],[1,-4]].
        let g = precompute_gamma(&pinned_scalar(), 2.0).unwrap();
        assert!(g.g11[(0, 0)].abs() < 1e-14);
        assert!((g.g12[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_rejects_bad_rho() {
        assert_eq!(precompute_gamma(&pinned_scalar(), 0.0), Err(AdmmError::BadRho(0.0)));
    }

    #[test]
    fn z_update_examples() {
        let free = AgentCost::unconstrained(dmatrix![2.0], dmatrix![0.0]);
        let g = precompute_gamma(&free, 2.0).unwrap();
        let z = z_update(&g, &dvector![1.0], &dvector![0.0], &dvector![0.0]).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15);
        let zero = z_update(&g, &dvector![0.0], &dvector![0.0], &dvector![0.0]).unwrap();
        assert_eq!(zero[0], 0.0);

        let g = precompute_gamma(&pinned_scalar(), 2.0).unwrap();
        for (zeta, lambda) in [(0.0, 0.0), (5.0, -1.0), (-3.0, 7.0)] {
            let z = z_update(&g, &dvector![zeta], &dvector![lambda], &dvector![3.0]).unwrap();
            let direct =
                z_update_direct(&pinned_scalar(), 2.0, &dvector![zeta], &dvector![lambda], &dvector![3.0])
                    .unwrap();
            assert!((z[0] - 3.0).abs() < 1e-12);
            assert!((direct[0] - 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            z_update(&g, &dvector![1.0, 2.0], &dvector![0.0], &dvector![3.0]),
            Err(AdmmError::Dimension(_))
        ));
    }

    fn two_user_layout() -> IndexLayout {
        IndexLayout::new(1, vec![vec![1], vec![1], vec![1]], vec![1, 0, 0]).unwrap()
    }

    #[test]
    fn zeta_average_examples() {
        let single = IndexLayout::new(1, vec![vec![1]], vec![1]).unwrap();
        let c: BTreeMap<_, _> = [(1, vec![(1, 7.5)])].into();
        assert_eq!(zeta_average(&single, &c).unwrap()[&1], 7.5);

        let pair = IndexLayout::new(1, vec![vec![1], vec![1]], vec![1, 0]).unwrap();
        let c: BTreeMap<_, _> = [(1, vec![(1, 2.0), (2, 4.0)])].into();
        assert_eq!(zeta_average(&pair, &c).unwrap()[&1], 3.0);

        let c: BTreeMap<_, _> = [(1, vec![(1, 1.0), (2, 2.0), (3, 6.0)])].into();
        assert_eq!(zeta_average(&two_user_layout(), &c).unwrap()[&1], 3.0);

        let c: BTreeMap<_, _> = [(1, vec![(1, 1.0), (3, 6.0)])].into();
        assert_eq!(
            zeta_average(&two_user_layout(), &c),
            Err(AdmmError::MissingContributor { entry: 1, agent: 2 })
        );
    }

    #[test]
    fn lambda_update_examples() {
        let l = dvector![0.3, -1.0];
        let z = dvector![1.0, 2.0];
        assert_eq!(lambda_update(0.2, &l, &z, &z).unwrap(), l);
        let out = lambda_update(0.2, &dvector![0.0, 0.0], &dvector![1.0, -1.0], &dvector![0.0, 0.0]).unwrap();
        assert!((out - dvector![0.2, -0.2]).amax() < 1e-15);
    }

    fn two_agent_problem() -> ConsensusProblem {
        let graph = CommGraph::ring(2).unwrap();
        let layout = IndexLayout::new(1, vec![vec![1], vec![1]], vec![1, 0]).unwrap();
        let cost = AgentCost::unconstrained(dmatrix![1.0], dmatrix![-1.0]);
        ConsensusProblem {
            graph,
            layout,
            costs: vec![cost.clone(), cost],
            params: vec![
                StructuredParam::new(dvector![1.0], Vector::zeros(0)),
                StructuredParam::new(dvector![3.0], Vector::zeros(0)),
            ],
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let p = two_agent_problem();
        let trace = run_plain_admm(&p, &AdmmParams::new(1.0, 0).unwrap(), &[dvector![0.5], dvector![]]).unwrap();
        assert_eq!(trace.iterations(), 0);
        assert_eq!(trace.states[0][1].zeta_slice, dvector![0.5]);
        assert_eq!(trace.states[0][1].lambda, dvector![0.0]);
    }

    #[test]
    fn two_agent_scalar_converges() {
        let p = two_agent_problem();
        let trace = run_plain_admm(&p, &AdmmParams::new(1.0, 200).unwrap(), &[dvector![0.0], dvector![]]).unwrap();
        let star = centralized_solve(&p).unwrap().zeta[0];
        assert!((star - 2.0).abs() < 1e-14);
        for s in trace.last() {
            assert!((s.z[0] - 2.0).abs() < 1e-6);
        }
        let last = &trace.states[200];
        let prev = &trace.states[199];
        for a in 0..2 {
            assert!((&last[a].lambda - &prev[a].lambda).amax() < 1e-8);
        }
        assert_eq!(trace.final_alpha(&p.layout), vec![trace.last()[0].z.clone(), dvector![]]);
    }

    #[test]
    fn traces_are_bit_identical() {
        let p = two_agent_problem();
        let params = AdmmParams::new(0.7, 25).unwrap();
        let a = run_plain_admm(&p, &params, &[dvector![4.0], dvector![]]).unwrap();
        let b = run_plain_admm(&p, &params, &[dvector![4.0], dvector![]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_for_ring_copies() {
        // Ring of 3, each agent copies its successor's single alpha entry.
        let g = CommGraph::ring(3).unwrap();
        let layout = IndexLayout::new(3, vec![vec![1, 2], vec![2, 3], vec![3, 1]], vec![1, 1, 1]).unwrap();
        let s = Schedule::new(&g, &layout).unwrap();
        assert_eq!(
            s.z_share,
            vec![
                Transfer { from: 1, to: 2, entries: vec![2] },
                Transfer { from: 2, to: 3, entries: vec![3] },
                Transfer { from: 3, to: 1, entries: vec![1] },
            ]
        );
        assert_eq!(
            s.init,
            vec![
                Transfer { from: 1, to: 3, entries: vec![1] },
                Transfer { from: 2, to: 1, entries: vec![2] },
                Transfer { from: 3, to: 2, entries: vec![3] },
            ]
        );
        assert_eq!(s.init, s.zeta_return);

        let mut broken = s.clone();
        broken.z_share.pop();
        assert!(matches!(broken.check_consistency(&g, &layout), Err(AdmmError::Schedule(_))));
    }

    #[test]
    fn schedule_rejects_non_neighbor_copies() {
        let g = CommGraph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let layout = IndexLayout::new(3, vec![vec![1, 3], vec![2], vec![3]], vec![1, 1, 1]).unwrap();
        assert!(matches!(Schedule::new(&g, &layout), Err(AdmmError::Schedule(_))));
    }
}
