//! Receding-horizon formation control of planar double-integrator robots,
//! cast as a consensus problem.
//!
//! Agent `i` optimizes `z_i = (U_i, Y_i, Y_j for sorted neighbors j)` with
//! parameters `p_i = (u_i(t-1), x_i(t), D_ij for sorted neighbors j)`; the
//! leader (agent 1) also receives its reference sequence `Y_ref` at the end
//! of `p_1`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CommGraph, GraphError, IndexLayout};
use crate::linalg::{Matrix, Vector};
use crate::problem::{AgentCost, ConsensusProblem, StructuredParam};

/// Ridge added to every Hessian to make it positive definite.
pub const HESSIAN_RIDGE: f64 = 1e-6;
pub const LEADER: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormationError {
    #[error("unknown scenario kind {0:?}")]
    UnknownScenario(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `x⁺ = A x + B u`, `y = C x` with state `(p_x, p_y, v_x, v_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl RobotModel {
    /// Per-axis double integrator with unit sample time.
    pub fn double_integrator() -> Self {
        let i2 = Matrix::identity(2, 2);
        let mut a = Matrix::identity(4, 4);
        a.view_mut((0, 2), (2, 2)).copy_from(&i2);
        let mut b = Matrix::zeros(4, 2);
        b.view_mut((0, 0), (2, 2)).copy_from(&(&i2 * 0.5));
        b.view_mut((2, 0), (2, 2)).copy_from(&i2);
        let mut c = Matrix::zeros(2, 4);
        c.view_mut((0, 0), (2, 2)).copy_from(&i2);
        Self { a, b, c }
    }
}

/// Next state and its output.
pub fn step_dynamics(m: &RobotModel, x: &Vector, u: &Vector) -> (Vector, Vector) {
    let next = &m.a * x + &m.b * u;
    let y = &m.c * &next;
    (next, y)
}

/// `Y = O x + T U` over `N` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedModel {
    pub o: Matrix,
    pub t: Matrix,
}

pub fn condense(m: &RobotModel, horizon: usize) -> Result<CondensedModel, FormationError> {
    if horizon == 0 {
        return Err(FormationError::ZeroHorizon);
    }
    let (ny, nx) = m.c.shape();
    let nu = m.b.ncols();
    // powers[k] = A^k
    let mut powers = vec![Matrix::identity(nx, nx)];
    for k in 1..=horizon {
        powers.push(&m.a * &powers[k - 1]);
    }
    let mut o = Matrix::zeros(ny * horizon, nx);
    let mut t = Matrix::zeros(ny * horizon, nu * horizon);
    for k in 1..=horizon {
        o.view_mut(((k - 1) * ny, 0), (ny, nx)).copy_from(&(&m.c * &powers[k]));
        for j in 0..k {
            let block = &m.c * &powers[k - 1 - j] * &m.b;
            t.view_mut(((k - 1) * ny, j * nu), (ny, nu)).copy_from(&block);
        }
    }
    Ok(CondensedModel { o, t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Ring8,
    Star9,
    Generic9,
}

impl std::str::FromStr for ScenarioKind {
    type Err = FormationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring8" => Ok(Self::Ring8),
            "star9" => Ok(Self::Star9),
            "generic9" => Ok(Self::Generic9),
            other => Err(FormationError::UnknownScenario(other.to_string())),
        }
    }
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ring8 => "ring8",
            Self::Star9 => "star9",
            Self::Generic9 => "generic9",
        }
    }

    pub const ALL: [Self; 3] = [Self::Ring8, Self::Star9, Self::Generic9];
}

/// Time-invariant formation with a leader moving at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationSpec {
    pub graph: CommGraph,
    pub horizon: usize,
    pub r: f64,
    pub eta: f64,
    /// Ideal position of every agent relative to a common origin; the
    /// displacement `d_ij` is `offsets[i] - offsets[j]`.
    pub offsets: Vec<[f64; 2]>,
    /// `y_ref(t) = ref_start + t · ref_velocity` for the leader.
    pub ref_start: [f64; 2],
    pub ref_velocity: [f64; 2],
}

impl FormationSpec {
    pub fn agent_count(&self) -> usize {
        self.graph.agent_count()
    }

    pub fn displacement(&self, i: usize, j: usize, _t: usize) -> [f64; 2] {
        let (a, b) = (self.offsets[i - 1], self.offsets[j - 1]);
        [a[0] - b[0], a[1] - b[1]]
    }

    pub fn reference(&self, t: f64) -> [f64; 2] {
        [self.ref_start[0] + t * self.ref_velocity[0], self.ref_start[1] + t * self.ref_velocity[1]]
    }

    /// Where agent `i` should be when the leader sits on its reference.
    pub fn ideal_position(&self, i: usize, t: f64) -> [f64; 2] {
        let r = self.reference(t);
        let d = self.displacement(i, LEADER, 0);
        [r[0] + d[0], r[1] + d[1]]
    }

    /// `D_ij(t)`: the displacement repeated over the horizon.
    pub fn displacement_sequence(&self, i: usize, j: usize, t: usize) -> Vector {
        let d = self.displacement(i, j, t);
        Vector::from_iterator(2 * self.horizon, (0..self.horizon).flat_map(|_| d))
    }

    /// `Y_ref(t) = (y_ref(t+1), …, y_ref(t+N))`.
    pub fn reference_sequence(&self, t: usize) -> Vector {
        Vector::from_iterator(
            2 * self.horizon,
            (1..=self.horizon).flat_map(|k| self.reference((t + k) as f64)),
        )
    }
}

/// Positions of the named blocks inside `z_i` and `p_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentBlocks {
    pub horizon: usize,
    pub neighbors: Vec<usize>,
    pub leader: bool,
}

impl AgentBlocks {
    fn h2(&self) -> usize {
        2 * self.horizon
    }

    pub fn u(&self) -> std::ops::Range<usize> {
        0..self.h2()
    }

    pub fn y(&self) -> std::ops::Range<usize> {
        self.h2()..2 * self.h2()
    }

    /// `Y_j` copy for the `idx`-th neighbor.
    pub fn y_neighbor(&self, idx: usize) -> std::ops::Range<usize> {
        let s = (2 + idx) * self.h2();
        s..s + self.h2()
    }

    pub fn var_dim(&self) -> usize {
        (2 + self.neighbors.len()) * self.h2()
    }

    pub fn alpha_len(&self) -> usize {
        2 * self.h2()
    }

    pub fn p_u_prev(&self) -> std::ops::Range<usize> {
        0..2
    }

    pub fn p_x(&self) -> std::ops::Range<usize> {
        2..6
    }

    pub fn beta_len(&self) -> usize {
        6
    }

    pub fn p_displacement(&self, idx: usize) -> std::ops::Range<usize> {
        let s = 6 + idx * self.h2();
        s..s + self.h2()
    }

    pub fn p_reference(&self) -> Option<std::ops::Range<usize>> {
        self.leader.then(|| {
            let s = 6 + self.neighbors.len() * self.h2();
            s..s + self.h2()
        })
    }

    pub fn param_dim(&self) -> usize {
        6 + (self.neighbors.len() + self.leader as usize) * self.h2()
    }
}

/// One weighted squared residual `w‖M_z z + M_p p‖²`.
struct Residual {
    weight: f64,
    mz: Matrix,
    mp: Matrix,
}

fn residuals(spec: &FormationSpec, blocks: &AgentBlocks) -> Vec<Residual> {
    let h2 = 2 * spec.horizon;
    let v = blocks.var_dim();
    let w = blocks.param_dim();
    let mut out = Vec::new();
    // Input rate: u(t+k) - u(t+k-1), with u(t-1) taken from p.
    let mut mz = Matrix::zeros(h2, v);
    let mut mp = Matrix::zeros(h2, w);
    for row in 0..h2 {
        mz[(row, row)] = 1.0;
        if row < 2 {
            mp[(row, blocks.p_u_prev().start + row)] = -1.0;
        } else {
            mz[(row, row - 2)] = -1.0;
        }
    }
    out.push(Residual { weight: spec.r, mz, mp });
    // Formation: Y_i - Y_j - D_ij.
    for idx in 0..blocks.neighbors.len() {
        let mut mz = Matrix::zeros(h2, v);
        let mut mp = Matrix::zeros(h2, w);
        for row in 0..h2 {
            mz[(row, blocks.y().start + row)] = 1.0;
            mz[(row, blocks.y_neighbor(idx).start + row)] = -1.0;
            mp[(row, blocks.p_displacement(idx).start + row)] = -1.0;
        }
        out.push(Residual { weight: 1.0, mz, mp });
    }
    // Leader tracking: Y_1 - Y_ref.
    if let Some(range) = blocks.p_reference() {
        let mut mz = Matrix::zeros(h2, v);
        let mut mp = Matrix::zeros(h2, w);
        for row in 0..h2 {
            mz[(row, blocks.y().start + row)] = 1.0;
            mp[(row, range.start + row)] = -1.0;
        }
        out.push(Residual { weight: spec.eta, mz, mp });
    }
    out
}

/// The cost matrices together with the `p`-only part of the objective,
/// which does not affect the minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledCost {
    pub cost: AgentCost,
    /// `Σ w M_pᵀ M_p`, so the full objective is
    /// `½zᵀHz + pᵀFᵀz + pᵀ K p` up to the ridge.
    pub p_quadratic: Matrix,
}

pub fn agent_blocks(spec: &FormationSpec, i: usize) -> Result<AgentBlocks, FormationError> {
    Ok(AgentBlocks {
        horizon: spec.horizon,
        neighbors: spec.graph.neighbors(i)?,
        leader: i == LEADER,
    })
}

/// Hessian, linear term and the condensed-dynamics constraint of agent `i`.
pub fn assemble_cost(
    spec: &FormationSpec,
    model: &CondensedModel,
    i: usize,
) -> Result<AssembledCost, FormationError> {
    let blocks = agent_blocks(spec, i)?;
    let v = blocks.var_dim();
    let w = blocks.param_dim();
    let h2 = 2 * spec.horizon;
    let mut h = Matrix::identity(v, v) * HESSIAN_RIDGE;
    let mut f = Matrix::zeros(v, w);
    let mut k = Matrix::zeros(w, w);
    for res in residuals(spec, &blocks) {
        h += res.mz.transpose() * &res.mz * (2.0 * res.weight);
        f += res.mz.transpose() * &res.mp * (2.0 * res.weight);
        k += res.mp.transpose() * &res.mp * res.weight;
    }
    // Y - T U = O x
    let mut g = Matrix::zeros(h2, v);
    g.view_mut((0, blocks.u().start), (h2, h2)).copy_from(&(-&model.t));
    g.view_mut((0, blocks.y().start), (h2, h2)).copy_from(&Matrix::identity(h2, h2));
    let mut e = Matrix::zeros(h2, w);
    e.view_mut((0, blocks.p_x().start), (h2, 4)).copy_from(&model.o);
    Ok(AssembledCost { cost: AgentCost { h, f, g, e }, p_quadratic: k })
}

/// `p_i = (β_i, δ_i)` at time `t`.
pub fn agent_param(
    spec: &FormationSpec,
    i: usize,
    t: usize,
    x: &Vector,
    u_prev: &Vector,
) -> Result<StructuredParam, FormationError> {
    if x.len() != 4 {
        return Err(FormationError::Dimension { expected: 4, got: x.len() });
    }
    if u_prev.len() != 2 {
        return Err(FormationError::Dimension { expected: 2, got: u_prev.len() });
    }
    let blocks = agent_blocks(spec, i)?;
    let beta = Vector::from_iterator(6, u_prev.iter().chain(x.iter()).copied());
    let mut delta: Vec<f64> = Vec::new();
    for &j in &blocks.neighbors {
        delta.extend(spec.displacement_sequence(i, j, t).iter());
    }
    if blocks.leader {
        delta.extend(spec.reference_sequence(t).iter());
    }
    Ok(StructuredParam::new(beta, Vector::from_vec(delta)))
}

/// Cost, block layout and parameters of agent `i` at time `t`.
pub fn build_agent_cost(
    spec: &FormationSpec,
    model: &CondensedModel,
    i: usize,
    t: usize,
    x: &Vector,
    u_prev: &Vector,
) -> Result<(AgentCost, AgentBlocks, StructuredParam), FormationError> {
    let assembled = assemble_cost(spec, model, i)?;
    Ok((assembled.cost, agent_blocks(spec, i)?, agent_param(spec, i, t, x, u_prev)?))
}

/// `ζ` stacks `α_1 … α_M`; `K_i` lists `α_i` followed by the `Y`-part of
/// each neighbor's `α_j`.
pub fn canonical_layout(spec: &FormationSpec) -> Result<IndexLayout, FormationError> {
    let m = spec.agent_count();
    let h2 = 2 * spec.horizon;
    let alpha = 2 * h2;
    let offset = |i: usize| (i - 1) * alpha;
    let mut sets = Vec::with_capacity(m);
    for i in 1..=m {
        let mut set: Vec<usize> = (1..=alpha).map(|k| offset(i) + k).collect();
        for j in spec.graph.neighbors(i)? {
            set.extend((h2 + 1..=alpha).map(|k| offset(j) + k));
        }
        sets.push(set);
    }
    Ok(IndexLayout::new(m * alpha, sets, vec![alpha; m])?)
}

/// Everything needed to run closed-loop experiments on one formation.
#[derive(Debug, Clone)]
pub struct FormationProblem {
    pub spec: FormationSpec,
    pub model: RobotModel,
    pub condensed: CondensedModel,
    pub layout: IndexLayout,
    pub costs: Vec<AgentCost>,
}

impl FormationProblem {
    pub fn new(spec: FormationSpec) -> Result<Self, FormationError> {
        let model = RobotModel::double_integrator();
        let condensed = condense(&model, spec.horizon)?;
        let layout = canonical_layout(&spec)?;
        let costs = (1..=spec.agent_count())
            .map(|i| assemble_cost(&spec, &condensed, i).map(|a| a.cost))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { spec, model, condensed, layout, costs })
    }

    pub fn agent_count(&self) -> usize {
        self.spec.agent_count()
    }

    /// The consensus problem at time `t` for the given states and previous
    /// inputs.
    pub fn problem(&self, t: usize, states: &[Vector], prev_inputs: &[Vector]) -> Result<ConsensusProblem, FormationError> {
        let m = self.agent_count();
        if states.len() != m || prev_inputs.len() != m {
            return Err(FormationError::Dimension { expected: m, got: states.len().min(prev_inputs.len()) });
        }
        let params = (1..=m)
            .map(|i| agent_param(&self.spec, i, t, &states[i - 1], &prev_inputs[i - 1]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ConsensusProblem {
            graph: self.spec.graph.clone(),
            layout: self.layout.clone(),
            costs: self.costs.clone(),
            params,
        })
    }

    /// Zero inputs and the current position repeated over the horizon.
    pub fn initial_guess(&self, states: &[Vector]) -> Vec<Vector> {
        let n = self.spec.horizon;
        states
            .iter()
            .map(|x| {
                let mut g = Vector::zeros(4 * n);
                for k in 0..n {
                    g[2 * n + 2 * k] = x[0];
                    g[2 * n + 2 * k + 1] = x[1];
                }
                g
            })
            .collect()
    }

    /// `u_i(t)`: the first input of an `α_i`.
    pub fn first_input(alpha: &Vector) -> Vector {
        alpha.rows(0, 2).into_owned()
    }
}

/// A ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: Option<ScenarioKind>,
    pub formation: FormationProblem,
    pub initial_positions: Vec<[f64; 2]>,
    pub rho: f64,
    pub iterations: usize,
}

impl Scenario {
    pub fn initial_states(&self) -> Vec<Vector> {
        self.initial_positions.iter().map(|p| Vector::from_vec(vec![p[0], p[1], 0.0, 0.0])).collect()
    }
}

pub const OCTAGON_RADIUS: f64 = 10.0;

fn octagon(radius: f64) -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Uniform draws from `[-10, 10]²`.
pub fn random_positions(count: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count).map(|_| [rng.gen_range(-10.0..=10.0), rng.gen_range(-10.0..=10.0)]).collect()
}

/// Edges of the nine-agent mixed-degree graph: the central leader talks to
/// every other leaf, the leaves form a cycle, and one chord crosses it.
pub fn generic9_edges() -> Vec<(usize, usize)> {
    let mut edges = vec![(1, 2), (1, 4), (1, 6), (1, 8)];
    edges.extend((2..=9).map(|i| (i, if i == 9 { 2 } else { i + 1 })));
    edges.push((3, 7));
    edges
}

pub fn scenario(kind: ScenarioKind, seed: u64) -> Result<Scenario, FormationError> {
    let (graph, offsets, ref_start) = match kind {
        ScenarioKind::Ring8 => (CommGraph::ring(8)?, octagon(OCTAGON_RADIUS), [10.0, 0.0]),
        ScenarioKind::Star9 | ScenarioKind::Generic9 => {
            let graph = if kind == ScenarioKind::Star9 {
                CommGraph::star(9, 1)?
            } else {
                CommGraph::new(9, &generic9_edges())?
            };
            let mut offsets = vec![[0.0, 0.0]];
            offsets.extend(octagon(OCTAGON_RADIUS));
            (graph, offsets, [0.0, 0.0])
        }
    };
    let m = graph.agent_count();
    let spec = FormationSpec {
        graph,
        horizon: 4,
        r: 0.1,
        eta: 10.0,
        offsets,
        ref_start,
        ref_velocity: [1.0, 0.0],
    };
    Ok(Scenario {
        kind: Some(kind),
        formation: FormationProblem::new(spec)?,
        initial_positions: random_positions(m, seed),
        rho: 0.2,
        iterations: 5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{responsibility_sets, validate_locality};
    use crate::problem::{centralized_solve, validate_problem};
    use nalgebra::dvector;

    #[test]
    fn model_matrices() {
        let m = RobotModel::double_integrator();
        let (x, y) = step_dynamics(&m, &Vector::zeros(4), &Vector::zeros(2));
        assert_eq!(x, Vector::zeros(4));
        assert_eq!(y, Vector::zeros(2));
        let (x, y) = step_dynamics(&m, &Vector::zeros(4), &dvector![1.0, 1.0]);
        assert_eq!(x, dvector![0.5, 0.5, 1.0, 1.0]);
        assert_eq!(y, dvector![0.5, 0.5]);
    }

    #[test]
    fn condense_shapes_and_one_step() {
        let m = RobotModel::double_integrator();
        let c1 = condense(&m, 1).unwrap();
        assert_eq!(c1.o, &m.c * &m.a);
        assert_eq!(c1.t, &m.c * &m.b);
        let c4 = condense(&m, 4).unwrap();
        assert_eq!(c4.o.shape(), (8, 4));
        assert_eq!(c4.t.shape(), (8, 8));
        assert!(condense(&m, 0).is_err());
    }

    fn simulate(m: &RobotModel, x0: &Vector, u: &Vector, n: usize) -> Vector {
        let mut x = x0.clone();
        let mut y = Vec::new();
        for k in 0..n {
            let (nx, ny) = step_dynamics(m, &x, &u.rows(2 * k, 2).into_owned());
            x = nx;
            y.extend(ny.iter());
        }
        Vector::from_vec(y)
    }

    #[test]
    fn impulse_response_matches_simulation() {
        let m = RobotModel::double_integrator();
        let c = condense(&m, 4).unwrap();
        let mut u = Vector::zeros(8);
        u[0] = 1.0;
        let x0 = Vector::zeros(4);
        assert_eq!(&c.o * &x0 + &c.t * &u, simulate(&m, &x0, &u, 4));
    }

    #[test]
    fn ring_octagon_geometry() {
        let s = scenario(ScenarioKind::Ring8, 1).unwrap();
        let spec = &s.formation.spec;
        let want = 2.0 * OCTAGON_RADIUS * (PI / 8.0).sin();
        for (i, j) in spec.graph.edges() {
            let d = spec.displacement(i, j, 0);
            assert!((d[0].hypot(d[1]) - want).abs() < 1e-12);
            let back = spec.displacement(j, i, 0);
            assert_eq!([d[0] + back[0], d[1] + back[1]], [0.0, 0.0]);
        }
        assert_eq!(spec.reference(0.0), [10.0, 0.0]);
        let mut sum = [0.0, 0.0];
        for i in 1..=8 {
            let d = spec.displacement(i, i % 8 + 1, 0);
            sum = [sum[0] + d[0], sum[1] + d[1]];
        }
        assert!(sum[0].abs() < 1e-12 && sum[1].abs() < 1e-12);
    }

    #[test]
    fn layouts_are_local_on_all_graphs() {
        for kind in ScenarioKind::ALL {
            let s = scenario(kind, 2).unwrap();
            let f = &s.formation;
            assert!(validate_locality(&f.spec.graph, &f.layout).is_ok(), "{kind:?}");
            let p = f.problem(0, &s.initial_states(), &vec![Vector::zeros(2); f.agent_count()]).unwrap();
            assert!(validate_problem(&p).is_ok(), "{:?}", validate_problem(&p));
        }
        let ring = scenario(ScenarioKind::Ring8, 2).unwrap().formation;
        let sets = responsibility_sets(&ring.layout).unwrap();
        for (k, users) in sets {
            let pos = (k - 1) % 16;
            let want = if pos >= 8 { 3 } else { 1 };
            assert_eq!(users.len(), want, "entry {k}");
        }
    }

    #[test]
    fn isolated_leader_tracks_reference() {
        let spec = FormationSpec {
            graph: CommGraph::new(1, &[]).unwrap(),
            horizon: 3,
            r: 0.0,
            eta: 10.0,
            offsets: vec![[0.0, 0.0]],
            ref_start: [2.0, -1.0],
            ref_velocity: [0.5, 0.25],
        };
        let f = FormationProblem::new(spec).unwrap();
        // A state from which the reference is reachable exactly.
        let x = dvector![1.0, -2.0, 0.0, 0.0];
        let p = f.problem(0, &[x], &[Vector::zeros(2)]).unwrap();
        let sol = centralized_solve(&p).unwrap();
        let y = sol.z[0].rows(6, 6).into_owned();
        let want = f.spec.reference_sequence(0);
        assert!((y - want).amax() < 1e-4);
    }

    #[test]
    fn pair_reaches_displacement_as_r_vanishes() {
        let mut residuals = Vec::new();
        for r in [1.0, 0.1, 0.001] {
            let spec = FormationSpec {
                graph: CommGraph::ring(2).unwrap(),
                horizon: 4,
                r,
                eta: 1.0,
                offsets: vec![[0.0, 0.0], [3.0, 1.0]],
                ref_start: [0.0, 0.0],
                ref_velocity: [0.0, 0.0],
            };
            let f = FormationProblem::new(spec).unwrap();
            let states = vec![dvector![0.0, 0.0, 0.0, 0.0], dvector![-4.0, 2.0, 0.0, 0.0]];
            let p = f.problem(0, &states, &vec![Vector::zeros(2); 2]).unwrap();
            let sol = centralized_solve(&p).unwrap();
            let y1 = sol.z[0].rows(8, 8).into_owned();
            let y2 = sol.z[1].rows(8, 8).into_owned();
            let d = f.spec.displacement_sequence(1, 2, 0);
            // Only the last predicted step has enough control authority.
            residuals.push((y1 - y2 - d).rows(6, 2).amax());
        }
        assert!(residuals[1] < residuals[0] && residuals[2] < residuals[1], "{residuals:?}");
        assert!(residuals[2] < 0.05);
    }

    /// Direct evaluation of the stage cost from its named terms.
    fn direct_cost(spec: &FormationSpec, i: usize, blocks: &AgentBlocks, z: &Vector, p: &Vector) -> f64 {
        let n = spec.horizon;
        let u = z.rows(0, 2 * n);
        let y = z.rows(2 * n, 2 * n);
        let mut total = 0.0;
        for k in 0..n {
            let prev = if k == 0 { p.rows(0, 2).into_owned() } else { u.rows(2 * (k - 1), 2).into_owned() };
            total += spec.r * (u.rows(2 * k, 2) - prev).norm_squared();
        }
        for (idx, &j) in blocks.neighbors.iter().enumerate() {
            let yj = z.rows(blocks.y_neighbor(idx).start, 2 * n);
            total += (y - yj - spec.displacement_sequence(i, j, 0)).norm_squared();
        }
        if i == LEADER {
            let r = p.rows(blocks.p_reference().unwrap().start, 2 * n);
            total += spec.eta * (y - r).norm_squared();
        }
        total
    }

    #[test]
    fn assembled_cost_matches_direct_evaluation() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for kind in ScenarioKind::ALL {
            let s = scenario(kind, 4).unwrap();
            let f = &s.formation;
            for i in 1..=f.agent_count() {
                let a = assemble_cost(&f.spec, &f.condensed, i).unwrap();
                let blocks = agent_blocks(&f.spec, i).unwrap();
                let x = Vector::from_fn(4, |_, _| rng.gen_range(-5.0..5.0));
                let u = Vector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
                let p = agent_param(&f.spec, i, 3, &x, &u).unwrap().stacked();
                assert_eq!(p.len(), blocks.param_dim());
                for _ in 0..5 {
                    let z = Vector::from_fn(blocks.var_dim(), |_, _| rng.gen_range(-5.0..5.0));
                    let h = &a.cost.h - Matrix::identity(z.len(), z.len()) * HESSIAN_RIDGE;
                    let quad = 0.5 * (z.transpose() * h * &z)[0]
                        + (p.transpose() * a.cost.f.transpose() * &z)[0]
                        + (p.transpose() * &a.p_quadratic * &p)[0];
                    let direct = direct_cost(&f.spec, i, &blocks, &z, &p);
                    assert!((quad - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{quad} vs {direct}");
                }
            }
        }
    }

    #[test]
    fn initial_guess_layout() {
        let s = scenario(ScenarioKind::Star9, 3).unwrap();
        let states = s.initial_states();
        let g = s.formation.initial_guess(&states);
        assert_eq!(g[0].len(), 16);
        assert_eq!(g[0].rows(0, 8), Vector::zeros(8));
        assert_eq!(g[4][8], states[4][0]);
        assert_eq!(g[4][15], states[4][1]);
        for p in &s.initial_positions {
            assert!(p[0].abs() <= 10.0 && p[1].abs() <= 10.0);
        }
    }

    #[test]
    fn scenario_kind_parsing() {
        assert_eq!("generic9".parse::<ScenarioKind>().unwrap(), ScenarioKind::Generic9);
        assert!(matches!("hex".parse::<ScenarioKind>(), Err(FormationError::UnknownScenario(_))));
    }
}
