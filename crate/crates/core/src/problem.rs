//! The general consensus problem with quadratic, equality-constrained local
//! costs, and a centralized reference solver.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{validate_locality, CommGraph, IndexLayout};
use crate::linalg::{factor, inf_norm, is_symmetric, kkt_matrix, rank, Matrix, Vector};

/// Default feasibility tolerance for [`eval_cost`].
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("global KKT system is singular")]
    SingularKkt,
    #[error("problem is invalid: {0}")]
    Invalid(String),
}

/// One agent's cost `½ zᵀHz + pᵀFᵀz` subject to `Gz = Ep`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCost {
    pub h: Matrix,
    pub f: Matrix,
    pub g: Matrix,
    pub e: Matrix,
}

impl AgentCost {
    pub fn unconstrained(h: Matrix, f: Matrix) -> Self {
        let (v, w) = (h.nrows(), f.ncols());
        Self { h, f, g: Matrix::zeros(0, v), e: Matrix::zeros(0, w) }
    }

    /// `v_i`
    pub fn var_dim(&self) -> usize {
        self.h.nrows()
    }

    /// `w_i`
    pub fn param_dim(&self) -> usize {
        self.f.ncols()
    }

    /// `c_i`
    pub fn constraint_count(&self) -> usize {
        self.g.nrows()
    }

    pub fn check_dims(&self) -> Result<(), ProblemError> {
        let v = self.var_dim();
        let w = self.param_dim();
        let c = self.constraint_count();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(ProblemError::Dimension(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        dim("H", self.h.shape(), (v, v))?;
        dim("F", self.f.shape(), (v, w))?;
        dim("G", self.g.shape(), (c, v))?;
        dim("E", self.e.shape(), (c, w))
    }
}

/// `p_i = (β_i, δ_i)`: the agent's private part and the operator's part.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuredParam {
    pub beta: Vector,
    pub delta: Vector,
}

impl StructuredParam {
    pub fn new(beta: Vector, delta: Vector) -> Self {
        Self { beta, delta }
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(self.len(), self.beta.iter().chain(self.delta.iter()).copied())
    }
}

/// `z_i = (α_i, γ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredVar {
    pub alpha: Vector,
    pub gamma: Vector,
}

impl StructuredVar {
    pub fn split(z: &Vector, alpha_len: usize) -> Self {
        Self {
            alpha: z.rows(0, alpha_len).into_owned(),
            gamma: z.rows(alpha_len, z.len() - alpha_len).into_owned(),
        }
    }

    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(
            self.alpha.len() + self.gamma.len(),
            self.alpha.iter().chain(self.gamma.iter()).copied(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusProblem {
    pub graph: CommGraph,
    pub layout: IndexLayout,
    pub costs: Vec<AgentCost>,
    pub params: Vec<StructuredParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ProblemIssue {
    AgentCount { graph: usize, layout: usize, costs: usize, params: usize },
    Dimension { agent: usize, detail: String },
    NotSymmetric { agent: usize },
    NotPositiveDefinite { agent: usize },
    KktSingular { agent: usize },
    Locality(String),
}

impl std::fmt::Display for ProblemIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::AgentCount { graph, layout, costs, params } => write!(
                f,
                "agent counts disagree: graph {graph}, layout {layout}, costs {costs}, params {params}"
            ),
            Self::Dimension { agent, detail } => write!(f, "agent {agent}: {detail}"),
            Self::NotSymmetric { agent } => write!(f, "agent {agent}: H not symmetric"),
            Self::NotPositiveDefinite { agent } => write!(f, "agent {agent}: H not positive definite"),
            Self::KktSingular { agent } => write!(f, "agent {agent}: KKT singular"),
            Self::Locality(msg) => write!(f, "locality: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProblemReport {
    pub issues: Vec<ProblemIssue>,
}

impl ProblemReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<(), ProblemError> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
            Err(ProblemError::Invalid(msgs.join("; ")))
        }
    }
}

/// Checks the local cost assumptions of one agent.
pub fn validate_cost(agent: usize, cost: &AgentCost) -> Vec<ProblemIssue> {
    if let Err(ProblemError::Dimension(detail)) = cost.check_dims() {
        return vec![ProblemIssue::Dimension { agent, detail }];
    }
    let mut issues = Vec::new();
    if !is_symmetric(&cost.h, 1e-10) {
        issues.push(ProblemIssue::NotSymmetric { agent });
    } else if cost.h.clone().cholesky().is_none() {
        issues.push(ProblemIssue::NotPositiveDefinite { agent });
    }
    // With H positive definite the KKT matrix is nonsingular iff G has full
    // row rank, which also makes Gz = Ep solvable for every p.
    let c = cost.constraint_count();
    if c > 0 && (c > cost.var_dim() || rank(&cost.g) < c) {
        issues.push(ProblemIssue::KktSingular { agent });
    }
    issues
}

pub fn validate_problem(p: &ConsensusProblem) -> ProblemReport {
    let mut report = ProblemReport::default();
    let m = p.graph.agent_count();
    if p.layout.agent_count() != m || p.costs.len() != m || p.params.len() != m {
        report.issues.push(ProblemIssue::AgentCount {
            graph: m,
            layout: p.layout.agent_count(),
            costs: p.costs.len(),
            params: p.params.len(),
        });
        return report;
    }
    for (idx, (cost, param)) in p.costs.iter().zip(&p.params).enumerate() {
        let agent = idx + 1;
        let local_issues = validate_cost(agent, cost);
        let dims_ok = !local_issues.iter().any(|i| matches!(i, ProblemIssue::Dimension { .. }));
        report.issues.extend(local_issues);
        if dims_ok {
            if cost.var_dim() != p.layout.local_dim(agent) {
                report.issues.push(ProblemIssue::Dimension {
                    agent,
                    detail: format!(
                        "H is {0}x{0} but |K_i| = {1}",
                        cost.var_dim(),
                        p.layout.local_dim(agent)
                    ),
                });
            }
            if cost.param_dim() != param.len() {
                report.issues.push(ProblemIssue::Dimension {
                    agent,
                    detail: format!("F has {} columns but p has {} entries", cost.param_dim(), param.len()),
                });
            }
        }
    }
    let locality = validate_locality(&p.graph, &p.layout);
    report.issues.extend(locality.errors.into_iter().map(ProblemIssue::Locality));
    report
        .issues
        .extend(locality.violations.into_iter().map(|v| ProblemIssue::Locality(v.to_string())));
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostValue {
    Finite(f64),
    Infeasible,
}

impl CostValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            Self::Infeasible => None,
        }
    }
}

pub fn eval_cost(cost: &AgentCost, z: &Vector, p: &Vector) -> Result<CostValue, ProblemError> {
    eval_cost_with_tol(cost, z, p, FEAS_TOL)
}

pub fn eval_cost_with_tol(
    cost: &AgentCost,
    z: &Vector,
    p: &Vector,
    feas_tol: f64,
) -> Result<CostValue, ProblemError> {
    cost.check_dims()?;
    if z.len() != cost.var_dim() || p.len() != cost.param_dim() {
        return Err(ProblemError::Dimension(format!(
            "z has {} entries (expected {}), p has {} (expected {})",
            z.len(),
            cost.var_dim(),
            p.len(),
            cost.param_dim()
        )));
    }
    if cost.constraint_count() > 0 && inf_norm(&(&cost.g * z - &cost.e * p)) > feas_tol {
        return Ok(CostValue::Infeasible);
    }
    let fp = &cost.f * p;
    Ok(CostValue::Finite(0.5 * z.dot(&(&cost.h * z)) + fp.dot(z)))
}

/// Exact minimizer of the consensus problem.
#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    pub zeta: Vector,
    pub z: Vec<Vector>,
    /// Multipliers of each agent's equality constraints.
    pub mu: Vec<Vector>,
}

impl CentralizedSolution {
    /// `‖Σ_i S_iᵀ(H_i z_i + F_i p_i + G_iᵀ μ_i)‖_∞`: stationarity of the
    /// reduced problem, i.e. the per-agent consensus duals sum to zero.
    pub fn stationarity_residual(&self, p: &ConsensusProblem) -> f64 {
        let mut acc = Vector::zeros(p.layout.global_dim());
        for (idx, cost) in p.costs.iter().enumerate() {
            let agent = idx + 1;
            let grad = &cost.h * &self.z[idx]
                + &cost.f * p.params[idx].stacked()
                + cost.g.transpose() * &self.mu[idx];
            for (pos, &k) in p.layout.index_set(agent).iter().enumerate() {
                acc[k - 1] += grad[pos];
            }
        }
        inf_norm(&acc)
    }

    pub fn feasibility_residual(&self, p: &ConsensusProblem) -> f64 {
        p.costs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.constraint_count() > 0)
            .map(|(idx, c)| inf_norm(&(&c.g * &self.z[idx] - &c.e * p.params[idx].stacked())))
            .fold(0.0, f64::max)
    }
}

/// Solves the consensus problem in one shot by substituting `z_i = (ζ)_{K_i}`
/// and factoring the resulting global KKT system.
pub fn centralized_solve(p: &ConsensusProblem) -> Result<CentralizedSolution, ProblemError> {
    validate_problem(p).into_result()?;
    let nu = p.layout.global_dim();
    let total_c: usize = p.costs.iter().map(AgentCost::constraint_count).sum();

    let mut hess = Matrix::zeros(nu, nu);
    let mut grad = Vector::zeros(nu);
    let mut cons = Matrix::zeros(total_c, nu);
    let mut rhs_c = Vector::zeros(total_c);
    let mut row = 0;
    for (idx, cost) in p.costs.iter().enumerate() {
        let ks = p.layout.index_set(idx + 1);
        let pv = p.params[idx].stacked();
        let fp = &cost.f * &pv;
        for (a, &ka) in ks.iter().enumerate() {
            grad[ka - 1] += fp[a];
            for (b, &kb) in ks.iter().enumerate() {
                hess[(ka - 1, kb - 1)] += cost.h[(a, b)];
            }
        }
        let c = cost.constraint_count();
        if c > 0 {
            let ep = &cost.e * &pv;
            for r in 0..c {
                rhs_c[row + r] = ep[r];
                for (a, &ka) in ks.iter().enumerate() {
                    cons[(row + r, ka - 1)] = cost.g[(r, a)];
                }
            }
            row += c;
        }
    }

    let kkt = kkt_matrix(&hess, &cons);
    let mut rhs = Vector::zeros(nu + total_c);
    rhs.rows_mut(0, nu).copy_from(&(-grad));
    rhs.rows_mut(nu, total_c).copy_from(&rhs_c);
    let lu = factor(&kkt).ok_or(ProblemError::SingularKkt)?;
    let sol = lu.solve(&rhs).ok_or(ProblemError::SingularKkt)?;

    let zeta = sol.rows(0, nu).into_owned();
    let mut z = Vec::with_capacity(p.costs.len());
    let mut mu = Vec::with_capacity(p.costs.len());
    let mut row = nu;
    for (idx, cost) in p.costs.iter().enumerate() {
        let ks = p.layout.index_set(idx + 1);
        z.push(Vector::from_iterator(ks.len(), ks.iter().map(|&k| zeta[k - 1])));
        let c = cost.constraint_count();
        mu.push(sol.rows(row, c).into_owned());
        row += c;
    }
    Ok(CentralizedSolution { zeta, z, mu })
}
