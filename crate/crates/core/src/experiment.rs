//! Closed-loop formation experiments in the three solution modes, plus the
//! static checks that precede a run.
//!
//! Every mode starts from the same initial states and applies the first input
//! of its own solution at each step. ADMM starts from zero inputs and the
//! initial position at `t = 0` and from the previous `α_i^ℓ` afterwards.
//! The encrypted mode also runs plaintext ADMM on exactly the problem and
//! guess it used, so its deviation is measured per step and does not
//! accumulate through the closed loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{run_plain_admm, AdmmError, AdmmParams};
use crate::fixed_point::{FpCodec, FpError};
use crate::formation::{
    scenario, step_dynamics, FormationError, FormationProblem, FormationSpec, Scenario, ScenarioKind, LEADER,
};
use crate::graph::{validate_locality, CommGraph, IndexLayout};
use crate::he::{detect_key_cycles, KeyRegistry, SchemePreset};
use crate::linalg::Vector;
use crate::problem::{centralized_solve, validate_problem, ProblemError};
use crate::protocol::{default_delegates, AuditReport, EncryptedSystem, ProtocolConfig, ProtocolError, RunStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    Plain,
    Encrypted,
}

impl Mode {
    pub const ALL: [Self; 3] = [Self::Centralized, Self::Plain, Self::Encrypted];

    pub fn name(self) -> &'static str {
        match self {
            Self::Centralized => "centralized",
            Self::Plain => "plain",
            Self::Encrypted => "encrypted",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("encoding budget: {0}")]
    Budget(String),
    #[error(transparent)]
    Formation(#[from] FormationError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Codec(#[from] FpError),
}

/// Power-of-two fixed-point parameters: `S = 2^s_bits · 2^sigma_bits`,
/// `q = 2^q0_bits · S^levels`, values in `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub s_bits: u32,
    pub sigma_bits: u32,
    pub q0_bits: u32,
    pub levels: u32,
    pub bound: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { s_bits: 12, sigma_bits: 11, q0_bits: 25, levels: 16, bound: 100.0 }
    }
}

impl CodecConfig {
    pub fn codec(&self) -> Result<FpCodec, ExperimentError> {
        Ok(FpCodec::pow2(self.s_bits, self.sigma_bits, self.q0_bits, self.levels, self.bound)?)
    }
}

/// A formation given explicitly instead of by a built-in kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomFormation {
    pub agents: usize,
    /// Undirected edges between 1-based agent ids.
    pub edges: Vec<(usize, usize)>,
    /// Ideal position of every agent relative to a common origin.
    pub offsets: Vec<[f64; 2]>,
    pub initial_positions: Vec<[f64; 2]>,
    #[serde(default)]
    pub ref_start: [f64; 2],
    #[serde(default = "unit_x")]
    pub ref_velocity: [f64; 2],
    /// Replaces each `K_i` of the canonical layout; only useful for checking
    /// layouts with `verify`.
    #[serde(default)]
    pub index_sets: Option<Vec<Vec<usize>>>,
}

fn unit_x() -> [f64; 2] {
    [1.0, 0.0]
}

/// Everything a run needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    /// Takes precedence over `scenario` when present.
    pub custom: Option<CustomFormation>,
    /// Closed-loop time steps `T`.
    pub steps: usize,
    pub modes: Vec<Mode>,
    pub horizon: Option<usize>,
    pub r: Option<f64>,
    pub eta: Option<f64>,
    pub rho: Option<f64>,
    /// ADMM iterations `ℓ` per time step.
    pub iterations: Option<usize>,
    pub codec: CodecConfig,
    pub scheme: SchemePreset,
    /// Draws the initial positions of built-in scenarios.
    pub seed: u64,
    /// Seeds keys, channels and encryption randomness; defaults to `seed`.
    pub protocol_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Ring8,
            custom: None,
            steps: 20,
            modes: Mode::ALL.to_vec(),
            horizon: None,
            r: None,
            eta: None,
            rho: None,
            iterations: None,
            codec: CodecConfig::default(),
            scheme: SchemePreset::Toy,
            seed: 0,
            protocol_seed: None,
        }
    }
}

/// Multiplicative depth a run with `ℓ` iterations is budgeted for.
pub fn required_depth(iterations: usize) -> u32 {
    3 * iterations as u32 + 1
}

impl ExperimentConfig {
    /// The scenario with all overrides applied. A layout override is kept
    /// even when it breaks the cost structure, so `verify` can report it.
    pub fn build_scenario(&self) -> Result<Scenario, ExperimentError> {
        let mut sc = match &self.custom {
            None => scenario(self.scenario, self.seed)?,
            Some(c) => custom_scenario(c)?,
        };
        let spec = &sc.formation.spec;
        if self.horizon.is_some() || self.r.is_some() || self.eta.is_some() {
            let spec = FormationSpec {
                horizon: self.horizon.unwrap_or(spec.horizon),
                r: self.r.unwrap_or(spec.r),
                eta: self.eta.unwrap_or(spec.eta),
                ..spec.clone()
            };
            sc.formation = FormationProblem::new(spec)?;
        }
        if let Some(sets) = self.custom.as_ref().and_then(|c| c.index_sets.clone()) {
            let l = &sc.formation.layout;
            let alpha_lens = (1..=l.agent_count()).map(|i| l.alpha_len(i)).collect();
            sc.formation.layout = IndexLayout::new(l.global_dim(), sets, alpha_lens)
                .map_err(|e| ExperimentError::Config(format!("index_sets: {e}")))?;
        }
        if let Some(rho) = self.rho {
            sc.rho = rho;
        }
        if let Some(l) = self.iterations {
            sc.iterations = l;
        }
        if !(sc.rho > 0.0 && sc.rho.is_finite()) {
            return Err(ExperimentError::Config(format!("rho must be positive, got {}", sc.rho)));
        }
        if sc.iterations == 0 {
            return Err(ExperimentError::Config("iterations must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(ExperimentError::Config("no modes selected".into()));
        }
        Ok(sc)
    }

    fn protocol_seed(&self) -> u64 {
        self.protocol_seed.unwrap_or(self.seed)
    }
}

fn custom_scenario(c: &CustomFormation) -> Result<Scenario, ExperimentError> {
    if c.offsets.len() != c.agents || c.initial_positions.len() != c.agents {
        return Err(ExperimentError::Config(format!(
            "{} agents need {0} offsets and initial positions",
            c.agents
        )));
    }
    let graph = CommGraph::new(c.agents, &c.edges).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let spec = FormationSpec {
        graph,
        horizon: 4,
        r: 0.1,
        eta: 10.0,
        offsets: c.offsets.clone(),
        ref_start: c.ref_start,
        ref_velocity: c.ref_velocity,
    };
    Ok(Scenario {
        kind: None,
        formation: FormationProblem::new(spec)?,
        initial_positions: c.initial_positions.clone(),
        rho: 0.2,
        iterations: 5,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.ok)
    }
}

fn check(name: &'static str, result: Result<String, String>) -> Check {
    match result {
        Ok(detail) => Check { name, ok: true, detail },
        Err(detail) => Check { name, ok: false, detail },
    }
}

/// Static checks of a configuration; nothing is encrypted or simulated.
pub fn verify(config: &ExperimentConfig) -> VerifyReport {
    let mut checks = Vec::new();
    let sc = match config.build_scenario() {
        Ok(sc) => sc,
        Err(e) => {
            checks.push(check("config", Err(e.to_string())));
            return VerifyReport { checks };
        }
    };
    checks.push(check("config", Ok(format!("{} agents, ell = {}", sc.formation.agent_count(), sc.iterations))));
    let f = &sc.formation;

    let loc = validate_locality(&f.spec.graph, &f.layout);
    let detail = loc.violations.iter().map(ToString::to_string).chain(loc.errors.iter().cloned()).collect::<Vec<_>>();
    checks.push(check(
        "locality",
        if loc.is_ok() { Ok(format!("{} entries", f.layout.global_dim())) } else { Err(detail.join("; ")) },
    ));

    let states = sc.initial_states();
    let prev = vec![Vector::zeros(2); f.agent_count()];
    let problem = f.problem(0, &states, &prev).map_err(|e| e.to_string()).and_then(|p| {
        let r = validate_problem(&p);
        if r.is_ok() {
            Ok(format!("{} agents", p.layout.agent_count()))
        } else {
            Err(r.issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        }
    });
    checks.push(check("problem", problem));

    let depth = required_depth(sc.iterations);
    let budget = config
        .codec
        .codec()
        .map_err(|e| e.to_string())
        .and_then(|c| c.budget_check(depth).map(|()| format!("depth {depth} within {} levels", c.levels())).map_err(|v| v.to_string()));
    checks.push(check("budget", budget));

    let delegates = default_delegates(&f.spec.graph);
    let lonely: Vec<usize> = f.spec.graph.agents().filter(|i| !delegates.contains_key(i)).collect();
    let mut registry = KeyRegistry::new();
    for i in f.spec.graph.agents() {
        registry.insert_unchecked(0, i as u32);
    }
    let cycles = detect_key_cycles(&registry);
    checks.push(check(
        "key_cycles",
        if cycles.is_empty() { Ok(format!("{} switch keys from instance 0", f.agent_count())) } else { Err(format!("{cycles:?}")) },
    ));
    checks.push(check(
        "delegates",
        if lonely.is_empty() { Ok(format!("{delegates:?}")) } else { Err(format!("agents {lonely:?} have no neighbor")) },
    ));
    VerifyReport { checks }
}

/// One agent at one step: the position `y_i(t)` reached after applying
/// `u_i(t-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub agent: usize,
    pub y: [f64; 2],
    pub u: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub mode: Mode,
    pub initial: Vec<[f64; 2]>,
    /// Ordered by `t`, then agent.
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    /// Positions at the last step, or the initial ones when `T = 0`.
    pub fn final_positions(&self) -> Vec<[f64; 2]> {
        let m = self.initial.len();
        if self.rows.len() < m {
            return self.initial.clone();
        }
        self.rows[self.rows.len() - m..].iter().map(|r| r.y).collect()
    }

    pub fn steps(&self) -> usize {
        self.rows.len() / self.initial.len().max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDeviation {
    pub t: usize,
    /// `max |α_enc − α_plain|` on the encrypted run's own problem.
    pub encrypted_vs_plain: Option<f64>,
    /// `max |α_plain − α*|` on the plain run's own problem.
    pub plain_vs_centralized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub steps: Vec<StepDeviation>,
    pub max_encrypted_vs_plain: Option<f64>,
    pub max_plain_vs_centralized: Option<f64>,
    /// Largest position gap between the closed-loop trajectories.
    pub trajectory_encrypted_vs_plain: Option<f64>,
    pub trajectory_plain_vs_centralized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncryptedSummary {
    pub stats: RunStats,
    pub audit: AuditReport,
    pub messages: usize,
    pub bytes: usize,
    /// Whether the observed depth fits the codec for the configured bound.
    pub budget_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub scenario: String,
    pub agents: usize,
    pub steps: usize,
    pub iterations: usize,
    /// Ideal position of every agent relative to the leader.
    pub ideal_relative: Vec<[f64; 2]>,
    /// Ideal absolute positions at the last step `T`.
    pub ideal_final: Vec<[f64; 2]>,
    pub trajectories: BTreeMap<Mode, Trajectory>,
    pub deviations: DeviationReport,
    /// `max_i ‖(y_i − y_1) − (o_i − o_1)‖₂` at the last step, per mode.
    pub formation_error: BTreeMap<Mode, f64>,
    pub encrypted: Option<EncryptedSummary>,
    pub timings: Vec<PhaseTiming>,
    /// The encrypted run's message log, one JSON object per line.
    #[serde(skip)]
    pub message_log: Option<String>,
}

/// Called after every completed step with the mode and `t`.
pub type Progress<'a> = &'a mut dyn FnMut(Mode, usize);

fn max_abs_diff(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn trajectory_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    a.rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| (x.y[0] - y.y[0]).abs().max((x.y[1] - y.y[1]).abs()))
        .fold(0.0, f64::max)
}

fn formation_error(spec: &FormationSpec, positions: &[[f64; 2]]) -> f64 {
    let lead = positions[LEADER - 1];
    (1..=positions.len())
        .map(|i| {
            let d = spec.displacement(i, LEADER, 0);
            let p = positions[i - 1];
            ((p[0] - lead[0] - d[0]).powi(2) + (p[1] - lead[1] - d[1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

struct ClosedLoop {
    states: Vec<Vector>,
    prev: Vec<Vector>,
    /// `α_i^ℓ` of the previous step, the initial guess of the next one.
    warm: Vec<Vector>,
    traj: Trajectory,
}

impl ClosedLoop {
    fn new(mode: Mode, sc: &Scenario) -> Self {
        let m = sc.formation.agent_count();
        let states = sc.initial_states();
        Self {
            warm: sc.formation.initial_guess(&states),
            states,
            prev: vec![Vector::zeros(2); m],
            traj: Trajectory { mode, initial: sc.initial_positions.clone(), rows: Vec::new() },
        }
    }

    /// Applies the first input of every `α_i` and records the step.
    fn apply(&mut self, sc: &Scenario, t: usize, alpha: &[Vector]) {
        for (i, a) in alpha.iter().enumerate() {
            let u = FormationProblem::first_input(a);
            let (x, y) = step_dynamics(&sc.formation.model, &self.states[i], &u);
            self.states[i] = x;
            self.traj.rows.push(TrajectoryRow { t: t + 1, agent: i + 1, y: [y[0], y[1]], u: [u[0], u[1]] });
            self.prev[i] = u;
        }
        self.warm = alpha.to_vec();
    }
}

fn centralized_alpha(p: &crate::problem::ConsensusProblem) -> Result<Vec<Vector>, ExperimentError> {
    let sol = centralized_solve(p)?;
    Ok((1..=p.layout.agent_count())
        .map(|i| Vector::from_iterator(p.layout.alpha_len(i), p.layout.alpha_set(i).iter().map(|&k| sol.zeta[k - 1])))
        .collect())
}

/// Runs every configured mode for `steps` closed-loop steps.
pub fn run_experiment(config: &ExperimentConfig, mut progress: Option<Progress<'_>>) -> Result<ExperimentResult, ExperimentError> {
    let sc = config.build_scenario()?;
    let codec = config.codec.codec()?;
    codec
        .budget_check(required_depth(sc.iterations))
        .map_err(|v| ExperimentError::Budget(format!("ell = {} needs depth {}: {v}", sc.iterations, required_depth(sc.iterations))))?;
    let loc = validate_locality(&sc.formation.spec.graph, &sc.formation.layout);
    if !loc.is_ok() {
        return Err(ExperimentError::Config(format!("layout is not local: {:?}", loc.violations)));
    }
    let f = &sc.formation;
    let m = f.agent_count();
    let admm = AdmmParams::new(sc.rho, sc.iterations)?;
    let mut modes = config.modes.clone();
    modes.sort();
    modes.dedup();

    let mut trajectories = BTreeMap::new();
    let mut steps: Vec<StepDeviation> =
        (1..=config.steps).map(|t| StepDeviation { t, encrypted_vs_plain: None, plain_vs_centralized: None }).collect();
    let mut timings = Vec::new();
    let mut encrypted = None;
    let mut message_log = None;

    for mode in modes {
        let start = Instant::now();
        let mut run = ClosedLoop::new(mode, &sc);
        match mode {
            Mode::Centralized => {
                for t in 0..config.steps {
                    let p = f.problem(t, &run.states, &run.prev)?;
                    let alpha = centralized_alpha(&p)?;
                    run.apply(&sc, t, &alpha);
                    if let Some(cb) = progress.as_mut() {
                        cb(mode, t);
                    }
                }
            }
            Mode::Plain => {
                for t in 0..config.steps {
                    let p = f.problem(t, &run.states, &run.prev)?;
                    let alpha = run_plain_admm(&p, &admm, &run.warm)?.final_alpha(&p.layout);
                    steps[t].plain_vs_centralized = Some(max_abs_diff(&alpha, &centralized_alpha(&p)?));
                    run.apply(&sc, t, &alpha);
                    if let Some(cb) = progress.as_mut() {
                        cb(mode, t);
                    }
                }
            }
            Mode::Encrypted => {
                let mut pc = ProtocolConfig::new(sc.rho, sc.iterations, config.scheme, codec.clone(), config.protocol_seed());
                pc.delegates.clear();
                let p0 = f.problem(0, &run.states, &run.prev)?;
                let betas: Vec<usize> = p0.params.iter().map(|q| q.beta.len()).collect();
                let mut sys = EncryptedSystem::setup(&f.spec.graph, &f.layout, &f.costs, &betas, pc)?;
                timings.push(PhaseTiming { phase: "encrypted setup".into(), seconds: start.elapsed().as_secs_f64() });
                for t in 0..config.steps {
                    let p = f.problem(t, &run.states, &run.prev)?;
                    let out = sys.solve(&p.params, &run.warm)?;
                    let shadow = run_plain_admm(&p, &admm, &run.warm)?.final_alpha(&p.layout);
                    steps[t].encrypted_vs_plain = Some(max_abs_diff(&out.alpha, &shadow));
                    run.apply(&sc, t, &out.alpha);
                    if let Some(cb) = progress.as_mut() {
                        cb(mode, t);
                    }
                }
                let stats = sys.stats();
                let budget_ok = codec.budget_check(stats.max_scale_exp).is_ok();
                encrypted = Some(EncryptedSummary {
                    stats,
                    audit: sys.audit(),
                    messages: sys.transport().message_count(),
                    bytes: sys.transport().bytes_sent(),
                    budget_ok,
                });
                message_log = Some(sys.transport().to_jsonl());
            }
        }
        timings.push(PhaseTiming { phase: format!("{mode} run"), seconds: start.elapsed().as_secs_f64() });
        trajectories.insert(mode, run.traj);
    }

    let max_of = |sel: fn(&StepDeviation) -> Option<f64>| {
        steps.iter().filter_map(sel).fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
    };
    let gap = |a: Mode, b: Mode| Some(trajectory_gap(trajectories.get(&a)?, trajectories.get(&b)?));
    let deviations = DeviationReport {
        max_encrypted_vs_plain: max_of(|s| s.encrypted_vs_plain),
        max_plain_vs_centralized: max_of(|s| s.plain_vs_centralized),
        trajectory_encrypted_vs_plain: gap(Mode::Encrypted, Mode::Plain),
        trajectory_plain_vs_centralized: gap(Mode::Plain, Mode::Centralized),
        steps,
    };
    let formation_error =
        trajectories.iter().map(|(&mode, tr)| (mode, formation_error(&f.spec, &tr.final_positions()))).collect();
    let ideal_relative = (1..=m).map(|i| f.spec.displacement(i, LEADER, 0)).collect();
    let ideal_final = (1..=m).map(|i| f.spec.ideal_position(i, config.steps as f64)).collect();
    Ok(ExperimentResult {
        scenario: sc.kind.map_or("custom", ScenarioKind::name).to_string(),
        agents: m,
        steps: config.steps,
        iterations: sc.iterations,
        ideal_relative,
        ideal_final,
        trajectories,
        deviations,
        formation_error,
        encrypted,
        timings,
        message_log,
    })
}
