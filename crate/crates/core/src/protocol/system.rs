//! Round scheduler driving all nodes through setup, initialization, the
//! encrypted iterations and the final key switch.

use std::collections::BTreeMap;

use serde::Serialize;

use super::audit::{audit_trace, AuditReport, Roles};
use super::message::{MessageKind, Payload};
use super::node::{AgentNode, AgentSetup, OperatorNode};
use super::transport::{AuditTap, InMemoryTransport};
use super::ProtocolError;
use crate::admm::Schedule;
use crate::channel::establish;
use crate::fixed_point::FpCodec;
use crate::graph::{responsibility_sets, CommGraph, IndexLayout};
use crate::he::{detect_key_cycles, keygen, HeScheme, SchemePreset};
use crate::linalg::Vector;
use crate::problem::{AgentCost, StructuredParam};

/// Deliberate protocol breaches used to exercise the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FaultInjection {
    /// The first z share of the first iteration goes out unsealed.
    UnsealedZShare,
    /// An averaged ζ share is also sent to the operator.
    IterateToOperator,
    /// The operator also hands agent 1 its own switch key.
    SwitchKeyToSubject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub rho: f64,
    /// `ℓ`, ADMM iterations per control step.
    pub iterations: usize,
    pub preset: SchemePreset,
    pub codec: FpCodec,
    pub seed: u64,
    /// Overrides of the default lowest-id-neighbor delegate.
    pub delegates: BTreeMap<usize, usize>,
    pub fault: Option<FaultInjection>,
}

impl ProtocolConfig {
    pub fn new(rho: f64, iterations: usize, preset: SchemePreset, codec: FpCodec, seed: u64) -> Self {
        Self { rho, iterations, preset, codec, seed, delegates: BTreeMap::new(), fault: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub steps: usize,
    pub max_scale_exp: u32,
    /// Largest noise bound seen, relative to the decryption margin.
    pub max_noise_ratio: f64,
    pub key_switches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Decoded `α_i^ℓ` for every agent.
    pub alpha: Vec<Vector>,
    pub max_scale_exp: u32,
}

/// Lowest-id neighbor of every agent that has one.
pub fn default_delegates(graph: &CommGraph) -> BTreeMap<usize, usize> {
    graph
        .agents()
        .filter_map(|i| graph.neighbors(i).ok().and_then(|n| n.first().map(|&j| (i, j))))
        .collect()
}

fn resolve_delegates(graph: &CommGraph, overrides: &BTreeMap<usize, usize>) -> Result<BTreeMap<usize, usize>, ProtocolError> {
    let mut out = default_delegates(graph);
    for (&i, &j) in overrides {
        if i == j {
            return Err(ProtocolError::SelfDelegate(i as u32));
        }
        if !graph.has_edge(i, j) {
            return Err(ProtocolError::DelegateNotNeighbor { agent: i as u32, delegate: j as u32 });
        }
        out.insert(i, j);
    }
    Ok(out)
}

/// All nodes of one deployment plus the transport connecting them.
#[derive(Debug)]
pub struct EncryptedSystem {
    scheme: HeScheme,
    operator: OperatorNode,
    agents: Vec<AgentNode>,
    transport: InMemoryTransport,
    schedule: Schedule,
    users: BTreeMap<usize, usize>,
    roles: Roles,
    config: ProtocolConfig,
    cost_reals: Vec<Vec<f64>>,
    round: u64,
    stats: RunStats,
}

impl EncryptedSystem {
    /// Key generation, channel provisioning and operator setup.
    ///
    /// `beta_lens[i-1]` splits agent `i`'s parameter into the part it
    /// encrypts itself and the part the operator supplies.
    pub fn setup(
        graph: &CommGraph,
        layout: &IndexLayout,
        costs: &[AgentCost],
        beta_lens: &[usize],
        config: ProtocolConfig,
    ) -> Result<Self, ProtocolError> {
        let m = layout.agent_count();
        if costs.len() != m || beta_lens.len() != m || graph.agent_count() != m {
            return Err(ProtocolError::Invalid("graph, layout, costs and beta lengths disagree".into()));
        }
        if config.iterations == 0 {
            return Err(ProtocolError::Invalid("at least one iteration is required".into()));
        }
        let scheme = HeScheme::from_preset(config.codec.clone(), config.preset)?;
        let schedule = Schedule::new(graph, layout)?;
        let users: BTreeMap<usize, usize> = responsibility_sets(layout)
            .map_err(|e| ProtocolError::Invalid(e.to_string()))?
            .into_iter()
            .map(|(k, u)| (k, u.len()))
            .collect();
        let delegates = resolve_delegates(graph, &config.delegates)?;

        let mut tap = AuditTap::new(scheme.clone());
        let mut op_channels = BTreeMap::new();
        let mut agent_channels: Vec<BTreeMap<u32, _>> = vec![BTreeMap::new(); m];
        for i in 1..=m as u32 {
            let key = establish((0, i), config.seed)?;
            tap.add_channel(key.clone());
            op_channels.insert(i, key.clone());
            agent_channels[i as usize - 1].insert(0, key);
        }
        for (i, j) in graph.edges() {
            let key = establish((i as u32, j as u32), config.seed)?;
            tap.add_channel(key.clone());
            agent_channels[i - 1].insert(j as u32, key.clone());
            agent_channels[j - 1].insert(i as u32, key);
        }

        let op_keys = keygen(&scheme, 0, config.seed);
        let pk0 = op_keys.pk.clone();
        let operator = OperatorNode::new(op_keys, op_channels, config.seed);
        let mut agents = Vec::with_capacity(m);
        for (idx, channels) in agent_channels.into_iter().enumerate() {
            let i = idx + 1;
            agents.push(AgentNode::new(
                &scheme,
                AgentSetup {
                    id: i as u32,
                    cost: &costs[idx],
                    beta_len: beta_lens[idx],
                    rho: config.rho,
                    layout,
                    users: &users,
                    keys: keygen(&scheme, i as u32, config.seed),
                    pk0: pk0.clone(),
                    channels,
                    delegate: delegates.get(&i).map(|&j| j as u32),
                    seed: config.seed,
                },
            )?);
        }
        let cost_reals = costs
            .iter()
            .map(|c| c.h.iter().chain(c.f.iter()).chain(c.g.iter()).chain(c.e.iter()).copied().collect())
            .collect();
        let mut system = Self {
            scheme,
            operator,
            agents,
            transport: InMemoryTransport::new(tap),
            schedule,
            users,
            roles: Roles::from_layout(layout),
            config,
            cost_reals,
            round: 0,
            stats: RunStats::default(),
        };
        system.operator_setup()?;
        Ok(system)
    }

    /// Issues `0 → i` to each agent's delegate, sealed.
    fn operator_setup(&mut self) -> Result<(), ProtocolError> {
        let base = self.next_round();
        for idx in 0..self.agents.len() {
            let subject = self.agents[idx].id();
            let Some(delegate) = self.agents[idx].delegate() else { continue };
            let pk = self.agents[idx].public_key().clone();
            let key = self.operator.issue_switch_key(&self.scheme, &pk)?;
            let payload = Payload::SwitchKey(key);
            let round = base + subject as u64;
            let msg = self.operator.envelope(&self.scheme, delegate, round, MessageKind::SwitchKeyDelivery, &payload)?;
            self.transport.send(&msg)?;
            if self.config.fault == Some(FaultInjection::SwitchKeyToSubject) && subject == 1 {
                let msg = self.operator.envelope(&self.scheme, subject, round, MessageKind::SwitchKeyDelivery, &payload)?;
                self.transport.send(&msg)?;
            }
        }
        self.round = base + self.agents.len() as u64;
        let cycles = detect_key_cycles(self.operator.registry());
        if !cycles.is_empty() {
            return Err(ProtocolError::KeyCycles(cycles));
        }
        self.deliver_all()
    }

    fn next_round(&mut self) -> u64 {
        self.round += 1;
        self.round
    }

    /// Delivers everything queued, agents in id order, then the operator.
    fn deliver_all(&mut self) -> Result<(), ProtocolError> {
        for idx in 0..self.agents.len() {
            let id = self.agents[idx].id();
            for msg in self.transport.receive(id)? {
                self.agents[idx].accept(&self.scheme, &msg)?;
            }
        }
        for msg in self.transport.receive(0)? {
            self.operator.accept(&msg);
        }
        Ok(())
    }

    pub fn scheme(&self) -> &HeScheme {
        &self.scheme
    }

    pub fn agents(&self) -> &[AgentNode] {
        &self.agents
    }

    pub fn operator(&self) -> &OperatorNode {
        &self.operator
    }

    pub fn transport(&self) -> &InMemoryTransport {
        &self.transport
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn audit(&self) -> AuditReport {
        audit_trace(self.transport.log(), &self.roles)
    }

    /// δ delivery, β encryption and the encrypted initialization.
    pub fn begin_step(&mut self, params: &[StructuredParam], guesses: &[Vector]) -> Result<(), ProtocolError> {
        let m = self.agents.len();
        if params.len() != m || guesses.len() != m {
            return Err(ProtocolError::Invalid(format!("{m} agents need {m} parameters and guesses")));
        }
        for (idx, agent) in self.agents.iter_mut().enumerate() {
            let mut private = self.cost_reals[idx].clone();
            private.extend(params[idx].beta.iter());
            private.extend(guesses[idx].iter());
            self.transport.tap_mut().set_private(agent.id(), &private);
            agent.begin(&self.scheme, &params[idx].beta, &guesses[idx])?;
        }
        let round = self.next_round();
        for (idx, param) in params.iter().enumerate() {
            if param.delta.is_empty() {
                continue;
            }
            let payload = self.operator.delta_payload(&self.scheme, &param.delta)?;
            let msg = self.operator.envelope(&self.scheme, idx as u32 + 1, round, MessageKind::DeltaParam, &payload)?;
            self.transport.send(&msg)?;
        }
        let round = self.next_round();
        for t in self.schedule.init.clone() {
            let agent = &mut self.agents[t.from - 1];
            let payload = agent.guess_items(&t.entries)?;
            let msg = agent.envelope(&self.scheme, t.to as u32, round, MessageKind::InitAlphaShare, &payload, true)?;
            self.transport.send(&msg)?;
        }
        self.deliver_all()
    }

    /// One encrypted iteration; the last one stops after the z-update.
    pub fn iterate(&mut self, tau: usize) -> Result<(), ProtocolError> {
        for agent in &mut self.agents {
            agent.z_update(&self.scheme)?;
        }
        if tau + 1 >= self.config.iterations {
            return Ok(());
        }
        let round = self.next_round();
        for (n, t) in self.schedule.z_share.clone().into_iter().enumerate() {
            let seal = !(self.config.fault == Some(FaultInjection::UnsealedZShare) && tau == 0 && n == 0);
            let agent = &mut self.agents[t.from - 1];
            let payload = agent.z_items(&t.entries)?;
            let msg = agent.envelope(&self.scheme, t.to as u32, round, MessageKind::ZShare, &payload, seal)?;
            self.transport.send(&msg)?;
        }
        self.deliver_all()?;
        for agent in &mut self.agents {
            agent.average(&self.scheme, &self.users)?;
        }
        let round = self.next_round();
        for (n, t) in self.schedule.zeta_return.clone().into_iter().enumerate() {
            let agent = &mut self.agents[t.from - 1];
            let payload = agent.zeta_items(&t.entries)?;
            let msg = agent.envelope(&self.scheme, t.to as u32, round, MessageKind::ZetaShare, &payload, true)?;
            self.transport.send(&msg)?;
            if self.config.fault == Some(FaultInjection::IterateToOperator) && tau == 0 && n == 0 {
                let msg = agent.envelope(&self.scheme, 0, round, MessageKind::ZetaShare, &payload, true)?;
                self.transport.send(&msg)?;
            }
        }
        self.deliver_all()?;
        for agent in &mut self.agents {
            agent.lambda_update(&self.scheme)?;
        }
        Ok(())
    }

    /// Sends `⟦α_i⟧₀` to the delegate, which returns `⟦α_i⟧_i`.
    pub fn final_switch(&mut self) -> Result<StepOutcome, ProtocolError> {
        let round = self.next_round();
        for agent in &mut self.agents {
            let delegate = agent.delegate().ok_or(ProtocolError::NoDelegate(agent.id()))?;
            let payload = agent.final_request()?;
            let msg = agent.envelope(&self.scheme, delegate, round, MessageKind::FinalSwitchRequest, &payload, true)?;
            self.transport.send(&msg)?;
        }
        self.deliver_all()?;
        let round = self.next_round();
        for agent in &mut self.agents {
            for (subject, payload) in agent.serve_switches(&self.scheme)? {
                if let Payload::Items(items) = &payload {
                    self.stats.key_switches += items.len();
                }
                let msg = agent.envelope(&self.scheme, subject, round, MessageKind::FinalSwitchResponse, &payload, false)?;
                self.transport.send(&msg)?;
            }
        }
        self.deliver_all()?;
        let alpha = self.agents.iter_mut().map(|a| a.finish(&self.scheme)).collect::<Result<Vec<_>, _>>()?;
        for (agent, a) in self.agents.iter().zip(&alpha) {
            let mut private = self.cost_reals[agent.id() as usize - 1].clone();
            private.extend(a.iter());
            self.transport.tap_mut().set_private(agent.id(), &private);
        }
        let max_scale_exp = self.agents.iter().map(AgentNode::max_scale_exp).max().unwrap_or(0);
        self.stats.steps += 1;
        self.stats.max_scale_exp = self.stats.max_scale_exp.max(max_scale_exp);
        self.stats.max_noise_ratio =
            self.agents.iter().map(AgentNode::max_noise_ratio).fold(self.stats.max_noise_ratio, f64::max);
        Ok(StepOutcome { alpha, max_scale_exp })
    }

    /// A full control step: initialization, `ℓ` iterations and the switch.
    pub fn solve(&mut self, params: &[StructuredParam], guesses: &[Vector]) -> Result<StepOutcome, ProtocolError> {
        self.begin_step(params, guesses)?;
        for tau in 0..self.config.iterations {
            self.iterate(tau)?;
        }
        self.final_switch()
    }
}

/// Decryption under the operator key of state that never leaves its agent;
/// every use is recorded in the transport log.
#[cfg(feature = "test-oracle")]
impl EncryptedSystem {
    fn oracle_decrypt(&mut self, what: &str, agent: usize, cts: Vec<crate::he::Ciphertext>) -> Result<Vec<f64>, ProtocolError> {
        self.transport.note_oracle(format!("{what} of agent {agent} decrypted under the operator key"));
        let sk = self.operator.secret_key().clone();
        cts.iter().map(|c| Ok(self.scheme.decrypt_real(&sk, c)?)).collect()
    }

    pub fn oracle_zeta(&mut self, agent: usize) -> Result<Vec<f64>, ProtocolError> {
        let cts = self.agents[agent - 1]
            .zeta_ciphertexts()
            .into_iter()
            .map(|c| c.cloned().ok_or(ProtocolError::MissingShare { agent: agent as u32, entry: 0 }))
            .collect::<Result<Vec<_>, _>>()?;
        self.oracle_decrypt("zeta", agent, cts)
    }

    pub fn oracle_z(&mut self, agent: usize) -> Result<Vec<f64>, ProtocolError> {
        let cts = self.agents[agent - 1].z_ciphertexts().to_vec();
        self.oracle_decrypt("z", agent, cts)
    }

    pub fn oracle_lambda(&mut self, agent: usize) -> Result<Vec<f64>, ProtocolError> {
        let cts = self.agents[agent - 1].lambda_ciphertexts().to_vec();
        self.oracle_decrypt("lambda", agent, cts)
    }
}
