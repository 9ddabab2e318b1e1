//! Structural checks of a transport log against the security goals.
//!
//! Goals checked, one letter each:
//! - `a`: no payload leaving an agent holds its private reals or an
//!   unmasked ciphertext;
//! - `b`: the operator never receives iterate ciphertexts;
//! - `c`: every HE payload is channel-sealed except the final switch
//!   response, and every sealed payload opens;
//! - `d`: a switch key `0 → i` never travels to agent `i`;
//! - `e`: iterates outside their owner exist only under the operator key,
//!   and a switched result reaches only its subject.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::message::MessageKind;
use super::transport::{LogEntry, MessageRecord};
use crate::graph::{responsibility_sets, IndexLayout};

/// Who is who, and which global entries every agent holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub operator: u32,
    pub agents: BTreeSet<u32>,
    /// `K_i` as a set.
    pub index_sets: BTreeMap<u32, BTreeSet<u32>>,
    /// `α_i` as a set.
    pub alpha_sets: BTreeMap<u32, BTreeSet<u32>>,
    /// `|I_k|` for every global entry.
    pub users: BTreeMap<u32, usize>,
}

impl Roles {
    pub fn from_layout(layout: &IndexLayout) -> Self {
        let ids = |v: &[usize]| v.iter().map(|&k| k as u32).collect::<BTreeSet<u32>>();
        let m = layout.agent_count();
        let users = responsibility_sets(layout)
            .map(|s| s.into_iter().map(|(k, u)| (k as u32, u.len())).collect())
            .unwrap_or_default();
        Self {
            operator: 0,
            agents: (1..=m as u32).collect(),
            index_sets: (1..=m).map(|i| (i as u32, ids(layout.index_set(i)))).collect(),
            alpha_sets: (1..=m).map(|i| (i as u32, ids(layout.alpha_set(i)))).collect(),
            users,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub goal: char,
    pub seq: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct AuditReport {
    pub messages: usize,
    pub oracle_events: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_goal(&self, goal: char) -> bool {
        self.violations.iter().any(|v| v.goal == goal)
    }
}

struct Checker<'a> {
    roles: &'a Roles,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn flag(&mut self, goal: char, r: &MessageRecord, detail: String) {
        self.out.push(Violation { goal, seq: r.seq, detail });
    }

    fn is_agent(&self, id: u32) -> bool {
        self.roles.agents.contains(&id)
    }

    fn check(&mut self, r: &MessageRecord) {
        let roles = self.roles;
        let kind = match r.kind {
            Some(k) => k,
            None => {
                self.flag('c', r, "unknown message kind".into());
                return;
            }
        };
        let edge = format!("{kind} {}->{}", r.from, r.to);

        // (a)
        if self.is_agent(r.from) {
            if r.private_hits > 0 {
                self.flag('a', r, format!("{edge}: {} private value pattern(s) in payload", r.private_hits));
            }
            if let Some(item) = r.items.iter().find(|i| !i.masked) {
                self.flag('a', r, format!("{edge}: entry {} travels with a zero mask", item.tag));
            }
        }

        // (b)
        if r.to == roles.operator && (kind.carries_iterate() || !r.items.is_empty()) {
            self.flag('b', r, format!("{edge}: operator received iterate ciphertexts"));
        }

        // (c)
        if let Some(why) = &r.opaque {
            self.flag('c', r, format!("{edge}: payload could not be verified ({why})"));
        }
        if kind.must_be_sealed() && !r.sealed {
            self.flag('c', r, format!("{edge}: payload sent without channel encryption"));
        }

        // (d)
        if let Some((from, to)) = r.switch_key {
            if to == r.to {
                self.flag('d', r, format!("{edge}: switch key {from}->{to} delivered to its subject"));
            }
            if from != roles.operator || r.from != roles.operator {
                self.flag('d', r, format!("{edge}: switch key {from}->{to} not issued by the operator"));
            }
        }
        if kind == MessageKind::SwitchKeyDelivery && r.switch_key.is_none() && r.opaque.is_none() {
            self.flag('d', r, format!("{edge}: key delivery without a key"));
        }

        // (e)
        let empty = BTreeSet::new();
        let alpha = |i: u32| roles.alpha_sets.get(&i).unwrap_or(&empty);
        let index = |i: u32| roles.index_sets.get(&i).unwrap_or(&empty);
        for item in &r.items {
            let k = item.tag;
            let bad = match kind {
                MessageKind::ZShare => {
                    (!alpha(r.to).contains(&k) || !index(r.from).contains(&k)).then(|| "is not a shared entry".to_string())
                }
                MessageKind::ZetaShare | MessageKind::InitAlphaShare => {
                    (!alpha(r.from).contains(&k) || !index(r.to).contains(&k)).then(|| "is not a shared entry".to_string())
                }
                MessageKind::FinalSwitchRequest => {
                    (!alpha(r.from).contains(&k)).then(|| "is not the sender's own entry".to_string())
                }
                MessageKind::FinalSwitchResponse => {
                    (!alpha(r.to).contains(&k)).then(|| "is not the receiver's own entry".to_string())
                }
                MessageKind::DeltaParam | MessageKind::SwitchKeyDelivery => None,
            };
            if let Some(why) = bad {
                self.flag('e', r, format!("{edge}: entry {k} {why}"));
            }
            if matches!(kind, MessageKind::ZShare | MessageKind::ZetaShare | MessageKind::InitAlphaShare)
                && roles.users.get(&k).copied().unwrap_or(0) < 2
            {
                self.flag('e', r, format!("{edge}: entry {k} has a single user and must stay local"));
            }
            let want = if kind == MessageKind::FinalSwitchResponse { r.to } else { roles.operator };
            if item.instance != want {
                self.flag('e', r, format!("{edge}: entry {k} under instance {} instead of {want}", item.instance));
            }
        }
    }
}

pub fn audit_trace(log: &[LogEntry], roles: &Roles) -> AuditReport {
    let mut checker = Checker { roles, out: Vec::new() };
    let mut report = AuditReport::default();
    for entry in log {
        match entry {
            LogEntry::Message(r) => {
                report.messages += 1;
                checker.check(r);
            }
            LogEntry::Oracle { .. } => report.oracle_events += 1,
        }
    }
    report.violations = checker.out;
    report
}
