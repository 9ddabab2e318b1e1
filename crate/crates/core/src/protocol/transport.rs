//! Deterministic in-process transport with an audit tap.
//!
//! The tap models an omniscient observer of the simulation: it holds every
//! channel key, opens each message as it is sent and records structural facts
//! about the payload. It never feeds anything back into the protocol.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::message::{MessageKind, Payload, WireMessage};
use super::ProtocolError;
use crate::channel::{ChannelKey, MessageHeader};
use crate::he::HeScheme;

/// Byte patterns of a node's private reals, both endiannesses.
#[derive(Debug, Clone, Default)]
struct PatternSet {
    /// Bit per low 16 bits of a pattern, to reject most windows quickly.
    filter: Vec<u64>,
    values: HashSet<u64>,
}

impl PatternSet {
    fn new(reals: &[f64]) -> Self {
        let mut set = Self { filter: vec![0; 1024], values: HashSet::new() };
        for &x in reals {
            // Zero is public knowledge and common in framing.
            if x == 0.0 || !x.is_finite() {
                continue;
            }
            for w in [x.to_bits(), x.to_bits().swap_bytes()] {
                set.values.insert(w);
                set.filter[(w & 0xffff) as usize / 64] |= 1 << (w % 64);
            }
        }
        set
    }

    fn hits(&self, bytes: &[u8]) -> usize {
        if self.values.is_empty() || bytes.len() < 8 {
            return 0;
        }
        let mut count = 0;
        for win in bytes.windows(8) {
            let w = u64::from_be_bytes(win.try_into().expect("8 bytes"));
            let low = (w & 0xffff) as usize;
            if self.filter[low / 64] >> (low % 64) & 1 == 1 && self.values.contains(&w) {
                count += 1;
            }
        }
        count
    }
}

/// One ciphertext as seen by the tap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemFact {
    pub tag: u32,
    pub instance: u32,
    pub scale_exp: u32,
    /// False when the mask is zero, i.e. the plaintext is readable.
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageRecord {
    pub seq: u64,
    pub round: u64,
    pub from: u32,
    pub to: u32,
    pub kind: Option<MessageKind>,
    pub sealed: bool,
    pub wire_len: usize,
    /// First 16 bytes of SHA-256 over the wire bytes, hex.
    pub digest: String,
    pub items: Vec<ItemFact>,
    /// `(from, to)` of a carried switch key.
    pub switch_key: Option<(u32, u32)>,
    /// Occurrences of the sender's private reals in the payload.
    pub private_hits: usize,
    /// Why the tap could not inspect the payload, if it could not.
    pub opaque: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    Message(MessageRecord),
    /// A test-only decryption under the operator key.
    Oracle { seq: u64, note: String },
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct AuditTap {
    scheme: HeScheme,
    channels: BTreeMap<(u32, u32), ChannelKey>,
    patterns: BTreeMap<u32, PatternSet>,
}

impl AuditTap {
    pub fn new(scheme: HeScheme) -> Self {
        Self { scheme, channels: BTreeMap::new(), patterns: BTreeMap::new() }
    }

    pub fn add_channel(&mut self, key: ChannelKey) {
        self.channels.insert(key.endpoints(), key);
    }

    /// Replaces the private reals registered for `node`.
    pub fn set_private(&mut self, node: u32, reals: &[f64]) {
        self.patterns.insert(node, PatternSet::new(reals));
    }

    fn inspect(&self, msg: &WireMessage, record: &mut MessageRecord) {
        let h = msg.header();
        let inner = match msg {
            WireMessage::Plain { payload, .. } => Ok(payload.clone()),
            WireMessage::Sealed(s) => {
                let pair = (h.sender.min(h.receiver), h.sender.max(h.receiver));
                match self.channels.get(&pair) {
                    Some(k) => k.open_stateless(s).map_err(|e| e.to_string()),
                    None => Err(format!("no channel {}-{}", pair.0, pair.1)),
                }
            }
        };
        let inner = match inner {
            Ok(b) => b,
            Err(e) => {
                record.opaque = Some(e);
                return;
            }
        };
        if let Some(p) = self.patterns.get(&h.sender) {
            record.private_hits = p.hits(&inner);
            if let WireMessage::Plain { .. } = msg {
                // Header and framing are visible too.
                record.private_hits += p.hits(&msg.to_bytes()[..2 + MessageHeader::LEN + 4]);
            }
        }
        match Payload::decode(&self.scheme, &inner) {
            Ok(Payload::Items(items)) => {
                record.items = items
                    .iter()
                    .map(|(tag, ct)| ItemFact {
                        tag: *tag,
                        instance: ct.instance_id(),
                        scale_exp: ct.scale_exp(),
                        masked: !ct.mask_is_zero(&self.scheme),
                    })
                    .collect();
            }
            Ok(Payload::SwitchKey(k)) => record.switch_key = Some((k.from_id(), k.to_id())),
            Err(e) => record.opaque = Some(e.to_string()),
        }
    }
}

/// FIFO per directed edge, strictly increasing round tags per edge, and a
/// record of every message in send order.
#[derive(Debug, Clone)]
pub struct InMemoryTransport {
    queues: BTreeMap<(u32, u32), VecDeque<Vec<u8>>>,
    last_round: BTreeMap<(u32, u32), u64>,
    log: Vec<LogEntry>,
    tap: AuditTap,
    seq: u64,
    bytes_sent: usize,
}

impl InMemoryTransport {
    pub fn new(tap: AuditTap) -> Self {
        Self {
            queues: BTreeMap::new(),
            last_round: BTreeMap::new(),
            log: Vec::new(),
            tap,
            seq: 0,
            bytes_sent: 0,
        }
    }

    pub fn tap_mut(&mut self) -> &mut AuditTap {
        &mut self.tap
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        let h = msg.header();
        let edge = (h.sender, h.receiver);
        if let Some(&last) = self.last_round.get(&edge) {
            if h.round <= last {
                return Err(ProtocolError::RoundNotIncreasing { from: h.sender, to: h.receiver, round: h.round, last });
            }
        }
        self.last_round.insert(edge, h.round);
        let bytes = msg.to_bytes();
        let mut record = MessageRecord {
            seq: self.seq,
            round: h.round,
            from: h.sender,
            to: h.receiver,
            kind: MessageKind::from_code(h.kind),
            sealed: msg.is_sealed(),
            wire_len: bytes.len(),
            digest: hex(&Sha256::digest(&bytes)[..16]),
            items: Vec::new(),
            switch_key: None,
            private_hits: 0,
            opaque: None,
        };
        self.tap.inspect(msg, &mut record);
        self.log.push(LogEntry::Message(record));
        self.seq += 1;
        self.bytes_sent += bytes.len();
        self.queues.entry(edge).or_default().push_back(bytes);
        Ok(())
    }

    /// Every queued message for `to`, by sender id and then in send order.
    pub fn receive(&mut self, to: u32) -> Result<Vec<WireMessage>, ProtocolError> {
        let mut out = Vec::new();
        for (&(_, dst), queue) in self.queues.iter_mut() {
            if dst == to {
                for bytes in queue.drain(..) {
                    out.push(WireMessage::from_bytes(&bytes)?);
                }
            }
        }
        Ok(out)
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn note_oracle(&mut self, note: impl Into<String>) {
        self.log.push(LogEntry::Oracle { seq: self.seq, note: note.into() });
        self.seq += 1;
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn message_count(&self) -> usize {
        self.log.iter().filter(|e| matches!(e, LogEntry::Message(_))).count()
    }

    pub fn bytes_sent(&self) -> usize {
        self.bytes_sent
    }

    /// The log as one JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }
}
