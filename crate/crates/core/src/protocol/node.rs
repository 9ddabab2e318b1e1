//! Agent and operator state machines.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::message::{MessageKind, Payload, WireMessage};
use super::ProtocolError;
use crate::admm::{precompute_gamma, GammaBlocks};
use crate::channel::{ChannelKey, MessageHeader};
use crate::graph::IndexLayout;
use crate::he::{Ciphertext, Constant, HeScheme, InstanceKeys, KeyRegistry, PublicKey, SwitchKey};
use crate::linalg::{Matrix, Vector};
use crate::problem::AgentCost;

fn envelope(
    channels: &mut BTreeMap<u32, ChannelKey>,
    scheme: &HeScheme,
    header: MessageHeader,
    payload: &Payload,
    seal: bool,
) -> Result<WireMessage, ProtocolError> {
    let bytes = payload.encode(scheme);
    if !seal {
        return Ok(WireMessage::Plain { header, payload: bytes });
    }
    let key = channels.get_mut(&header.receiver).ok_or_else(|| {
        ProtocolError::Invalid(format!("no channel {}-{}", header.sender, header.receiver))
    })?;
    Ok(WireMessage::Sealed(key.seal(header, &bytes)?))
}

fn open(
    channels: &mut BTreeMap<u32, ChannelKey>,
    scheme: &HeScheme,
    me: u32,
    msg: &WireMessage,
) -> Result<(MessageHeader, MessageKind, Payload), ProtocolError> {
    let header = msg.header();
    if header.receiver != me {
        return Err(ProtocolError::Invalid(format!("message for {} delivered to {me}", header.receiver)));
    }
    let kind = msg
        .kind()
        .ok_or_else(|| ProtocolError::Wire(format!("unknown kind code {}", header.kind)))?;
    let bytes = match msg {
        WireMessage::Plain { payload, .. } => payload.clone(),
        WireMessage::Sealed(s) => channels
            .get_mut(&header.sender)
            .ok_or_else(|| ProtocolError::Invalid(format!("no channel {}-{me}", header.sender)))?
            .open(s)?,
    };
    Ok((header, kind, Payload::decode(scheme, &bytes)?))
}

fn expect_items(kind: MessageKind, from: u32, to: u32, p: Payload) -> Result<Vec<(u32, Ciphertext)>, ProtocolError> {
    match p {
        Payload::Items(items) => Ok(items),
        Payload::SwitchKey(_) => Err(ProtocolError::Unexpected { kind: format!("{kind} carrying a key"), from, to }),
    }
}

/// Prepared constants for the three encrypted updates.
#[derive(Debug, Clone)]
struct UpdateConstants {
    /// Sparse rows of `ρΓ¹¹`, `−Γ¹¹` and `Γ¹²E − Γ¹¹F`.
    rho_g11: Vec<Vec<(usize, Constant)>>,
    neg_g11: Vec<Vec<(usize, Constant)>>,
    pmat: Vec<Vec<(usize, Constant)>>,
    /// `1/|I_k|` for every owned entry, by local position.
    avg: Vec<Constant>,
    rho1: Constant,
    rho2: Constant,
    /// `one[d]` is 1 encoded at scale exponent `d`.
    one: Vec<Constant>,
}

fn sparse_rows(scheme: &HeScheme, m: &Matrix) -> Result<Vec<Vec<(usize, Constant)>>, ProtocolError> {
    let codec = scheme.codec();
    (0..m.nrows())
        .map(|r| {
            let mut row = Vec::new();
            for c in 0..m.ncols() {
                let k = scheme.prepare(&codec.encode(m[(r, c)])?);
                if !k.is_zero() {
                    row.push((c, k));
                }
            }
            Ok(row)
        })
        .collect()
}

/// An agent: plaintext update matrices, encrypted iterates, and switch keys
/// held on behalf of neighbors.
#[derive(Debug, Clone)]
pub struct AgentNode {
    id: u32,
    keys: InstanceKeys,
    pk0: PublicKey,
    channels: BTreeMap<u32, ChannelKey>,
    index_set: Vec<usize>,
    alpha_len: usize,
    position: BTreeMap<usize, usize>,
    beta_len: usize,
    param_len: usize,
    gamma: GammaBlocks,
    consts: UpdateConstants,
    delegate: Option<u32>,
    switch_keys: BTreeMap<u32, SwitchKey>,
    refused_keys: usize,
    p_fresh: Vec<Option<Ciphertext>>,
    p: Vec<Ciphertext>,
    zeta: Vec<Option<Ciphertext>>,
    zeta_next: Vec<Option<Ciphertext>>,
    lambda: Vec<Ciphertext>,
    z: Vec<Ciphertext>,
    z_inbox: BTreeMap<usize, Vec<(u32, Ciphertext)>>,
    switch_requests: Vec<(u32, Vec<(u32, Ciphertext)>)>,
    final_items: Vec<(u32, Ciphertext)>,
    rng: ChaCha20Rng,
    max_scale: u32,
    max_noise_ratio: f64,
}

/// Everything an agent is provisioned with at setup.
pub(crate) struct AgentSetup<'a> {
    pub id: u32,
    pub cost: &'a AgentCost,
    pub beta_len: usize,
    pub rho: f64,
    pub layout: &'a IndexLayout,
    /// `|I_k|` for every global entry.
    pub users: &'a BTreeMap<usize, usize>,
    pub keys: InstanceKeys,
    pub pk0: PublicKey,
    pub channels: BTreeMap<u32, ChannelKey>,
    pub delegate: Option<u32>,
    pub seed: u64,
}

impl AgentNode {
    pub(crate) fn new(scheme: &HeScheme, s: AgentSetup<'_>) -> Result<Self, ProtocolError> {
        let i = s.id as usize;
        let gamma = precompute_gamma(s.cost, s.rho)?;
        let codec = scheme.codec();
        let index_set = s.layout.index_set(i).to_vec();
        let alpha_len = s.layout.alpha_len(i);
        let avg = index_set[..alpha_len]
            .iter()
            .map(|k| Ok(scheme.prepare(&codec.encode(1.0 / s.users[k] as f64)?)))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let one = (0..=codec.levels())
            .map(|d| Ok(scheme.prepare(&codec.encode_at(1.0, d)?)))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let consts = UpdateConstants {
            rho_g11: sparse_rows(scheme, &gamma.rho_g11)?,
            neg_g11: sparse_rows(scheme, &(-&gamma.g11))?,
            pmat: sparse_rows(scheme, &gamma.pmat)?,
            avg,
            rho1: scheme.prepare(&codec.encode_at(s.rho, 1)?),
            rho2: scheme.prepare(&codec.encode_at(s.rho, 2)?),
            one,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(s.seed);
        rng.set_stream(1 << 32 | s.id as u64);
        let v = index_set.len();
        Ok(Self {
            id: s.id,
            keys: s.keys,
            pk0: s.pk0,
            channels: s.channels,
            position: index_set.iter().enumerate().map(|(p, &k)| (k, p)).collect(),
            index_set,
            alpha_len,
            beta_len: s.beta_len,
            param_len: s.cost.param_dim(),
            gamma,
            consts,
            delegate: s.delegate,
            switch_keys: BTreeMap::new(),
            refused_keys: 0,
            p_fresh: vec![None; s.cost.param_dim()],
            p: Vec::new(),
            zeta: vec![None; v],
            zeta_next: vec![None; v],
            lambda: Vec::new(),
            z: Vec::new(),
            z_inbox: BTreeMap::new(),
            switch_requests: Vec::new(),
            final_items: Vec::new(),
            rng,
            max_scale: 0,
            max_noise_ratio: 0.0,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.pk
    }

    pub fn delegate(&self) -> Option<u32> {
        self.delegate
    }

    pub fn gamma(&self) -> &GammaBlocks {
        &self.gamma
    }

    /// Subjects this agent holds a switch key for.
    pub fn switch_key_subjects(&self) -> Vec<u32> {
        self.switch_keys.keys().copied().collect()
    }

    /// Keys offered to this agent for itself and refused.
    pub fn refused_keys(&self) -> usize {
        self.refused_keys
    }

    pub fn max_scale_exp(&self) -> u32 {
        self.max_scale
    }

    pub fn max_noise_ratio(&self) -> f64 {
        self.max_noise_ratio
    }

    #[cfg(feature = "test-oracle")]
    pub(crate) fn zeta_ciphertexts(&self) -> Vec<Option<&Ciphertext>> {
        self.zeta.iter().map(Option::as_ref).collect()
    }

    #[cfg(feature = "test-oracle")]
    pub(crate) fn z_ciphertexts(&self) -> &[Ciphertext] {
        &self.z
    }

    #[cfg(feature = "test-oracle")]
    pub(crate) fn lambda_ciphertexts(&self) -> &[Ciphertext] {
        &self.lambda
    }

    fn observe(&mut self, scheme: &HeScheme, ct: &Ciphertext) {
        self.max_scale = self.max_scale.max(ct.scale_exp());
        self.max_noise_ratio = self.max_noise_ratio.max(ct.noise_bound() / scheme.noise_margin());
    }

    fn pos(&self, k: usize) -> Result<usize, ProtocolError> {
        self.position.get(&k).copied().ok_or(ProtocolError::MissingShare { agent: self.id, entry: k })
    }

    pub(crate) fn envelope(
        &mut self,
        scheme: &HeScheme,
        to: u32,
        round: u64,
        kind: MessageKind,
        payload: &Payload,
        seal: bool,
    ) -> Result<WireMessage, ProtocolError> {
        let header = MessageHeader { sender: self.id, receiver: to, round, kind: kind.code() };
        envelope(&mut self.channels, scheme, header, payload, seal)
    }

    /// Encrypts `β`, the `α` guess and `λ⁰ = 0`; clears per-step state.
    pub(crate) fn begin(&mut self, scheme: &HeScheme, beta: &Vector, guess: &Vector) -> Result<(), ProtocolError> {
        if beta.len() != self.beta_len || guess.len() != self.alpha_len {
            return Err(ProtocolError::Invalid(format!(
                "agent {}: beta/guess lengths {}/{} expected {}/{}",
                self.id,
                beta.len(),
                guess.len(),
                self.beta_len,
                self.alpha_len
            )));
        }
        let v = self.index_set.len();
        self.p_fresh = vec![None; self.param_len];
        for (idx, &x) in beta.iter().enumerate() {
            self.p_fresh[idx] = Some(scheme.encrypt_real(&self.pk0, x, &mut self.rng)?);
        }
        self.zeta = vec![None; v];
        for (idx, &x) in guess.iter().enumerate() {
            self.zeta[idx] = Some(scheme.encrypt_real(&self.pk0, x, &mut self.rng)?);
        }
        self.lambda =
            (0..v).map(|_| scheme.encrypt_real(&self.pk0, 0.0, &mut self.rng)).collect::<Result<_, _>>()?;
        self.zeta_next = vec![None; v];
        self.z.clear();
        self.p.clear();
        self.z_inbox.clear();
        self.switch_requests.clear();
        self.final_items.clear();
        Ok(())
    }

    /// Handles one delivered message.
    pub(crate) fn accept(&mut self, scheme: &HeScheme, msg: &WireMessage) -> Result<(), ProtocolError> {
        let (h, kind, payload) = open(&mut self.channels, scheme, self.id, msg)?;
        let from = h.sender;
        match kind {
            MessageKind::SwitchKeyDelivery => match payload {
                Payload::SwitchKey(key) if key.to_id() == self.id => self.refused_keys += 1,
                Payload::SwitchKey(key) => {
                    self.switch_keys.insert(key.to_id(), key);
                }
                Payload::Items(_) => {
                    return Err(ProtocolError::Unexpected { kind: "key delivery without a key".into(), from, to: self.id })
                }
            },
            MessageKind::DeltaParam => {
                for (tag, ct) in expect_items(kind, from, self.id, payload)? {
                    let idx = self.beta_len + tag as usize;
                    let slot = self
                        .p_fresh
                        .get_mut(idx)
                        .ok_or_else(|| ProtocolError::Wire(format!("parameter index {idx} out of range")))?;
                    *slot = Some(ct);
                }
            }
            MessageKind::InitAlphaShare => {
                for (k, ct) in expect_items(kind, from, self.id, payload)? {
                    let p = self.pos(k as usize)?;
                    self.zeta[p] = Some(ct);
                }
            }
            MessageKind::ZShare => {
                for (k, ct) in expect_items(kind, from, self.id, payload)? {
                    self.pos(k as usize)?;
                    self.z_inbox.entry(k as usize).or_default().push((from, ct));
                }
            }
            MessageKind::ZetaShare => {
                for (k, ct) in expect_items(kind, from, self.id, payload)? {
                    let p = self.pos(k as usize)?;
                    self.zeta_next[p] = Some(ct);
                }
            }
            MessageKind::FinalSwitchRequest => {
                let items = expect_items(kind, from, self.id, payload)?;
                self.switch_requests.push((from, items));
            }
            MessageKind::FinalSwitchResponse => {
                self.final_items = expect_items(kind, from, self.id, payload)?;
            }
        }
        Ok(())
    }

    fn complete(&self, slots: &[Option<Ciphertext>]) -> Result<Vec<Ciphertext>, ProtocolError> {
        slots
            .iter()
            .enumerate()
            .map(|(p, c)| c.clone().ok_or(ProtocolError::MissingShare { agent: self.id, entry: self.index_set[p] }))
            .collect()
    }

    fn complete_param(&self) -> Result<Vec<Ciphertext>, ProtocolError> {
        self.p_fresh
            .iter()
            .enumerate()
            .map(|(q, c)| c.clone().ok_or(ProtocolError::MissingParam { agent: self.id, index: q + 1 }))
            .collect()
    }

    /// Items `(k, ζ_k)` of the current guess for the given global entries.
    pub(crate) fn guess_items(&self, entries: &[usize]) -> Result<Payload, ProtocolError> {
        self.items_from(entries, &self.zeta)
    }

    pub(crate) fn z_items(&self, entries: &[usize]) -> Result<Payload, ProtocolError> {
        let slots: Vec<Option<Ciphertext>> = self.z.iter().cloned().map(Some).collect();
        self.items_from(entries, &slots)
    }

    pub(crate) fn zeta_items(&self, entries: &[usize]) -> Result<Payload, ProtocolError> {
        self.items_from(entries, &self.zeta_next)
    }

    fn items_from(&self, entries: &[usize], slots: &[Option<Ciphertext>]) -> Result<Payload, ProtocolError> {
        let items = entries
            .iter()
            .map(|&k| {
                let p = self.pos(k)?;
                let ct = slots.get(p).and_then(|c| c.clone());
                ct.map(|c| (k as u32, c)).ok_or(ProtocolError::MissingShare { agent: self.id, entry: k })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Payload::Items(items))
    }

    fn combine(
        &mut self,
        scheme: &HeScheme,
        terms: &[(&Constant, &Ciphertext)],
    ) -> Result<Ciphertext, ProtocolError> {
        let ct = scheme.linear_combination(terms)?;
        self.observe(scheme, &ct);
        Ok(ct)
    }

    /// `z = ρΓ¹¹ζ − Γ¹¹λ + (Γ¹²E − Γ¹¹F)p`, one level.
    pub(crate) fn z_update(&mut self, scheme: &HeScheme) -> Result<(), ProtocolError> {
        let zeta = self.complete(&self.zeta)?;
        if self.p.is_empty() {
            self.p = self.complete_param()?;
        }
        let consts = self.consts.clone();
        let lambda = self.lambda.clone();
        let p = self.p.clone();
        let mut z = Vec::with_capacity(zeta.len());
        for r in 0..zeta.len() {
            let mut terms: Vec<(&Constant, &Ciphertext)> = Vec::new();
            terms.extend(consts.rho_g11[r].iter().map(|(c, k)| (k, &zeta[*c])));
            terms.extend(consts.neg_g11[r].iter().map(|(c, k)| (k, &lambda[*c])));
            terms.extend(consts.pmat[r].iter().map(|(c, k)| (k, &p[*c])));
            let ct = if terms.is_empty() {
                // An all-zero row becomes a fresh encryption of zero at the
                // scale the row would have had.
                let zero = scheme.codec().encode_at(0.0, zeta[r].scale_exp() + 1)?;
                scheme.encrypt(&self.pk0, &zero, &mut self.rng)?
            } else {
                self.combine(scheme, &terms)?
            };
            z.push(ct);
        }
        self.z = z;
        Ok(())
    }

    /// Averages every owned entry over its users; needs all z shares.
    pub(crate) fn average(&mut self, scheme: &HeScheme, users: &BTreeMap<usize, usize>) -> Result<(), ProtocolError> {
        for p in 0..self.alpha_len {
            let k = self.index_set[p];
            let shares = self.z_inbox.remove(&k).unwrap_or_default();
            if shares.len() + 1 != users[&k] {
                return Err(ProtocolError::MissingShare { agent: self.id, entry: k });
            }
            let avg = self.consts.avg[p].clone();
            let own = self.z[p].clone();
            let mut terms = vec![(&avg, &own)];
            terms.extend(shares.iter().map(|(_, c)| (&avg, c)));
            let ct = self.combine(scheme, &terms)?;
            self.zeta_next[p] = Some(ct);
        }
        if let Some((&k, _)) = self.z_inbox.iter().next() {
            return Err(ProtocolError::Unexpected { kind: format!("z share for entry {k}"), from: 0, to: self.id });
        }
        Ok(())
    }

    /// `λ ← λ + ρ(z − ζ)` with operands lifted to a common scale, then the
    /// new `ζ` and `p` are lifted to match `λ`.
    pub(crate) fn lambda_update(&mut self, scheme: &HeScheme) -> Result<(), ProtocolError> {
        let zeta = self.complete(&self.zeta_next)?;
        let consts = self.consts.clone();
        let mut lambda = Vec::with_capacity(zeta.len());
        for (r, zeta_r) in zeta.iter().enumerate() {
            let old = self.combine(scheme, &[(&consts.one[3], &self.lambda[r].clone())])?;
            let pos = self.combine(scheme, &[(&consts.rho2, &self.z[r].clone())])?;
            let neg = self.combine(scheme, &[(&consts.rho1, zeta_r)])?;
            lambda.push(scheme.sub(&scheme.add(&old, &pos)?, &neg)?);
        }
        let target = lambda[0].scale_exp();
        let mut lifted = Vec::with_capacity(zeta.len());
        for c in &zeta {
            lifted.push(Some(self.combine(scheme, &[(&consts.one[target as usize - c.scale_exp() as usize], c)])?));
        }
        let fresh = self.complete_param()?;
        let mut p = Vec::with_capacity(fresh.len());
        for c in &fresh {
            p.push(self.combine(scheme, &[(&consts.one[target as usize - c.scale_exp() as usize], c)])?);
        }
        self.lambda = lambda;
        self.zeta = lifted;
        self.zeta_next = vec![None; zeta.len()];
        self.p = p;
        Ok(())
    }

    /// `(k, z_k)` for every own `α` entry.
    pub(crate) fn final_request(&self) -> Result<Payload, ProtocolError> {
        self.z_items(&self.index_set[..self.alpha_len])
    }

    /// Switches every pending request with the subject's key.
    pub(crate) fn serve_switches(&mut self, scheme: &HeScheme) -> Result<Vec<(u32, Payload)>, ProtocolError> {
        let requests = std::mem::take(&mut self.switch_requests);
        let mut out = Vec::new();
        for (subject, items) in requests {
            let key = self
                .switch_keys
                .get(&subject)
                .ok_or(ProtocolError::MissingSwitchKey { delegate: self.id, subject })?;
            let switched = items
                .iter()
                .map(|(k, c)| Ok((*k, scheme.key_switch(c, key)?)))
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            for (_, c) in &switched {
                self.observe(scheme, c);
            }
            out.push((subject, Payload::Items(switched)));
        }
        Ok(out)
    }

    /// Decrypts the switched `α_i` with the agent's own key.
    pub(crate) fn finish(&mut self, scheme: &HeScheme) -> Result<Vector, ProtocolError> {
        let items = std::mem::take(&mut self.final_items);
        let mut alpha = vec![None; self.alpha_len];
        for (k, ct) in &items {
            let p = self.pos(*k as usize)?;
            if p >= self.alpha_len {
                return Err(ProtocolError::Unexpected { kind: format!("switched entry {k}"), from: 0, to: self.id });
            }
            alpha[p] = Some(scheme.decrypt_real(&self.keys.sk, ct)?);
        }
        let values = alpha
            .into_iter()
            .enumerate()
            .map(|(p, v)| v.ok_or(ProtocolError::MissingShare { agent: self.id, entry: self.index_set[p] }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Vector::from_vec(values))
    }
}

/// The operator: instance-0 keys, δ delivery and switch-key issuance.
#[derive(Debug, Clone)]
pub struct OperatorNode {
    keys: InstanceKeys,
    channels: BTreeMap<u32, ChannelKey>,
    registry: KeyRegistry,
    rng: ChaCha20Rng,
    discarded: usize,
}

impl OperatorNode {
    pub(crate) fn new(keys: InstanceKeys, channels: BTreeMap<u32, ChannelKey>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1 << 33);
        Self { keys, channels, registry: KeyRegistry::new(), rng, discarded: 0 }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.pk
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    /// Messages the operator received and dropped.
    pub fn discarded(&self) -> usize {
        self.discarded
    }

    #[cfg(feature = "test-oracle")]
    pub(crate) fn secret_key(&self) -> &crate::he::SecretKey {
        &self.keys.sk
    }

    pub(crate) fn issue_switch_key(&mut self, scheme: &HeScheme, pk_subject: &PublicKey) -> Result<SwitchKey, ProtocolError> {
        Ok(scheme.gen_switch_key(&self.keys.sk, pk_subject, &mut self.registry, &mut self.rng)?)
    }

    pub(crate) fn envelope(
        &mut self,
        scheme: &HeScheme,
        to: u32,
        round: u64,
        kind: MessageKind,
        payload: &Payload,
    ) -> Result<WireMessage, ProtocolError> {
        let header = MessageHeader { sender: 0, receiver: to, round, kind: kind.code() };
        envelope(&mut self.channels, scheme, header, payload, true)
    }

    /// `⟦δ_i⟧₀`, tagged by position within `δ`.
    pub(crate) fn delta_payload(&mut self, scheme: &HeScheme, delta: &Vector) -> Result<Payload, ProtocolError> {
        let items = delta
            .iter()
            .enumerate()
            .map(|(j, &x)| Ok((j as u32, scheme.encrypt_real(&self.keys.pk, x, &mut self.rng)?)))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        Ok(Payload::Items(items))
    }

    /// The operator takes no input from agents; anything delivered is
    /// dropped unread.
    pub(crate) fn accept(&mut self, _msg: &WireMessage) {
        self.discarded += 1;
    }
}
