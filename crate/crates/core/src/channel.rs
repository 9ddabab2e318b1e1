//! Authenticated symmetric channels between pairs of nodes.
//!
//! ChaCha20-Poly1305 with a per-direction counter nonce; the message header
//! is bound as associated data.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Two magic bytes opening every serialized sealed message.
pub const SEALED_MAGIC: [u8; 2] = *b"SM";
const KEY_DOMAIN: &[u8] = b"privadmm channel key v1";
const HEADER_LEN: usize = MessageHeader::LEN;
const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("a channel needs two distinct endpoints, got {0} twice")]
    SelfLoop(u32),
    #[error("{sender}->{receiver} is not a direction of channel {a}-{b}")]
    WrongEndpoint { sender: u32, receiver: u32, a: u32, b: u32 },
    #[error("nonce counter {got} was already used (next expected {expected})")]
    Replay { got: u64, expected: u64 },
    #[error("nonce does not belong to this direction")]
    BadNonce,
    #[error("authentication failed")]
    Auth,
    #[error("malformed sealed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageHeader {
    pub sender: u32,
    pub receiver: u32,
    pub round: u64,
    pub kind: u8,
}

impl MessageHeader {
    pub const LEN: usize = 4 + 4 + 8 + 1;

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&self.sender.to_be_bytes());
        out[4..8].copy_from_slice(&self.receiver.to_be_bytes());
        out[8..16].copy_from_slice(&self.round.to_be_bytes());
        out[16] = self.kind;
        out
    }

    /// `b` must hold at least `LEN` bytes.
    pub fn from_bytes(b: &[u8]) -> Self {
        Self {
            sender: u32::from_be_bytes(b[..4].try_into().expect("4 bytes")),
            receiver: u32::from_be_bytes(b[4..8].try_into().expect("4 bytes")),
            round: u64::from_be_bytes(b[8..16].try_into().expect("8 bytes")),
            kind: b[16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub header: MessageHeader,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedMessage {
    /// `magic ‖ header ‖ nonce ‖ len(u32) ‖ ciphertext ‖ tag`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + HEADER_LEN + 12 + 4 + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&SEALED_MAGIC);
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChannelError> {
        let fixed = 2 + HEADER_LEN + 12 + 4;
        if bytes.len() < fixed + TAG_LEN {
            return Err(ChannelError::Malformed("too short".into()));
        }
        if bytes[..2] != SEALED_MAGIC {
            return Err(ChannelError::Malformed("bad magic".into()));
        }
        let header = MessageHeader::from_bytes(&bytes[2..2 + HEADER_LEN]);
        let nonce: [u8; 12] = bytes[2 + HEADER_LEN..2 + HEADER_LEN + 12].try_into().expect("12 bytes");
        let len = u32::from_be_bytes(bytes[fixed - 4..fixed].try_into().expect("4 bytes")) as usize;
        if bytes.len() != fixed + len + TAG_LEN {
            return Err(ChannelError::Malformed("length does not match".into()));
        }
        let ciphertext = bytes[fixed..fixed + len].to_vec();
        let tag: [u8; TAG_LEN] = bytes[fixed + len..].try_into().expect("16 bytes");
        Ok(Self { header, nonce, ciphertext, tag })
    }

    /// Nonce counter.
    pub fn counter(&self) -> u64 {
        u64::from_be_bytes(self.nonce[4..].try_into().expect("8 bytes"))
    }
}

/// Pre-shared key for the unordered pair `{a, b}`, `a < b`.
#[derive(Clone, PartialEq, Eq)]
pub struct ChannelKey {
    a: u32,
    b: u32,
    key: [u8; 32],
    /// Next counter to use when sending, indexed by direction.
    send_next: [u64; 2],
    /// Smallest counter still acceptable when receiving.
    recv_next: [u64; 2],
}

impl std::fmt::Debug for ChannelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ChannelKey({}-{})", self.a, self.b)
    }
}

/// Deterministic key for the edge under `seed`.
pub fn establish(edge: (u32, u32), seed: u64) -> Result<ChannelKey, ChannelError> {
    let (a, b) = (edge.0.min(edge.1), edge.0.max(edge.1));
    if a == b {
        return Err(ChannelError::SelfLoop(a));
    }
    let mut h = Sha256::new();
    h.update(KEY_DOMAIN);
    h.update(seed.to_be_bytes());
    h.update(a.to_be_bytes());
    h.update(b.to_be_bytes());
    Ok(ChannelKey { a, b, key: h.finalize().into(), send_next: [0; 2], recv_next: [0; 2] })
}

impl ChannelKey {
    pub fn endpoints(&self) -> (u32, u32) {
        (self.a, self.b)
    }

    /// Counters for `(low→high, high→low)`.
    pub fn send_counters(&self) -> [u64; 2] {
        self.send_next
    }

    fn direction(&self, sender: u32, receiver: u32) -> Result<usize, ChannelError> {
        match (sender, receiver) {
            (s, r) if s == self.a && r == self.b => Ok(0),
            (s, r) if s == self.b && r == self.a => Ok(1),
            _ => Err(ChannelError::WrongEndpoint { sender, receiver, a: self.a, b: self.b }),
        }
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.key))
    }

    pub fn seal(&mut self, header: MessageHeader, payload: &[u8]) -> Result<SealedMessage, ChannelError> {
        let dir = self.direction(header.sender, header.receiver)?;
        let counter = self.send_next[dir];
        self.send_next[dir] = counter.checked_add(1).ok_or(ChannelError::BadNonce)?;
        let mut nonce = [0u8; 12];
        nonce[0] = dir as u8;
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        let aad = header.to_bytes();
        let mut out = self
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: payload, aad: &aad })
            .map_err(|_| ChannelError::Auth)?;
        let tag: [u8; TAG_LEN] = out.split_off(out.len() - TAG_LEN).try_into().expect("16-byte tag");
        Ok(SealedMessage { header, nonce, ciphertext: out, tag })
    }

    /// Authenticates and decrypts without touching replay state.
    pub fn open_stateless(&self, msg: &SealedMessage) -> Result<Vec<u8>, ChannelError> {
        let dir = self.direction(msg.header.sender, msg.header.receiver)?;
        if msg.nonce[0] as usize != dir || msg.nonce[1..4] != [0, 0, 0] {
            return Err(ChannelError::BadNonce);
        }
        let mut buf = msg.ciphertext.clone();
        buf.extend_from_slice(&msg.tag);
        self.cipher()
            .decrypt(Nonce::from_slice(&msg.nonce), Payload { msg: &buf, aad: &msg.header.to_bytes() })
            .map_err(|_| ChannelError::Auth)
    }

    /// Authenticates, decrypts and rejects replayed counters.
    pub fn open(&mut self, msg: &SealedMessage) -> Result<Vec<u8>, ChannelError> {
        let payload = self.open_stateless(msg)?;
        let dir = msg.nonce[0] as usize;
        let counter = msg.counter();
        if counter < self.recv_next[dir] {
            return Err(ChannelError::Replay { got: counter, expected: self.recv_next[dir] });
        }
        self.recv_next[dir] = counter + 1;
        Ok(payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn header(sender: u32, receiver: u32) -> MessageHeader {
        MessageHeader { sender, receiver, round: 3, kind: 1 }
    }

    #[test]
    fn establish_is_deterministic_and_edge_specific() {
        assert_eq!(establish((1, 2), 9).unwrap(), establish((2, 1), 9).unwrap());
        assert_ne!(establish((1, 2), 9).unwrap().key, establish((1, 2), 10).unwrap().key);
        let mut keys = std::collections::HashSet::new();
        for a in 0..10u32 {
            for b in a + 1..10 {
                let k = establish((a, b), 1).unwrap();
                assert_eq!(k.send_counters(), [0, 0]);
                assert!(keys.insert(k.key));
            }
        }
        assert_eq!(establish((4, 4), 1), Err(ChannelError::SelfLoop(4)));
    }

    #[test]
    fn seal_open_roundtrip() {
        let mut tx = establish((1, 2), 5).unwrap();
        let mut rx = tx.clone();
        let m = tx.seal(header(2, 1), b"hello").unwrap();
        assert_eq!(rx.open(&m).unwrap(), b"hello");
        assert_eq!(tx.send_counters(), [0, 1]);
        let bytes = m.to_bytes();
        assert_eq!(SealedMessage::from_bytes(&bytes).unwrap(), m);
        assert_eq!(rx.open(&m), Err(ChannelError::Replay { got: 0, expected: 1 }));
    }

    #[test]
    fn wrong_key_and_endpoint_fail() {
        let mut tx = establish((1, 2), 5).unwrap();
        let m = tx.seal(header(1, 2), b"payload").unwrap();
        assert_eq!(establish((1, 2), 6).unwrap().open_stateless(&m), Err(ChannelError::Auth));
        assert!(matches!(tx.seal(header(1, 3), b"x"), Err(ChannelError::WrongEndpoint { .. })));
        let mut forged = m.clone();
        forged.header.round = 4;
        assert_eq!(tx.open_stateless(&forged), Err(ChannelError::Auth));
    }

    #[test]
    fn random_bit_flips_are_detected() {
        let mut tx = establish((0, 7), 1).unwrap();
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let payload: Vec<u8> = (0..200).map(|_| r.gen()).collect();
        let m = tx.seal(header(0, 7), &payload).unwrap();
        let bytes = m.to_bytes();
        for _ in 0..500 {
            let mut b = bytes.clone();
            let pos = r.gen_range(2..b.len());
            b[pos] ^= 1 << r.gen_range(0..8);
            if let Ok(parsed) = SealedMessage::from_bytes(&b) {
                assert!(tx.open_stateless(&parsed).is_err());
            }
        }
    }

    #[test]
    fn nonces_never_repeat_per_direction() {
        let mut k = establish((1, 2), 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..50 {
            let h = if i % 2 == 0 { header(1, 2) } else { header(2, 1) };
            assert!(seen.insert(k.seal(h, b"").unwrap().nonce));
        }
    }
}
