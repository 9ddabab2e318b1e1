//! Message kinds, payload framing and the on-wire envelope.

use serde::Serialize;

use super::ProtocolError;
use crate::channel::{MessageHeader, SealedMessage, SEALED_MAGIC};
use crate::he::{Ciphertext, HeScheme, SwitchKey};

/// Magic of an unsealed envelope.
pub const UNSEALED_MAGIC: [u8; 2] = *b"UM";
/// Magic of a payload holding tagged ciphertexts.
pub const ITEMS_MAGIC: [u8; 2] = *b"PL";
/// Magic of a payload holding one switch key.
pub const KEY_PAYLOAD_MAGIC: [u8; 2] = *b"PK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MessageKind {
    ZShare,
    ZetaShare,
    InitAlphaShare,
    DeltaParam,
    SwitchKeyDelivery,
    FinalSwitchRequest,
    FinalSwitchResponse,
}

impl MessageKind {
    pub const ALL: [Self; 7] = [
        Self::ZShare,
        Self::ZetaShare,
        Self::InitAlphaShare,
        Self::DeltaParam,
        Self::SwitchKeyDelivery,
        Self::FinalSwitchRequest,
        Self::FinalSwitchResponse,
    ];

    pub fn code(self) -> u8 {
        match self {
            Self::ZShare => 1,
            Self::ZetaShare => 2,
            Self::InitAlphaShare => 3,
            Self::DeltaParam => 4,
            Self::SwitchKeyDelivery => 5,
            Self::FinalSwitchRequest => 6,
            Self::FinalSwitchResponse => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Whether the payload carries (a function of) an ADMM iterate.
    pub fn carries_iterate(self) -> bool {
        !matches!(self, Self::DeltaParam | Self::SwitchKeyDelivery)
    }

    /// Only the final switch response travels without channel encryption.
    pub fn must_be_sealed(self) -> bool {
        self != Self::FinalSwitchResponse
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Inner payload of every protocol message.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Ciphertexts tagged with a global entry (iterates) or a parameter
    /// position (δ).
    Items(Vec<(u32, Ciphertext)>),
    SwitchKey(SwitchKey),
}

fn u32_at(b: &[u8], i: usize) -> Result<u32, ProtocolError> {
    b.get(i..i + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| ProtocolError::Wire("truncated payload".into()))
}

impl Payload {
    /// `PL ‖ count ‖ (tag ‖ len ‖ ciphertext)*` or `PK ‖ len ‖ key`.
    pub fn encode(&self, scheme: &HeScheme) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::Items(items) => {
                out.extend_from_slice(&ITEMS_MAGIC);
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for (tag, ct) in items {
                    let bytes = scheme.to_bytes(ct);
                    out.extend_from_slice(&tag.to_be_bytes());
                    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                    out.extend_from_slice(&bytes);
                }
            }
            Self::SwitchKey(key) => {
                let bytes = scheme.switch_key_to_bytes(key);
                out.extend_from_slice(&KEY_PAYLOAD_MAGIC);
                out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
                out.extend_from_slice(&bytes);
            }
        }
        out
    }

    pub fn decode(scheme: &HeScheme, bytes: &[u8]) -> Result<Self, ProtocolError> {
        let magic = bytes.get(..2).ok_or_else(|| ProtocolError::Wire("empty payload".into()))?;
        if magic == ITEMS_MAGIC {
            let count = u32_at(bytes, 2)? as usize;
            let mut pos = 6;
            let mut items = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let tag = u32_at(bytes, pos)?;
                let len = u32_at(bytes, pos + 4)? as usize;
                pos += 8;
                let body = bytes
                    .get(pos..pos + len)
                    .ok_or_else(|| ProtocolError::Wire("truncated ciphertext".into()))?;
                items.push((tag, scheme.from_bytes(body)?));
                pos += len;
            }
            if pos != bytes.len() {
                return Err(ProtocolError::Wire("trailing bytes after the last item".into()));
            }
            Ok(Self::Items(items))
        } else if magic == KEY_PAYLOAD_MAGIC {
            let len = u32_at(bytes, 2)? as usize;
            if bytes.len() != 6 + len {
                return Err(ProtocolError::Wire("switch key length mismatch".into()));
            }
            Ok(Self::SwitchKey(scheme.switch_key_from_bytes(&bytes[6..])?))
        } else {
            Err(ProtocolError::Wire("unknown payload magic".into()))
        }
    }
}

/// What actually crosses the transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Sealed(SealedMessage),
    Plain { header: MessageHeader, payload: Vec<u8> },
}

impl WireMessage {
    pub fn header(&self) -> MessageHeader {
        match self {
            Self::Sealed(m) => m.header,
            Self::Plain { header, .. } => *header,
        }
    }

    pub fn is_sealed(&self) -> bool {
        matches!(self, Self::Sealed(_))
    }

    pub fn kind(&self) -> Option<MessageKind> {
        MessageKind::from_code(self.header().kind)
    }

    /// Sealed messages use the channel framing; plain ones are
    /// `UM ‖ header ‖ len ‖ payload`.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Self::Sealed(m) => m.to_bytes(),
            Self::Plain { header, payload } => {
                let mut out = Vec::with_capacity(2 + MessageHeader::LEN + 4 + payload.len());
                out.extend_from_slice(&UNSEALED_MAGIC);
                out.extend_from_slice(&header.to_bytes());
                out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
                out.extend_from_slice(payload);
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        match bytes.get(..2) {
            Some(m) if m == SEALED_MAGIC => Ok(Self::Sealed(SealedMessage::from_bytes(bytes)?)),
            Some(m) if m == UNSEALED_MAGIC => {
                let fixed = 2 + MessageHeader::LEN + 4;
                if bytes.len() < fixed {
                    return Err(ProtocolError::Wire("truncated envelope".into()));
                }
                let header = MessageHeader::from_bytes(&bytes[2..]);
                let len = u32_at(bytes, fixed - 4)? as usize;
                if bytes.len() != fixed + len {
                    return Err(ProtocolError::Wire("envelope length mismatch".into()));
                }
                Ok(Self::Plain { header, payload: bytes[fixed..].to_vec() })
            }
            _ => Err(ProtocolError::Wire("unknown envelope magic".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed_point::FpCodec;
    use crate::he::{keygen, KeyRegistry, SchemePreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn kind_codes_roundtrip() {
        for k in MessageKind::ALL {
            assert_eq!(MessageKind::from_code(k.code()), Some(k));
        }
        assert_eq!(MessageKind::from_code(0), None);
        assert!(!MessageKind::FinalSwitchResponse.must_be_sealed());
        assert!(!MessageKind::DeltaParam.carries_iterate());
    }

    #[test]
    fn payload_and_envelope_roundtrip() {
        let s = HeScheme::from_preset(FpCodec::paper(), SchemePreset::Test).unwrap();
        let k = keygen(&s, 0, 1);
        let k2 = keygen(&s, 2, 1);
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let items = Payload::Items(vec![
            (5, s.encrypt_real(&k.pk, 1.5, &mut r).unwrap()),
            (9, s.encrypt_real(&k.pk, -2.0, &mut r).unwrap()),
        ]);
        let bytes = items.encode(&s);
        assert_eq!(Payload::decode(&s, &bytes).unwrap(), items);
        assert!(Payload::decode(&s, &bytes[..bytes.len() - 3]).is_err());
        let key = s.gen_switch_key(&k.sk, &k2.pk, &mut KeyRegistry::new(), &mut r).unwrap();
        let kp = Payload::SwitchKey(key);
        assert_eq!(Payload::decode(&s, &kp.encode(&s)).unwrap(), kp);

        let header = MessageHeader { sender: 2, receiver: 3, round: 7, kind: MessageKind::FinalSwitchResponse.code() };
        let plain = WireMessage::Plain { header, payload: bytes };
        let wire = plain.to_bytes();
        assert_eq!(&wire[..2], b"UM");
        assert_eq!(WireMessage::from_bytes(&wire).unwrap(), plain);
        assert!(WireMessage::from_bytes(b"XX").is_err());
    }
}
