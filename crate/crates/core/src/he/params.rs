//! Scheme parameters and named presets.

use serde::{Deserialize, Serialize};

use super::HeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Secret dimension.
    pub n: usize,
    /// `log2 Δ`: the plaintext residue sits `headroom_bits` above the noise.
    pub headroom_bits: u32,
    /// Errors are drawn uniformly from `[-noise_width, noise_width]`.
    pub noise_width: u32,
    /// `log2` of the key-switching gadget base.
    pub gadget_log2: u32,
    /// Number of zero encryptions in a public key.
    pub pk_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemePreset {
    /// Tiny dimension for unit tests; no security.
    Test,
    /// `n = 2^8`, the lower security label.
    Toy,
    /// `n = 2^13`, the higher security label. Its keys need tens of
    /// gigabytes with this scheme, so it is listed for completeness only.
    Small,
}

/// Headroom that covers the noise of a full formation run at the paper's
/// codec, with margin.
pub const FORMATION_HEADROOM_BITS: u32 = 503;

impl SchemePreset {
    pub fn params(self) -> SchemeParams {
        match self {
            Self::Test => SchemeParams::new(16, FORMATION_HEADROOM_BITS, 8, 16),
            Self::Toy => SchemeParams::new(256, FORMATION_HEADROOM_BITS, 8, 64),
            Self::Small => SchemeParams::new(8192, FORMATION_HEADROOM_BITS, 8, 16),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Test => "test",
            Self::Toy => "toy",
            Self::Small => "small",
        }
    }
}

impl SchemeParams {
    /// Parameters with the default public-key size `2n + 64`.
    pub fn new(n: usize, headroom_bits: u32, noise_width: u32, gadget_log2: u32) -> Self {
        Self { n, headroom_bits, noise_width, gadget_log2, pk_size: 2 * n + 64 }
    }

    pub fn validate(&self) -> Result<(), HeError> {
        let bad = |m: &str| Err(HeError::Params(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(1..=64).contains(&self.gadget_log2) {
            return bad("gadget base must be 2^1 ..= 2^64");
        }
        if self.pk_size == 0 {
            return bad("public key needs at least one entry");
        }
        if self.headroom_bits < 2 {
            return bad("headroom must be at least 2 bits");
        }
        Ok(())
    }

    /// `⌈log_base Q⌉` digits cover a ciphertext residue of `ct_bits` bits.
    pub fn gadget_len(&self, ct_bits: u32) -> usize {
        ct_bits.div_ceil(self.gadget_log2) as usize
    }
}
