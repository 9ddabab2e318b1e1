//! Leveled additively homomorphic encryption over plain LWE.
//!
//! The ciphertext modulus is `Q = q·Δ` with `Δ = 2^headroom_bits`. A plaintext
//! residue `m ∈ Z_q` is carried as `Δ·m` so that decryption recovers it
//! exactly as long as the accumulated error stays below `Δ/2`. Multiplying a
//! ciphertext by a constant `k` multiplies `Δ·m` into `Δ·(k·m mod q)`, so all
//! operations act on the residues exactly as the codec does in the clear.

mod ciphertext;
mod keys;
mod params;
mod switch;
pub mod zq;

use thiserror::Error;

use crate::fixed_point::FpCodec;

pub use ciphertext::{Ciphertext, Constant, CT_MAGIC};
pub use keys::{keygen, InstanceKeys, PublicKey, SecretKey};
pub use params::{SchemeParams, SchemePreset, FORMATION_HEADROOM_BITS};
pub use switch::{detect_key_cycles, KeyRegistry, SwitchKey, SK_MAGIC};
use zq::Zq;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeError {
    #[error("invalid scheme parameters: {0}")]
    Params(String),
    #[error("instance mismatch: expected {expected}, got {got}")]
    InstanceMismatch { expected: u32, got: u32 },
    #[error("scale exponents differ: {0} vs {1}")]
    ScaleMismatch(u32, u32),
    #[error("scale exponent {got} exceeds the level count {levels}")]
    LevelExceeded { got: u32, levels: u32 },
    #[error("measured error {measured:e} exceeds the noise bound {bound:e}")]
    NoiseExceeded { measured: f64, bound: f64 },
    #[error("noise bound {bound:e} leaves no decryption margin (needs < {margin:e})")]
    NoiseBudgetExhausted { bound: f64, margin: f64 },
    #[error("plaintext residue is not below q")]
    ResidueOutOfRange,
    #[error("switch key {from}->{to} would close the key cycle {cycle:?}")]
    KeyCycle { from: u32, to: u32, cycle: Vec<u32> },
    #[error("switch key from instance {0} to itself")]
    SelfKey(u32),
    #[error("switch key is for {key_from}->{key_to}, ciphertext is under {got}")]
    WrongSwitchKey { key_from: u32, key_to: u32, got: u32 },
    #[error("linear combination needs at least one term")]
    EmptyCombination,
    #[error("malformed ciphertext bytes: {0}")]
    Wire(String),
}

/// Codec, parameters and limb arithmetic bundled together.
#[derive(Debug, Clone)]
pub struct HeScheme {
    params: SchemeParams,
    codec: FpCodec,
    q_bits: u32,
    zq: Zq,
    delta_half: f64,
    scale_small: Option<u64>,
    scale_wide: Vec<u64>,
}

impl HeScheme {
    /// The codec modulus must be a power of two.
    pub fn new(codec: FpCodec, params: SchemeParams) -> Result<Self, HeError> {
        params.validate()?;
        let q_bits = codec
            .modulus_log2()
            .ok_or_else(|| HeError::Params("the codec modulus must be a power of two".into()))?;
        let zq = Zq::new(q_bits + params.headroom_bits);
        let scale_wide = zq.from_biguint(codec.scale());
        let scale_small = u64::try_from(codec.scale().clone()).ok();
        Ok(Self {
            params,
            codec,
            q_bits,
            zq,
            delta_half: 2f64.powi(params.headroom_bits as i32 - 1),
            scale_small,
            scale_wide,
        })
    }

    pub fn from_preset(codec: FpCodec, preset: SchemePreset) -> Result<Self, HeError> {
        Self::new(codec, preset.params())
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn codec(&self) -> &FpCodec {
        &self.codec
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn q_bits(&self) -> u32 {
        self.q_bits
    }

    /// Bits of the ciphertext modulus `Q`.
    pub fn ct_bits(&self) -> u32 {
        self.zq.bits()
    }

    pub fn zq(&self) -> &Zq {
        &self.zq
    }

    /// Largest admissible noise bound, `Δ/2`.
    pub fn noise_margin(&self) -> f64 {
        self.delta_half
    }

    pub fn gadget_len(&self) -> usize {
        self.params.gadget_len(self.ct_bits())
    }

    /// Limbs in one ciphertext, `(n + 1)·W`.
    pub fn ct_limbs(&self) -> usize {
        (self.params.n + 1) * self.zq.limbs()
    }

    /// `acc += S·x` element-wise.
    pub(crate) fn mul_add_scale(&self, acc: &mut [u64], x: &[u64]) {
        match self.scale_small {
            Some(s) => self.zq.mul_add_u64(acc, x, s),
            None => self.zq.mul_add_wide(acc, x, &self.scale_wide),
        }
    }

    pub(crate) fn scale_f64(&self) -> f64 {
        num_traits::ToPrimitive::to_f64(self.codec.scale()).unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests;
