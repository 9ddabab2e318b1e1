//! Per-instance key material.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::HeScheme;

/// Uniform secret in `Z_Q^n`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    pub(crate) instance_id: u32,
    pub(crate) data: Vec<u64>,
}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SecretKey(instance {})", self.instance_id)
    }
}

impl SecretKey {
    pub fn instance_id(&self) -> u32 {
        self.instance_id
    }
}

/// Zero encryptions `(a, ⟨a, sk⟩ + e)` under the matching secret key.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicKey {
    pub(crate) instance_id: u32,
    /// `count` consecutive ciphertext bodies.
    pub(crate) entries: Vec<u64>,
    pub(crate) count: usize,
    /// Bound on the error of each entry.
    pub(crate) entry_noise: f64,
}

impl PublicKey {
    pub fn instance_id(&self) -> u32 {
        self.instance_id
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceKeys {
    pub instance_id: u32,
    pub sk: SecretKey,
    pub pk: PublicKey,
}

/// Deterministic in `(seed, instance_id)`.
pub fn keygen(scheme: &HeScheme, instance_id: u32, seed: u64) -> InstanceKeys {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(instance_id as u64);
    let zq = scheme.zq();
    let w = zq.limbs();
    let n = scheme.n();
    let width = scheme.params().noise_width as i64;

    let mut sk = vec![0u64; n * w];
    zq.random(&mut rng, &mut sk);

    let body = scheme.ct_limbs();
    let count = scheme.params().pk_size;
    let mut entries = vec![0u64; count * body];
    let mut err = zq.zero();
    for entry in entries.chunks_exact_mut(body) {
        let (a, b) = entry.split_at_mut(n * w);
        zq.random(&mut rng, a);
        b.copy_from_slice(&zq.inner_product(a, &sk));
        zq.set_i64(&mut err, rng.gen_range(-width..=width));
        zq.add_assign(b, &err);
    }
    InstanceKeys {
        instance_id,
        sk: SecretKey { instance_id, data: sk },
        pk: PublicKey { instance_id, entries, count, entry_noise: width as f64 },
    }
}
