//! Ciphertexts, encryption and the homomorphic operations.

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive};
use rand::RngCore;

use super::keys::{PublicKey, SecretKey};
use super::{HeError, HeScheme};
use crate::fixed_point::FpValue;

/// Relative slack applied to noise bounds so float rounding never makes the
/// estimate optimistic.
const NOISE_SLACK: f64 = 1.0 + 1e-9;

/// Two magic bytes opening every serialized ciphertext.
pub const CT_MAGIC: [u8; 2] = *b"LW";
const HEADER_LEN: usize = 2 + 4 + 4 + 8 + 4 + 2;

/// `(a, b)` with `b − ⟨a, sk⟩ = Δ·m + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) instance_id: u32,
    pub(crate) scale_exp: u32,
    pub(crate) noise: f64,
    /// `a_0 … a_{n-1}` followed by `b`, `W` limbs each.
    pub(crate) data: Vec<u64>,
}

impl Ciphertext {
    pub fn instance_id(&self) -> u32 {
        self.instance_id
    }

    pub fn scale_exp(&self) -> u32 {
        self.scale_exp
    }

    /// Conservative bound on `|e|`.
    pub fn noise_bound(&self) -> f64 {
        self.noise
    }

    /// True when the mask `a` is all zero, i.e. `b` exposes the plaintext.
    pub fn mask_is_zero(&self, scheme: &HeScheme) -> bool {
        let w = scheme.zq().limbs();
        scheme.zq().is_zero(&self.data[..scheme.n() * w])
    }
}

/// An encoded constant prepared for repeated multiplication.
#[derive(Debug, Clone, PartialEq)]
pub struct Constant {
    small: Option<i64>,
    wide: Vec<u64>,
    abs: f64,
    scale_exp: u32,
}

impl Constant {
    pub fn scale_exp(&self) -> u32 {
        self.scale_exp
    }

    pub fn is_zero(&self) -> bool {
        self.small == Some(0)
    }
}

impl HeScheme {
    pub fn prepare(&self, k: &FpValue) -> Constant {
        let c = self.codec().centered(&k.residue);
        let small = c.to_i64();
        Constant {
            small,
            wide: if small.is_some() { Vec::new() } else { self.zq().from_bigint(&c) },
            abs: c.abs().to_f64().unwrap_or(f64::INFINITY),
            scale_exp: k.scale_exp,
        }
    }

    fn mul_add_const(&self, acc: &mut [u64], x: &[u64], k: &Constant) {
        match k.small {
            Some(0) => {}
            Some(v) => self.zq().mul_add_i64(acc, x, v),
            None => self.zq().mul_add_wide(acc, x, &k.wide),
        }
    }

    /// Random subset sum of public-key rows plus `raw` on `b`.
    pub(crate) fn encrypt_raw<R: RngCore + ?Sized>(
        &self,
        pk: &PublicKey,
        raw: &[u64],
        rng: &mut R,
    ) -> (Vec<u64>, f64) {
        let body = self.ct_limbs();
        let w = self.zq().limbs();
        let mut data = vec![0u64; body];
        let mut chosen = 0usize;
        let mut bits = 0u64;
        for (idx, entry) in pk.entries.chunks_exact(body).enumerate() {
            if idx % 64 == 0 {
                bits = rng.next_u64();
            }
            if (bits >> (idx % 64)) & 1 == 1 {
                self.zq().add_assign(&mut data, entry);
                chosen += 1;
            }
        }
        self.zq().add_assign(&mut data[self.n() * w..], raw);
        (data, chosen as f64 * pk.entry_noise * NOISE_SLACK)
    }

    pub fn encrypt<R: RngCore + ?Sized>(
        &self,
        pk: &PublicKey,
        m: &FpValue,
        rng: &mut R,
    ) -> Result<Ciphertext, HeError> {
        if &m.residue >= self.codec().modulus() {
            return Err(HeError::ResidueOutOfRange);
        }
        if m.scale_exp > self.codec().levels() {
            return Err(HeError::LevelExceeded { got: m.scale_exp, levels: self.codec().levels() });
        }
        let raw = self.zq().shl(&self.zq().from_biguint(&m.residue), self.params().headroom_bits);
        let (data, noise) = self.encrypt_raw(pk, &raw, rng);
        Ok(Ciphertext { instance_id: pk.instance_id, scale_exp: m.scale_exp, noise, data })
    }

    /// Encode and encrypt a real value at scale exponent 1.
    pub fn encrypt_real<R: RngCore + ?Sized>(
        &self,
        pk: &PublicKey,
        x: f64,
        rng: &mut R,
    ) -> Result<Ciphertext, HeError> {
        let m = self.codec().encode(x).map_err(|e| HeError::Params(e.to_string()))?;
        self.encrypt(pk, &m, rng)
    }

    /// `b − ⟨a, sk⟩`
    fn phase(&self, sk: &SecretKey, ct: &Ciphertext) -> Vec<u64> {
        let w = self.zq().limbs();
        let n = self.n();
        let mut raw = ct.data[n * w..].to_vec();
        let dot = self.zq().inner_product(&ct.data[..n * w], &sk.data);
        self.zq().sub_assign(&mut raw, &dot);
        raw
    }

    /// Residue and measured error magnitude, without any checks.
    pub fn decrypt_detail(&self, sk: &SecretKey, ct: &Ciphertext) -> (FpValue, f64) {
        let zq = self.zq();
        let h = self.params().headroom_bits;
        let raw = self.phase(sk, ct);
        let mut half = zq.zero();
        half[((h - 1) / 64) as usize] = 1u64 << ((h - 1) % 64);
        let mut rounded = raw.clone();
        zq.add_assign(&mut rounded, &half);
        let m = zq.shr(&rounded, h);
        let mut err = raw;
        zq.sub_assign(&mut err, &zq.shl(&m, h));
        let value = FpValue { residue: zq.to_biguint(&m), scale_exp: ct.scale_exp };
        (value, zq.centered_abs_f64(&err))
    }

    pub fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<FpValue, HeError> {
        if sk.instance_id != ct.instance_id {
            return Err(HeError::InstanceMismatch { expected: sk.instance_id, got: ct.instance_id });
        }
        self.decrypt_ignoring_instance(sk, ct)
    }

    /// Decryption with an arbitrary secret key; used to model an attacker
    /// holding the wrong key.
    pub fn decrypt_ignoring_instance(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<FpValue, HeError> {
        // Also rejects a NaN bound.
        if ct.noise.partial_cmp(&self.noise_margin()) != Some(std::cmp::Ordering::Less) {
            return Err(HeError::NoiseBudgetExhausted { bound: ct.noise, margin: self.noise_margin() });
        }
        let (value, measured) = self.decrypt_detail(sk, ct);
        if measured > ct.noise {
            return Err(HeError::NoiseExceeded { measured, bound: ct.noise });
        }
        Ok(value)
    }

    pub fn decrypt_real(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<f64, HeError> {
        Ok(self.codec().decode(&self.decrypt(sk, ct)?))
    }

    fn check_pair(&self, x: &Ciphertext, y: &Ciphertext) -> Result<(), HeError> {
        if x.instance_id != y.instance_id {
            return Err(HeError::InstanceMismatch { expected: x.instance_id, got: y.instance_id });
        }
        if x.scale_exp != y.scale_exp {
            return Err(HeError::ScaleMismatch(x.scale_exp, y.scale_exp));
        }
        Ok(())
    }

    pub fn add(&self, x: &Ciphertext, y: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check_pair(x, y)?;
        let mut out = x.clone();
        self.zq().add_assign(&mut out.data, &y.data);
        out.noise = (x.noise + y.noise) * NOISE_SLACK;
        Ok(out)
    }

    pub fn sub(&self, x: &Ciphertext, y: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check_pair(x, y)?;
        let mut out = x.clone();
        self.zq().sub_assign(&mut out.data, &y.data);
        out.noise = (x.noise + y.noise) * NOISE_SLACK;
        Ok(out)
    }

    pub fn neg(&self, x: &Ciphertext) -> Ciphertext {
        let mut out = x.clone();
        self.zq().neg_assign(&mut out.data);
        out
    }

    pub fn scalar_mul(&self, k: &FpValue, x: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.linear_combination(&[(&self.prepare(k), x)])
    }

    /// `Σ_j k_j ⊙ c_j` in one pass; all ciphertexts must share instance and
    /// scale, and all constants must share a scale.
    pub fn linear_combination(&self, terms: &[(&Constant, &Ciphertext)]) -> Result<Ciphertext, HeError> {
        let (k0, c0) = terms.first().ok_or(HeError::EmptyCombination)?;
        for (k, c) in terms {
            self.check_pair(c0, c)?;
            if k.scale_exp != k0.scale_exp {
                return Err(HeError::ScaleMismatch(k0.scale_exp, k.scale_exp));
            }
        }
        let scale_exp = c0.scale_exp + k0.scale_exp;
        let levels = self.codec().levels();
        if scale_exp > levels {
            return Err(HeError::LevelExceeded { got: scale_exp, levels });
        }
        let mut data = vec![0u64; self.ct_limbs()];
        let mut noise = 0.0;
        for (k, c) in terms {
            self.mul_add_const(&mut data, &c.data, k);
            noise += k.abs * c.noise;
        }
        Ok(Ciphertext { instance_id: c0.instance_id, scale_exp, noise: noise * NOISE_SLACK, data })
    }

    pub fn to_bytes(&self, ct: &Ciphertext) -> Vec<u8> {
        let width = self.elem_width();
        let mut out = Vec::with_capacity(HEADER_LEN + (self.n() + 1) * width);
        out.extend_from_slice(&CT_MAGIC);
        out.extend_from_slice(&ct.instance_id.to_be_bytes());
        out.extend_from_slice(&ct.scale_exp.to_be_bytes());
        out.extend_from_slice(&ct.noise.to_be_bytes());
        out.extend_from_slice(&(self.n() as u32).to_be_bytes());
        out.extend_from_slice(&(width as u16).to_be_bytes());
        self.write_elems(&ct.data, &mut out);
        out
    }

    /// Bytes per serialized residue.
    pub(crate) fn elem_width(&self) -> usize {
        self.ct_bits().div_ceil(8) as usize
    }

    /// Appends every `W`-limb element as a big-endian residue.
    pub(crate) fn write_elems(&self, data: &[u64], out: &mut Vec<u8>) {
        let width = self.elem_width();
        for elem in data.chunks_exact(self.zq().limbs()) {
            let le: Vec<u8> = elem.iter().flat_map(|l| l.to_le_bytes()).collect();
            out.extend(le[..width].iter().rev());
        }
    }

    /// Inverse of `write_elems`; `bytes` must hold whole residues below `Q`.
    pub(crate) fn read_elems(&self, bytes: &[u8]) -> Result<Vec<u64>, HeError> {
        let width = self.elem_width();
        let zq = self.zq();
        let w = zq.limbs();
        if !bytes.len().is_multiple_of(width) {
            return Err(HeError::Wire("residue bytes are not a whole number of elements".into()));
        }
        let mut data = vec![0u64; bytes.len() / width * w];
        for (elem, chunk) in data.chunks_exact_mut(w).zip(bytes.chunks_exact(width)) {
            let mut le: Vec<u8> = chunk.iter().rev().copied().collect();
            le.resize(w * 8, 0);
            for (l, b) in elem.iter_mut().zip(le.chunks_exact(8)) {
                *l = u64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            if !zq.is_reduced(elem) {
                return Err(HeError::Wire("residue is not below Q".into()));
            }
        }
        Ok(data)
    }

    pub fn from_bytes(&self, bytes: &[u8]) -> Result<Ciphertext, HeError> {
        let err = |m: &str| HeError::Wire(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(err("shorter than the header"));
        }
        if bytes[..2] != CT_MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let instance_id = u32_at(2);
        let scale_exp = u32_at(6);
        let noise = f64::from_be_bytes(bytes[10..18].try_into().expect("8 bytes"));
        let n = u32_at(18) as usize;
        let width = u16::from_be_bytes([bytes[22], bytes[23]]) as usize;
        if n != self.n() {
            return Err(err("secret dimension does not match the scheme"));
        }
        if width != self.elem_width() {
            return Err(err("residue width does not match the scheme"));
        }
        if bytes.len() != HEADER_LEN + (n + 1) * width {
            return Err(err("length does not match the header"));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(err("noise bound is not a non-negative number"));
        }
        if scale_exp > self.codec().levels() {
            return Err(err("scale exponent exceeds the level count"));
        }
        let data = self.read_elems(&bytes[HEADER_LEN..])?;
        Ok(Ciphertext { instance_id, scale_exp, noise, data })
    }

    /// Centered plaintext multiplier of a prepared constant.
    pub fn constant_value(&self, k: &Constant) -> BigInt {
        match k.small {
            Some(v) => BigInt::from(v),
            None => self.zq().to_centered_bigint(&k.wide),
        }
    }
}
