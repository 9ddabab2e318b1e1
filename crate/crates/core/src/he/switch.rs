//! Key switching and the registry that keeps issued switch keys acyclic.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;

use super::ciphertext::Ciphertext;
use super::keys::{PublicKey, SecretKey};
use super::{HeError, HeScheme};

/// Encryptions under `pk_to` of `S·sk_from[t]·B^u` for every secret
/// coordinate `t` and gadget digit `u`.
#[derive(Clone, PartialEq)]
pub struct SwitchKey {
    pub(crate) from_id: u32,
    pub(crate) to_id: u32,
    pub(crate) gadget_log2: u32,
    pub(crate) gadget_len: usize,
    /// `n · gadget_len` ciphertext bodies, row-major in `(t, u)`.
    pub(crate) body: Vec<u64>,
    pub(crate) entry_noise: f64,
}

impl std::fmt::Debug for SwitchKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SwitchKey({} -> {}, {} digits)", self.from_id, self.to_id, self.gadget_len)
    }
}

impl SwitchKey {
    pub fn from_id(&self) -> u32 {
        self.from_id
    }

    pub fn to_id(&self) -> u32 {
        self.to_id
    }

    pub fn size_bytes(&self) -> usize {
        self.body.len() * 8
    }
}

/// Two magic bytes opening every serialized switch key.
pub const SK_MAGIC: [u8; 2] = *b"KS";
const SK_HEADER_LEN: usize = 2 + 4 + 4 + 4 + 4 + 8 + 4 + 2;

/// Issued `(from → to)` switch-key edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    edges: BTreeSet<(u32, u32)>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    pub fn contains(&self, from: u32, to: u32) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Path `start → … → goal` along issued edges, if any.
    fn path(&self, start: u32, goal: u32) -> Option<Vec<u32>> {
        let mut prev: BTreeMap<u32, u32> = BTreeMap::new();
        let mut stack = vec![start];
        let mut seen = BTreeSet::from([start]);
        while let Some(v) = stack.pop() {
            if v == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = prev[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &(a, b) in self.edges.range((v, 0)..=(v, u32::MAX)) {
                debug_assert_eq!(a, v);
                if seen.insert(b) {
                    prev.insert(b, v);
                    stack.push(b);
                }
            }
        }
        None
    }

    /// Records `from → to` unless it is a self key or closes a cycle.
    pub fn register(&mut self, from: u32, to: u32) -> Result<(), HeError> {
        if from == to {
            return Err(HeError::SelfKey(from));
        }
        if let Some(cycle) = self.path(to, from) {
            return Err(HeError::KeyCycle { from, to, cycle });
        }
        self.edges.insert((from, to));
        Ok(())
    }

    /// Records an edge without any check, to exercise the detector.
    pub fn insert_unchecked(&mut self, from: u32, to: u32) {
        self.edges.insert((from, to));
    }
}

/// Every elementary cycle of the directed key graph, each listed once and
/// starting at its smallest instance id.
pub fn detect_key_cycles(registry: &KeyRegistry) -> Vec<Vec<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (a, b) in registry.edges() {
        adj.entry(a).or_default().push(b);
    }
    fn walk(
        adj: &BTreeMap<u32, Vec<u32>>,
        start: u32,
        v: u32,
        path: &mut Vec<u32>,
        out: &mut Vec<Vec<u32>>,
    ) {
        for &w in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if w == start {
                out.push(path.clone());
            } else if w > start && !path.contains(&w) {
                path.push(w);
                walk(adj, start, w, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    for &start in adj.keys() {
        walk(&adj, start, start, &mut vec![start], &mut out);
    }
    out
}

impl HeScheme {
    /// Registers `from → to` and builds the key from `sk_from` and `pk_to`.
    pub fn gen_switch_key<R: RngCore + ?Sized>(
        &self,
        sk_from: &SecretKey,
        pk_to: &PublicKey,
        registry: &mut KeyRegistry,
        rng: &mut R,
    ) -> Result<SwitchKey, HeError> {
        registry.register(sk_from.instance_id, pk_to.instance_id)?;
        Ok(self.build_switch_key(sk_from, pk_to, rng))
    }

    fn build_switch_key<R: RngCore + ?Sized>(&self, sk_from: &SecretKey, pk_to: &PublicKey, rng: &mut R) -> SwitchKey {
        let zq = self.zq();
        let w = zq.limbs();
        let g = self.params().gadget_log2;
        let len = self.gadget_len();
        let body_len = self.ct_limbs();
        let mut body = Vec::with_capacity(self.n() * len * body_len);
        let mut entry_noise = 0.0f64;
        for s_t in sk_from.data.chunks_exact(w) {
            let mut scaled = zq.zero();
            self.mul_add_scale(&mut scaled, s_t);
            for u in 0..len {
                let raw = zq.shl(&scaled, g * u as u32);
                let (data, noise) = self.encrypt_raw(pk_to, &raw, rng);
                entry_noise = entry_noise.max(noise);
                body.extend_from_slice(&data);
            }
        }
        SwitchKey {
            from_id: sk_from.instance_id,
            to_id: pk_to.instance_id,
            gadget_log2: g,
            gadget_len: len,
            body,
            entry_noise,
        }
    }

    /// `magic ‖ from ‖ to ‖ gadget_log2 ‖ gadget_len ‖ entry_noise ‖ n ‖
    /// width ‖ residues`, big-endian.
    pub fn switch_key_to_bytes(&self, key: &SwitchKey) -> Vec<u8> {
        let width = self.elem_width();
        let mut out = Vec::with_capacity(SK_HEADER_LEN + key.body.len() / self.zq().limbs() * width);
        out.extend_from_slice(&SK_MAGIC);
        out.extend_from_slice(&key.from_id.to_be_bytes());
        out.extend_from_slice(&key.to_id.to_be_bytes());
        out.extend_from_slice(&key.gadget_log2.to_be_bytes());
        out.extend_from_slice(&(key.gadget_len as u32).to_be_bytes());
        out.extend_from_slice(&key.entry_noise.to_be_bytes());
        out.extend_from_slice(&(self.n() as u32).to_be_bytes());
        out.extend_from_slice(&(width as u16).to_be_bytes());
        self.write_elems(&key.body, &mut out);
        out
    }

    pub fn switch_key_from_bytes(&self, bytes: &[u8]) -> Result<SwitchKey, HeError> {
        let err = |m: &str| HeError::Wire(m.to_string());
        if bytes.len() < SK_HEADER_LEN {
            return Err(err("shorter than the header"));
        }
        if bytes[..2] != SK_MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let from_id = u32_at(2);
        let to_id = u32_at(6);
        let gadget_log2 = u32_at(10);
        let gadget_len = u32_at(14) as usize;
        let entry_noise = f64::from_be_bytes(bytes[18..26].try_into().expect("8 bytes"));
        let n = u32_at(26) as usize;
        let width = u16::from_be_bytes([bytes[30], bytes[31]]) as usize;
        if n != self.n() || width != self.elem_width() {
            return Err(err("dimensions do not match the scheme"));
        }
        if gadget_log2 != self.params().gadget_log2 || gadget_len != self.gadget_len() {
            return Err(err("gadget does not match the scheme"));
        }
        if bytes.len() != SK_HEADER_LEN + n * gadget_len * (n + 1) * width {
            return Err(err("length does not match the header"));
        }
        if !(entry_noise.is_finite() && entry_noise >= 0.0) {
            return Err(err("noise bound is not a non-negative number"));
        }
        let body = self.read_elems(&bytes[SK_HEADER_LEN..])?;
        Ok(SwitchKey { from_id, to_id, gadget_log2, gadget_len, body, entry_noise })
    }

    /// Re-encrypts `x` from `key.from_id` to `key.to_id`; the plaintext gains
    /// one factor `S`.
    pub fn key_switch(&self, x: &Ciphertext, key: &SwitchKey) -> Result<Ciphertext, HeError> {
        if x.instance_id != key.from_id {
            return Err(HeError::WrongSwitchKey { key_from: key.from_id, key_to: key.to_id, got: x.instance_id });
        }
        if key.gadget_log2 != self.params().gadget_log2 || key.gadget_len != self.gadget_len() {
            return Err(HeError::Params("switch key was built for other parameters".into()));
        }
        let levels = self.codec().levels();
        if x.scale_exp + 1 > levels {
            return Err(HeError::LevelExceeded { got: x.scale_exp + 1, levels });
        }
        let zq = self.zq();
        let w = zq.limbs();
        let n = self.n();
        let g = key.gadget_log2;
        let body_len = self.ct_limbs();
        let mut data = vec![0u64; body_len];
        self.mul_add_scale(&mut data[n * w..], &x.data[n * w..]);
        let mut digit_sum = 0.0f64;
        for t in 0..n {
            let a_t = &x.data[t * w..(t + 1) * w];
            for u in 0..key.gadget_len {
                let d = zq.digit(a_t, g * u as u32, g);
                if d == 0 {
                    continue;
                }
                let entry = &key.body[(t * key.gadget_len + u) * body_len..][..body_len];
                zq.mul_sub_u64(&mut data, entry, d);
                digit_sum += d as f64;
            }
        }
        let noise = (self.scale_f64() * x.noise + digit_sum * key.entry_noise) * (1.0 + 1e-9);
        Ok(Ciphertext { instance_id: key.to_id, scale_exp: x.scale_exp + 1, noise, data })
    }
}
