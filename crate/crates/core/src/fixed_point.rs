//! Fixed-point encoding of reals into `Z_q` with scale-exponent bookkeeping.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FpError {
    #[error("{value} is outside the encodable range [-{bound}, {bound}]")]
    OutOfRange { value: f64, bound: f64 },
    #[error("value is not finite")]
    NotFinite,
    #[error("scale exponents differ: {0} vs {1}")]
    ScaleMismatch(u32, u32),
    #[error("scale exponent {got} exceeds the level count {levels}")]
    LevelExceeded { got: u32, levels: u32 },
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum BudgetViolation {
    TooDeep { depth: u32, levels: u32 },
    Overflow { depth: u32 },
}

impl std::fmt::Display for BudgetViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TooDeep { depth, levels } => {
                write!(f, "multiplicative depth {depth} exceeds the {levels} available levels")
            }
            Self::Overflow { depth } => write!(f, "2*B*S^{depth} exceeds the modulus"),
        }
    }
}

/// Encoding parameters: `S = s·σ`, `q = q0·S^L`, range bound `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FpCodec {
    s: BigUint,
    sigma: BigUint,
    scale: BigUint,
    q0: BigUint,
    levels: u32,
    modulus: BigUint,
    half_modulus: BigUint,
    bound: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct FpValue {
    pub residue: BigUint,
    pub scale_exp: u32,
}

/// Exact dyadic decomposition `x = m · 2^e` of a finite float.
fn dyadic(x: f64) -> (BigInt, i32) {
    if x == 0.0 {
        return (BigInt::zero(), 0);
    }
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    let m = BigInt::from(mant);
    (if negative { -m } else { m }, exp)
}

/// `round(x · factor)` with ties away from zero, computed exactly.
fn round_scaled(x: f64, factor: &BigUint) -> BigInt {
    let (m, e) = dyadic(x);
    let num = m * BigInt::from(factor.clone());
    if e >= 0 {
        return num << e as usize;
    }
    let den = BigInt::one() << (-e) as usize;
    let (q, r) = num.abs().div_rem(&den);
    let twice = r << 1usize;
    let q = if twice >= den { q + 1 } else { q };
    if num.sign() == Sign::Minus {
        -q
    } else {
        q
    }
}

/// `num / den` as a float, keeping precision when both are huge.
fn ratio_to_f64(num: &BigInt, den: &BigUint) -> f64 {
    let den_i = BigInt::from(den.clone());
    let (q, r) = num.div_rem(&den_i);
    let qf = q.to_f64().unwrap_or(f64::INFINITY);
    let shift = den.bits().saturating_sub(1000);
    let rf = (&r >> shift as usize).to_f64().unwrap_or(0.0);
    let df = (den >> shift as usize).to_f64().unwrap_or(f64::INFINITY);
    qf + rf / df
}

impl FpCodec {
    /// Codec with `S = s·σ` and `q = q0·S^L`.
    pub fn new(s: BigUint, sigma: BigUint, q0: BigUint, levels: u32, bound: f64) -> Result<Self, FpError> {
        if s.is_zero() || sigma.is_zero() {
            return Err(FpError::InvalidParams("s and sigma must be at least 1".into()));
        }
        let scale = &s * &sigma;
        if q0 <= scale {
            return Err(FpError::InvalidParams("q0 must exceed S".into()));
        }
        let modulus = &q0 * scale.pow(levels);
        Self::build(s, sigma, scale, q0, levels, modulus, bound)
    }

    /// Codec from an explicit scale and modulus; `q0` is recorded as `q / S^L`.
    pub fn from_parts(scale: BigUint, modulus: BigUint, levels: u32, bound: f64) -> Result<Self, FpError> {
        if scale.is_zero() {
            return Err(FpError::InvalidParams("scale must be at least 1".into()));
        }
        let q0 = &modulus / scale.pow(levels);
        Self::build(scale.clone(), BigUint::one(), scale, q0, levels, modulus, bound)
    }

    fn build(
        s: BigUint,
        sigma: BigUint,
        scale: BigUint,
        q0: BigUint,
        levels: u32,
        modulus: BigUint,
        bound: f64,
    ) -> Result<Self, FpError> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(FpError::InvalidParams(format!("range bound must be positive, got {bound}")));
        }
        if modulus < BigUint::from(2u32) {
            return Err(FpError::InvalidParams("modulus must be at least 2".into()));
        }
        let half_modulus = &modulus >> 1usize;
        let codec = Self { s, sigma, scale, q0, levels, modulus, half_modulus, bound };
        if let Err(v) = codec.budget_check(levels) {
            return Err(FpError::InvalidParams(v.to_string()));
        }
        Ok(codec)
    }

    /// `s = 2^12`, `σ = 2^11`, `q0 = 2^25`, `L = 16`, `B = 100`.
    pub fn paper() -> Self {
        Self::pow2(12, 11, 25, 16, 100.0).expect("paper preset is consistent")
    }

    /// Codec with power-of-two `s`, `σ` and `q0`.
    pub fn pow2(s_bits: u32, sigma_bits: u32, q0_bits: u32, levels: u32, bound: f64) -> Result<Self, FpError> {
        let p = |b: u32| BigUint::one() << b as usize;
        Self::new(p(s_bits), p(sigma_bits), p(q0_bits), levels, bound)
    }

    pub fn s(&self) -> &BigUint {
        &self.s
    }

    pub fn sigma(&self) -> &BigUint {
        &self.sigma
    }

    /// Combined scale `S`.
    pub fn scale(&self) -> &BigUint {
        &self.scale
    }

    pub fn q0(&self) -> &BigUint {
        &self.q0
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `log2 q` when `q` is a power of two.
    pub fn modulus_log2(&self) -> Option<u32> {
        let bits = self.modulus.bits();
        (self.modulus == BigUint::one() << (bits - 1) as usize).then(|| (bits - 1) as u32)
    }

    pub fn reduce(&self, x: &BigInt) -> BigUint {
        let m = BigInt::from(self.modulus.clone());
        x.mod_floor(&m).to_biguint().expect("mod_floor is non-negative")
    }

    /// Representative in `(-q/2, q/2]`.
    pub fn centered(&self, residue: &BigUint) -> BigInt {
        if residue > &self.half_modulus {
            BigInt::from(residue.clone()) - BigInt::from(self.modulus.clone())
        } else {
            BigInt::from(residue.clone())
        }
    }

    /// `round(S·x) mod q` at scale exponent 1.
    pub fn encode(&self, x: f64) -> Result<FpValue, FpError> {
        self.encode_at(x, 1)
    }

    /// `round(S^e·x) mod q`.
    pub fn encode_at(&self, x: f64, scale_exp: u32) -> Result<FpValue, FpError> {
        if !x.is_finite() {
            return Err(FpError::NotFinite);
        }
        if x.abs() > self.bound {
            return Err(FpError::OutOfRange { value: x, bound: self.bound });
        }
        let r = round_scaled(x, &self.scale.pow(scale_exp));
        Ok(FpValue { residue: self.reduce(&r), scale_exp })
    }

    pub fn decode(&self, v: &FpValue) -> f64 {
        ratio_to_f64(&self.centered(&v.residue), &self.scale.pow(v.scale_exp))
    }

    /// Ok iff `depth ≤ L` and `2·B·S^depth ≤ q`.
    pub fn budget_check(&self, depth: u32) -> Result<(), BudgetViolation> {
        if depth > self.levels {
            return Err(BudgetViolation::TooDeep { depth, levels: self.levels });
        }
        let (m, e) = dyadic(self.bound);
        let lhs = BigInt::from(self.scale.pow(depth)) * m * 2;
        let q = BigInt::from(self.modulus.clone());
        let fits = if e >= 0 { (lhs << e as usize) <= q } else { lhs <= (q << (-e) as usize) };
        if fits {
            Ok(())
        } else {
            Err(BudgetViolation::Overflow { depth })
        }
    }

    pub fn add(&self, x: &FpValue, y: &FpValue) -> Result<FpValue, FpError> {
        if x.scale_exp != y.scale_exp {
            return Err(FpError::ScaleMismatch(x.scale_exp, y.scale_exp));
        }
        Ok(FpValue { residue: (&x.residue + &y.residue) % &self.modulus, scale_exp: x.scale_exp })
    }

    pub fn neg(&self, x: &FpValue) -> FpValue {
        FpValue { residue: (&self.modulus - &x.residue) % &self.modulus, scale_exp: x.scale_exp }
    }

    /// Product with an encoded constant; scale exponents add.
    pub fn mul_const(&self, k: &FpValue, x: &FpValue) -> Result<FpValue, FpError> {
        let scale_exp = k.scale_exp + x.scale_exp;
        if scale_exp > self.levels {
            return Err(FpError::LevelExceeded { got: scale_exp, levels: self.levels });
        }
        Ok(FpValue { residue: (&k.residue * &x.residue) % &self.modulus, scale_exp })
    }

    /// Fixed byte width of a residue on the wire.
    pub fn residue_width(&self) -> usize {
        self.modulus.bits().div_ceil(8) as usize
    }
}

impl FpValue {
    /// Big-endian bytes left-padded to `width`.
    pub fn to_bytes(&self, width: usize) -> Vec<u8> {
        let raw = self.residue.to_bytes_be();
        let raw: &[u8] = if self.residue.is_zero() { &[] } else { &raw };
        let mut out = vec![0u8; width.saturating_sub(raw.len())];
        out.extend_from_slice(raw);
        out
    }

    pub fn from_bytes(bytes: &[u8], scale_exp: u32) -> Self {
        Self { residue: BigUint::from_bytes_be(bytes), scale_exp }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::ToBigInt;

    fn small() -> FpCodec {
        FpCodec::from_parts(BigUint::from(4u32), BigUint::from(97u32), 1, 10.0).unwrap()
    }

    #[test]
    fn encode_small_examples() {
        let c = small();
        assert_eq!(c.encode(0.0).unwrap().residue, BigUint::zero());
        assert_eq!(c.encode(1.25).unwrap().residue, BigUint::from(5u32));
        assert_eq!(c.encode(-1.25).unwrap().residue, BigUint::from(92u32));
        assert_eq!(c.encode(1.25).unwrap().scale_exp, 1);
        assert!(matches!(c.encode(10.5), Err(FpError::OutOfRange { .. })));
        assert_eq!(c.encode(f64::NAN), Err(FpError::NotFinite));
    }

    #[test]
    fn rounding_ties_away_from_zero() {
        let c = small();
        // 0.125·4 = 0.5 -> 1 and -0.5 -> -1
        assert_eq!(c.encode(0.125).unwrap().residue, BigUint::from(1u32));
        assert_eq!(c.encode(-0.125).unwrap().residue, BigUint::from(96u32));
        assert_eq!(c.encode(0.1).unwrap().residue, BigUint::zero());
    }

    #[test]
    fn decode_small_examples() {
        let c = small();
        let v = FpValue { residue: BigUint::from(93u32), scale_exp: 1 };
        assert_eq!(c.decode(&v), -1.0);
        let v = FpValue { residue: BigUint::from(48u32), scale_exp: 1 };
        assert_eq!(c.decode(&v), 12.0);
        let v = FpValue { residue: BigUint::from(49u32), scale_exp: 1 };
        assert_eq!(c.decode(&v), -12.0);
    }

    #[test]
    fn paper_preset_roundtrip() {
        let c = FpCodec::paper();
        assert_eq!(c.modulus_log2(), Some(393));
        assert_eq!(c.scale(), &(BigUint::one() << 23usize));
        let x = 1.25;
        let err = (c.decode(&c.encode(x).unwrap()) - x).abs();
        assert!(err <= 2f64.powi(-24));
        let y = 0.1;
        assert!((c.decode(&c.encode(y).unwrap()) - y).abs() <= 2f64.powi(-24));
    }

    #[test]
    fn paper_budget() {
        let c = FpCodec::paper();
        assert_eq!(c.budget_check(16), Ok(()));
        assert_eq!(c.budget_check(17), Err(BudgetViolation::TooDeep { depth: 17, levels: 16 }));
        // Analytic reduction: 200 <= 2^25.
        assert!(BigUint::from(200u32) <= BigUint::one() << 25usize);
    }

    #[test]
    fn budget_overflow_is_detected() {
        // q = 97, S = 4: 2·10·4 = 80 fits, 2·10·16 does not.
        let c = FpCodec::from_parts(BigUint::from(4u32), BigUint::from(97u32), 2, 10.0);
        assert!(matches!(c, Err(FpError::InvalidParams(_))));
        assert_eq!(small().budget_check(1), Ok(()));
    }

    #[test]
    fn sixteen_products_against_rational_oracle() {
        let c = FpCodec::pow2(12, 11, 25, 17, 100.0).unwrap();
        let factors = [1.5, -0.75, 1.1, 0.9, -1.3, 1.05, 0.6, 1.7, -1.2, 0.8, 1.25, -0.95, 1.4, 0.7, 1.15, -1.1];
        let mut v = c.encode(2.5).unwrap();
        // Oracle: the exact integer product of the same rounded encodings.
        let mut exact = c.centered(&v.residue);
        for &f in &factors {
            let k = c.encode(f).unwrap();
            exact *= c.centered(&k.residue);
            v = c.mul_const(&k, &v).unwrap();
        }
        assert_eq!(v.scale_exp, 17);
        assert_eq!(c.centered(&v.residue), exact);
        let real: f64 = factors.iter().product::<f64>() * 2.5;
        // Each rounded factor is off by at most 2^-24 relative to a value near 1.
        let tol = real.abs() * 17.0 * 2f64.powi(-23) + 1e-12;
        assert!((c.decode(&v) - real).abs() <= tol);
    }

    #[test]
    fn add_requires_equal_scale() {
        let c = small();
        let x = c.encode(1.0).unwrap();
        let y = c.encode_at(1.0, 0).unwrap();
        assert_eq!(c.add(&x, &y), Err(FpError::ScaleMismatch(1, 0)));
        assert_eq!(c.decode(&c.add(&x, &x).unwrap()), 2.0);
        assert_eq!(c.decode(&c.neg(&x)), -1.0);
    }

    #[test]
    fn bytes_roundtrip() {
        let c = FpCodec::paper();
        let v = c.encode(-3.5).unwrap();
        let bytes = v.to_bytes(c.residue_width());
        assert_eq!(bytes.len(), 50);
        assert_eq!(FpValue::from_bytes(&bytes, 1), v);
        let zero = c.encode(0.0).unwrap().to_bytes(4);
        assert_eq!(zero, vec![0, 0, 0, 0]);
    }

    #[test]
    fn dyadic_is_exact() {
        for x in [1.0, -0.1, 12345.678, -7.5e-5, 1e300] {
            let (m, e) = dyadic(x);
            let back = if e >= 0 {
                (m << e as usize).to_f64().unwrap()
            } else {
                ratio_to_f64(&m, &(BigUint::one() << (-e) as usize))
            };
            assert_eq!(back, x);
        }
        assert_eq!(round_scaled(2.5, &BigUint::one()), 3.to_bigint().unwrap());
        assert_eq!(round_scaled(-2.5, &BigUint::one()), (-3).to_bigint().unwrap());
    }
}
