//! Arithmetic modulo `2^bits` on little-endian `u64` limb slices.
//!
//! Every element occupies exactly [`Zq::limbs`] limbs with the bits above
//! `bits` kept at zero.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use rand::RngCore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Zq {
    bits: u32,
    limbs: usize,
    top_mask: u64,
}

impl Zq {
    pub fn new(bits: u32) -> Self {
        assert!(bits >= 1, "modulus must have at least one bit");
        let limbs = bits.div_ceil(64) as usize;
        let rem = bits % 64;
        let top_mask = if rem == 0 { u64::MAX } else { (1u64 << rem) - 1 };
        Self { bits, limbs, top_mask }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn limbs(&self) -> usize {
        self.limbs
    }

    pub fn zero(&self) -> Vec<u64> {
        vec![0; self.limbs]
    }

    #[inline]
    fn mask(&self, x: &mut [u64]) {
        x[self.limbs - 1] &= self.top_mask;
    }

    pub fn is_reduced(&self, x: &[u64]) -> bool {
        x.len() == self.limbs && x[self.limbs - 1] & !self.top_mask == 0
    }

    pub fn is_zero(&self, x: &[u64]) -> bool {
        x.iter().all(|&l| l == 0)
    }

    /// `acc += x`, where both slices may hold several consecutive elements.
    #[inline]
    pub fn add_assign(&self, acc: &mut [u64], x: &[u64]) {
        debug_assert_eq!(acc.len(), x.len());
        for (a, b) in acc.chunks_exact_mut(self.limbs).zip(x.chunks_exact(self.limbs)) {
            let mut carry = false;
            for (ai, &bi) in a.iter_mut().zip(b) {
                let (s1, c1) = ai.overflowing_add(bi);
                let (s2, c2) = s1.overflowing_add(carry as u64);
                *ai = s2;
                carry = c1 | c2;
            }
            self.mask(a);
        }
    }

    /// `acc -= x`, element-wise as in [`Zq::add_assign`].
    #[inline]
    pub fn sub_assign(&self, acc: &mut [u64], x: &[u64]) {
        debug_assert_eq!(acc.len(), x.len());
        for (a, b) in acc.chunks_exact_mut(self.limbs).zip(x.chunks_exact(self.limbs)) {
            let mut borrow = false;
            for (ai, &bi) in a.iter_mut().zip(b) {
                let (d1, b1) = ai.overflowing_sub(bi);
                let (d2, b2) = d1.overflowing_sub(borrow as u64);
                *ai = d2;
                borrow = b1 | b2;
            }
            self.mask(a);
        }
    }

    pub fn neg_assign(&self, x: &mut [u64]) {
        for a in x.chunks_exact_mut(self.limbs) {
            let mut carry = true;
            for ai in a.iter_mut() {
                let (s, c) = (!*ai).overflowing_add(carry as u64);
                *ai = s;
                carry = c;
            }
            self.mask(a);
        }
    }

    /// `acc += k·x` element-wise.
    #[inline]
    pub fn mul_add_u64(&self, acc: &mut [u64], x: &[u64], k: u64) {
        debug_assert_eq!(acc.len(), x.len());
        for (a, b) in acc.chunks_exact_mut(self.limbs).zip(x.chunks_exact(self.limbs)) {
            let mut carry: u128 = 0;
            for (ai, &bi) in a.iter_mut().zip(b) {
                let t = (*ai as u128) + (bi as u128) * (k as u128) + carry;
                *ai = t as u64;
                carry = t >> 64;
            }
            self.mask(a);
        }
    }

    /// `acc -= k·x` element-wise.
    #[inline]
    pub fn mul_sub_u64(&self, acc: &mut [u64], x: &[u64], k: u64) {
        debug_assert_eq!(acc.len(), x.len());
        for (a, b) in acc.chunks_exact_mut(self.limbs).zip(x.chunks_exact(self.limbs)) {
            let mut carry: u64 = 0;
            let mut borrow = false;
            for (ai, &bi) in a.iter_mut().zip(b) {
                let p = (bi as u128) * (k as u128) + carry as u128;
                carry = (p >> 64) as u64;
                let (d1, b1) = ai.overflowing_sub(p as u64);
                let (d2, b2) = d1.overflowing_sub(borrow as u64);
                *ai = d2;
                borrow = b1 | b2;
            }
            self.mask(a);
        }
    }

    /// `acc += k·x` for a signed small constant.
    #[inline]
    pub fn mul_add_i64(&self, acc: &mut [u64], x: &[u64], k: i64) {
        if k >= 0 {
            self.mul_add_u64(acc, x, k as u64);
        } else {
            self.mul_sub_u64(acc, x, k.unsigned_abs());
        }
    }

    /// `acc += k·x` for a full-width constant `k` (one element), applied to
    /// every element of `x`.
    pub fn mul_add_wide(&self, acc: &mut [u64], x: &[u64], k: &[u64]) {
        debug_assert_eq!(k.len(), self.limbs);
        let w = self.limbs;
        for (a, b) in acc.chunks_exact_mut(w).zip(x.chunks_exact(w)) {
            for i in 0..w {
                if b[i] == 0 {
                    continue;
                }
                let mut carry: u128 = 0;
                for j in 0..w - i {
                    let t = (a[i + j] as u128) + (b[i] as u128) * (k[j] as u128) + carry;
                    a[i + j] = t as u64;
                    carry = t >> 64;
                }
            }
            self.mask(a);
        }
    }

    /// `x·y mod 2^bits` for single elements.
    pub fn mul(&self, x: &[u64], y: &[u64]) -> Vec<u64> {
        let mut out = self.zero();
        self.mul_add_wide(&mut out, x, y);
        out
    }

    pub fn from_biguint(&self, v: &BigUint) -> Vec<u64> {
        let mut out = self.zero();
        for (o, d) in out.iter_mut().zip(v.iter_u64_digits()) {
            *o = d;
        }
        self.mask(&mut out);
        out
    }

    pub fn from_bigint(&self, v: &BigInt) -> Vec<u64> {
        let m = BigInt::from(BigUint::from(1u8) << self.bits as usize);
        let r = v.mod_floor(&m).to_biguint().expect("non-negative after mod_floor");
        self.from_biguint(&r)
    }

    pub fn to_biguint(&self, x: &[u64]) -> BigUint {
        BigUint::from_slice(
            &x.iter().flat_map(|&l| [l as u32, (l >> 32) as u32]).collect::<Vec<_>>(),
        )
    }

    /// Top bit set, i.e. the centered representative is negative.
    pub fn is_negative(&self, x: &[u64]) -> bool {
        let b = self.bits - 1;
        (x[(b / 64) as usize] >> (b % 64)) & 1 == 1
    }

    /// Representative in `[-2^(bits-1), 2^(bits-1))`.
    pub fn to_centered_bigint(&self, x: &[u64]) -> BigInt {
        let v = BigInt::from(self.to_biguint(x));
        if self.is_negative(x) {
            v - BigInt::from(BigUint::from(1u8) << self.bits as usize)
        } else {
            v
        }
    }

    /// Magnitude of the centered representative as a float.
    pub fn centered_abs_f64(&self, x: &[u64]) -> f64 {
        let mut v = x.to_vec();
        if self.is_negative(x) {
            self.neg_assign(&mut v);
        }
        v.iter().rev().fold(0.0, |acc, &l| acc * 18446744073709551616.0 + l as f64)
    }

    /// `width` bits of `x` starting at bit `start` (`width ≤ 64`).
    #[inline]
    pub fn digit(&self, x: &[u64], start: u32, width: u32) -> u64 {
        debug_assert!((1..=64).contains(&width));
        let limb = (start / 64) as usize;
        let off = start % 64;
        if limb >= self.limbs {
            return 0;
        }
        let mut v = x[limb] >> off;
        if off != 0 && limb + 1 < self.limbs {
            v |= x[limb + 1] << (64 - off);
        }
        if width == 64 {
            v
        } else {
            v & ((1u64 << width) - 1)
        }
    }

    /// `x · 2^shift mod 2^bits`.
    pub fn shl(&self, x: &[u64], shift: u32) -> Vec<u64> {
        let mut out = self.zero();
        let limb = (shift / 64) as usize;
        let off = shift % 64;
        for i in (limb..self.limbs).rev() {
            let src = i - limb;
            let mut v = x[src] << off;
            if off != 0 && src > 0 {
                v |= x[src - 1] >> (64 - off);
            }
            out[i] = v;
        }
        self.mask(&mut out);
        out
    }

    /// `floor(x / 2^shift)` on the unsigned representative.
    pub fn shr(&self, x: &[u64], shift: u32) -> Vec<u64> {
        let mut out = self.zero();
        let limb = (shift / 64) as usize;
        let off = shift % 64;
        for (i, o) in out.iter_mut().enumerate().take(self.limbs.saturating_sub(limb)) {
            let src = i + limb;
            let mut v = x[src] >> off;
            if off != 0 && src + 1 < self.limbs {
                v |= x[src + 1] << (64 - off);
            }
            *o = v;
        }
        out
    }

    pub fn random<R: RngCore + ?Sized>(&self, rng: &mut R, out: &mut [u64]) {
        for a in out.chunks_exact_mut(self.limbs) {
            for l in a.iter_mut() {
                *l = rng.next_u64();
            }
            self.mask(a);
        }
    }

    /// Sets a single element to a small signed integer.
    pub fn set_i64(&self, out: &mut [u64], v: i64) {
        out.fill(0);
        out[0] = v.unsigned_abs();
        if v < 0 {
            self.neg_assign(out);
        }
    }

    /// `Σ_t x_t · y_t` over `n` consecutive elements of each slice.
    pub fn inner_product(&self, x: &[u64], y: &[u64]) -> Vec<u64> {
        let mut acc = self.zero();
        for (a, b) in x.chunks_exact(self.limbs).zip(y.chunks_exact(self.limbs)) {
            self.mul_add_wide(&mut acc, a, b);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn big_mod(bits: u32) -> BigInt {
        BigInt::from(BigUint::from(1u8) << bits as usize)
    }

    fn elem(zq: &Zq, seed: &[u64]) -> Vec<u64> {
        let mut v = zq.zero();
        for (o, s) in v.iter_mut().zip(seed.iter().cycle()) {
            *o = *s;
        }
        zq.mask(&mut v);
        v
    }

    proptest! {
        #[test]
        fn matches_bigint_oracle(
            bits in 1u32..300,
            xs in prop::collection::vec(any::<u64>(), 5),
            ys in prop::collection::vec(any::<u64>(), 5),
            k in any::<i64>(),
            ku in any::<u64>(),
        ) {
            let zq = Zq::new(bits);
            let m = big_mod(bits);
            let x = elem(&zq, &xs);
            let y = elem(&zq, &ys);
            let bx = BigInt::from(zq.to_biguint(&x));
            let by = BigInt::from(zq.to_biguint(&y));
            let check = |v: &[u64], want: BigInt| {
                prop_assert!(zq.is_reduced(v));
                prop_assert_eq!(BigInt::from(zq.to_biguint(v)), want.mod_floor(&m));
                Ok(())
            };

            let mut s = x.clone(); zq.add_assign(&mut s, &y);
            check(&s, &bx + &by)?;
            let mut d = x.clone(); zq.sub_assign(&mut d, &y);
            check(&d, &bx - &by)?;
            let mut n = x.clone(); zq.neg_assign(&mut n);
            check(&n, -&bx)?;
            let mut a = x.clone(); zq.mul_add_i64(&mut a, &y, k);
            check(&a, &bx + &by * k)?;
            let mut a = x.clone(); zq.mul_add_u64(&mut a, &y, ku);
            check(&a, &bx + &by * ku)?;
            let mut a = x.clone(); zq.mul_sub_u64(&mut a, &y, ku);
            check(&a, &bx - &by * ku)?;
            check(&zq.mul(&x, &y), &bx * &by)?;
            check(&zq.from_bigint(&zq.to_centered_bigint(&x)), bx.clone())?;
            let c = zq.to_centered_bigint(&x);
            prop_assert!(c >= -(&m >> 1usize) && c < (&m >> 1usize));
        }

        #[test]
        fn shifts_and_digits(bits in 1u32..300, xs in prop::collection::vec(any::<u64>(), 5), shift in 0u32..320, width in 1u32..=64) {
            let zq = Zq::new(bits);
            let m = big_mod(bits);
            let x = elem(&zq, &xs);
            let bx = zq.to_biguint(&x);
            prop_assert_eq!(
                BigInt::from(zq.to_biguint(&zq.shl(&x, shift))),
                BigInt::from(&bx << shift as usize).mod_floor(&m)
            );
            prop_assert_eq!(zq.to_biguint(&zq.shr(&x, shift)), &bx >> shift as usize);
            let want = (&bx >> shift as usize) % (BigUint::from(1u8) << width as usize);
            prop_assert_eq!(BigUint::from(zq.digit(&x, shift, width)), want);
        }
    }

    #[test]
    fn centered_magnitude() {
        let zq = Zq::new(130);
        let mut x = zq.zero();
        zq.set_i64(&mut x, -12345);
        assert!(zq.is_negative(&x));
        assert_eq!(zq.centered_abs_f64(&x), 12345.0);
        assert_eq!(zq.to_centered_bigint(&x), BigInt::from(-12345));
    }

    #[test]
    fn inner_product_small() {
        let zq = Zq::new(70);
        let mut x = vec![0u64; 4];
        let mut y = vec![0u64; 4];
        zq.set_i64(&mut x[0..2], 3);
        zq.set_i64(&mut x[2..4], -2);
        zq.set_i64(&mut y[0..2], 5);
        zq.set_i64(&mut y[2..4], 7);
        assert_eq!(zq.to_centered_bigint(&zq.inner_product(&x, &y)), BigInt::from(1));
    }
}
