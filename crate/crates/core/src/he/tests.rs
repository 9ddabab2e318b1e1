use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::fixed_point::FpValue;

fn scheme() -> HeScheme {
    HeScheme::from_preset(FpCodec::paper(), SchemePreset::Test).unwrap()
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[test]
fn keygen_is_deterministic() {
    let s = scheme();
    assert_eq!(keygen(&s, 3, 11), keygen(&s, 3, 11));
    assert_ne!(keygen(&s, 3, 11).sk, keygen(&s, 3, 12).sk);
    assert_ne!(keygen(&s, 3, 11).sk, keygen(&s, 4, 11).sk);
}

#[test]
fn encrypt_decrypt_roundtrip() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(2);
    let zero = s.encrypt_real(&k.pk, 0.0, &mut r).unwrap();
    assert_eq!(s.decrypt_real(&k.sk, &zero).unwrap(), 0.0);
    let ct = s.encrypt_real(&k.pk, 42.5, &mut r).unwrap();
    assert!((s.decrypt_real(&k.sk, &ct).unwrap() - 42.5).abs() <= 2f64.powi(-24));
    let x = -std::f64::consts::PI;
    let ct = s.encrypt_real(&k.pk, x, &mut r).unwrap();
    assert!((s.decrypt_real(&k.sk, &ct).unwrap() - x).abs() <= 2f64.powi(-24));
}

#[test]
fn encryptions_are_randomized() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(3);
    let m = s.codec().encode(5.0).unwrap();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..20 {
        assert!(seen.insert(s.to_bytes(&s.encrypt(&k.pk, &m, &mut r).unwrap())));
    }
}

#[test]
fn wrong_key_fails_margin_check() {
    let s = scheme();
    let a = keygen(&s, 1, 10);
    let b = keygen(&s, 2, 20);
    let mut r = rng(4);
    for _ in 0..100 {
        let x: f64 = r.gen_range(-100.0..100.0);
        let ct = s.encrypt_real(&a.pk, x, &mut r).unwrap();
        assert!(matches!(s.decrypt_ignoring_instance(&b.sk, &ct), Err(HeError::NoiseExceeded { .. })));
    }
    let ct = s.encrypt_real(&a.pk, 1.0, &mut r).unwrap();
    assert_eq!(s.decrypt(&b.sk, &ct), Err(HeError::InstanceMismatch { expected: 2, got: 1 }));
}

#[test]
fn addition_examples() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(5);
    let x = s.encrypt_real(&k.pk, 1.5, &mut r).unwrap();
    let y = s.encrypt_real(&k.pk, 2.25, &mut r).unwrap();
    assert_eq!(s.decrypt_real(&k.sk, &s.add(&x, &y).unwrap()).unwrap(), 3.75);
    assert_eq!(s.decrypt_real(&k.sk, &s.sub(&x, &y).unwrap()).unwrap(), -0.75);
    assert_eq!(s.decrypt_real(&k.sk, &s.neg(&x)).unwrap(), -1.5);
    let z = s.encrypt_real(&k.pk, 0.0, &mut r).unwrap();
    assert_eq!(s.decrypt(&k.sk, &s.add(&x, &z).unwrap()).unwrap(), s.decrypt(&k.sk, &x).unwrap());

    let other = keygen(&s, 2, 1);
    let w = s.encrypt_real(&other.pk, 1.0, &mut r).unwrap();
    assert!(matches!(s.add(&x, &w), Err(HeError::InstanceMismatch { .. })));
    let lifted = s.scalar_mul(&s.codec().encode(1.0).unwrap(), &y).unwrap();
    assert_eq!(s.add(&x, &lifted), Err(HeError::ScaleMismatch(1, 2)));
}

#[test]
fn residue_additivity_random() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(6);
    let c = s.codec();
    for _ in 0..1000 {
        let x = c.encode(r.gen_range(-50.0..50.0)).unwrap();
        let y = c.encode(r.gen_range(-50.0..50.0)).unwrap();
        let cx = s.encrypt(&k.pk, &x, &mut r).unwrap();
        let cy = s.encrypt(&k.pk, &y, &mut r).unwrap();
        let sum = s.decrypt(&k.sk, &s.add(&cx, &cy).unwrap()).unwrap();
        assert_eq!(sum, c.add(&x, &y).unwrap());
        let (_, measured) = s.decrypt_detail(&k.sk, &cx);
        assert!(measured <= cx.noise_bound());
    }
}

#[test]
fn scalar_multiplication() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(7);
    let c = s.codec();
    let x = s.encrypt_real(&k.pk, 2.75, &mut r).unwrap();
    let one = s.scalar_mul(&c.encode(1.0).unwrap(), &x).unwrap();
    assert_eq!(one.scale_exp(), 2);
    assert_eq!(s.decrypt_real(&k.sk, &one).unwrap(), 2.75);
    let neg = s.scalar_mul(&c.encode(-1.0).unwrap(), &x).unwrap();
    assert_eq!(s.decrypt_real(&k.sk, &neg).unwrap(), -2.75);

    // Residue-level homomorphism against the codec.
    for _ in 0..50 {
        let kv = c.encode(r.gen_range(-100.0..100.0)).unwrap();
        let mv = c.encode(r.gen_range(-100.0..100.0)).unwrap();
        let ct = s.encrypt(&k.pk, &mv, &mut r).unwrap();
        let got = s.decrypt(&k.sk, &s.scalar_mul(&kv, &ct).unwrap()).unwrap();
        assert_eq!(got, c.mul_const(&kv, &mv).unwrap());
    }
}

#[test]
fn matrix_vector_product() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(8);
    let c = s.codec();
    let a = [[0.5, -1.25, 2.0], [3.0, 0.1, -0.7]];
    let x = [1.5, -2.0, 0.25];
    let cts: Vec<_> = x.iter().map(|&v| s.encrypt_real(&k.pk, v, &mut r).unwrap()).collect();
    for row in &a {
        let ks: Vec<_> = row.iter().map(|&v| s.prepare(&c.encode(v).unwrap())).collect();
        let terms: Vec<_> = ks.iter().zip(&cts).collect();
        let y = s.decrypt_real(&k.sk, &s.linear_combination(&terms).unwrap()).unwrap();
        let want: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((y - want).abs() <= 2f64.powi(-20));
    }
}

#[test]
fn fused_combination_equals_folded() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(9);
    let c = s.codec();
    let vals: Vec<FpValue> = (0..6).map(|_| c.encode(r.gen_range(-100.0..100.0)).unwrap()).collect();
    let cts: Vec<_> = vals.iter().map(|v| s.encrypt(&k.pk, v, &mut r).unwrap()).collect();
    // Include a constant too wide for the small fast path.
    let mut consts: Vec<FpValue> = (0..5).map(|_| c.encode(r.gen_range(-100.0..100.0)).unwrap()).collect();
    consts.push(c.encode_at(-97.3, 3).unwrap());
    let consts: Vec<FpValue> =
        consts.into_iter().map(|v| FpValue { scale_exp: 1, ..v }).collect();
    let prepared: Vec<_> = consts.iter().map(|k| s.prepare(k)).collect();
    assert!(s.constant_value(&prepared[5]) > BigInt::from(i64::MAX) || s.constant_value(&prepared[5]) < BigInt::from(i64::MIN));
    let terms: Vec<_> = prepared.iter().zip(&cts).collect();
    let fused = s.linear_combination(&terms).unwrap();
    let mut folded = s.scalar_mul(&consts[0], &cts[0]).unwrap();
    for (kv, ct) in consts.iter().zip(&cts).skip(1) {
        folded = s.add(&folded, &s.scalar_mul(kv, ct).unwrap()).unwrap();
    }
    assert_eq!(fused.data, folded.data);
    assert_eq!(fused.scale_exp(), folded.scale_exp());
    assert!(s.linear_combination(&[]).is_err());
}

#[test]
fn level_budget_is_enforced() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(10);
    let one = s.codec().encode(1.0).unwrap();
    let mut ct = s.encrypt_real(&k.pk, 1.0, &mut r).unwrap();
    for _ in 1..16 {
        ct = s.scalar_mul(&one, &ct).unwrap();
    }
    assert_eq!(ct.scale_exp(), 16);
    assert_eq!(s.decrypt_real(&k.sk, &ct).unwrap(), 1.0);
    assert_eq!(s.scalar_mul(&one, &ct), Err(HeError::LevelExceeded { got: 17, levels: 16 }));
}

#[test]
fn deep_circuit_stays_within_margin() {
    // Fourteen multiplications by constants of magnitude up to 2 with 1022
    // additions spread across the levels, then a key switch.
    let s = scheme();
    let k0 = keygen(&s, 0, 1);
    let k1 = keygen(&s, 1, 1);
    let mut reg = KeyRegistry::new();
    let mut r = rng(11);
    let key = s.gen_switch_key(&k0.sk, &k1.pk, &mut reg, &mut r).unwrap();
    let c = s.codec();
    let mut ct = s.encrypt_real(&k0.pk, 100.0, &mut r).unwrap();
    let mut plain = c.encode(100.0).unwrap();
    for level in 0..14 {
        let kv = c.encode(if level % 2 == 0 { 2.0 } else { -1.5 }).unwrap();
        ct = s.scalar_mul(&kv, &ct).unwrap();
        plain = c.mul_const(&kv, &plain).unwrap();
        let pad = FpValue { residue: num_bigint::BigUint::from(0u8), scale_exp: ct.scale_exp() };
        let zero = s.encrypt(&k0.pk, &pad, &mut r).unwrap();
        for _ in 0..73 {
            ct = s.add(&ct, &zero).unwrap();
        }
    }
    assert!(ct.noise_bound() < s.noise_margin());
    assert_eq!(s.decrypt(&k0.sk, &ct).unwrap(), plain);
    let switched = s.key_switch(&ct, &key).unwrap();
    assert_eq!(switched.scale_exp(), 16);
    assert!(switched.noise_bound() < s.noise_margin());
    let want = c.mul_const(&c.encode(1.0).unwrap(), &plain).unwrap();
    assert_eq!(s.decrypt(&k1.sk, &switched).unwrap(), want);
}

#[test]
fn key_switch_roundtrip() {
    let s = scheme();
    let k0 = keygen(&s, 0, 5);
    let k1 = keygen(&s, 1, 6);
    let mut reg = KeyRegistry::new();
    let mut r = rng(12);
    let key = s.gen_switch_key(&k0.sk, &k1.pk, &mut reg, &mut r).unwrap();
    let c = s.codec();
    for _ in 0..100 {
        let m = c.encode(r.gen_range(-100.0..100.0)).unwrap();
        let ct = s.encrypt(&k0.pk, &m, &mut r).unwrap();
        let sw = s.key_switch(&ct, &key).unwrap();
        assert_eq!(sw.instance_id(), 1);
        let got = s.decrypt(&k1.sk, &sw).unwrap();
        assert_eq!(got, c.mul_const(&c.encode(1.0).unwrap(), &m).unwrap());
    }
    let zero = s.encrypt_real(&k0.pk, 0.0, &mut r).unwrap();
    assert_eq!(s.decrypt_real(&k1.sk, &s.key_switch(&zero, &key).unwrap()).unwrap(), 0.0);
    let stale = s.encrypt_real(&k1.pk, 1.0, &mut r).unwrap();
    assert!(matches!(s.key_switch(&stale, &key), Err(HeError::WrongSwitchKey { .. })));
}

#[test]
fn key_switch_across_gadget_bases() {
    for g in [8, 16, 32, 64] {
        let mut params = SchemePreset::Test.params();
        params.gadget_log2 = g;
        let s = HeScheme::new(FpCodec::paper(), params).unwrap();
        let k0 = keygen(&s, 0, 1);
        let k2 = keygen(&s, 2, 1);
        let mut r = rng(13 + g as u64);
        let key = s.gen_switch_key(&k0.sk, &k2.pk, &mut KeyRegistry::new(), &mut r).unwrap();
        for _ in 0..10 {
            let x: f64 = r.gen_range(-100.0..100.0);
            let ct = s.encrypt_real(&k0.pk, x, &mut r).unwrap();
            let got = s.decrypt_real(&k2.sk, &s.key_switch(&ct, &key).unwrap()).unwrap();
            assert!((got - x).abs() <= 2f64.powi(-24), "base 2^{g}");
        }
    }
}

#[test]
fn registry_rejects_cycles() {
    let mut reg = KeyRegistry::new();
    for i in 1..=9 {
        reg.register(0, i).unwrap();
    }
    assert!(matches!(reg.register(3, 0), Err(HeError::KeyCycle { .. })));
    assert_eq!(reg.register(4, 4), Err(HeError::SelfKey(4)));
    assert!(detect_key_cycles(&reg).is_empty());

    let mut chain = KeyRegistry::new();
    chain.register(0, 1).unwrap();
    chain.register(1, 2).unwrap();
    assert_eq!(
        chain.register(2, 0),
        Err(HeError::KeyCycle { from: 2, to: 0, cycle: vec![0, 1, 2] })
    );
    assert!(detect_key_cycles(&KeyRegistry::new()).is_empty());
}

/// Brute force: a set of distinct nodes is a cycle if some rotation-fixed
/// ordering of it follows edges.
fn brute_force_cycles(edges: &[(u32, u32)], nodes: u32) -> std::collections::BTreeSet<Vec<u32>> {
    fn perms(rest: &mut Vec<u32>, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        out.push(cur.clone());
        for i in 0..rest.len() {
            let v = rest.remove(i);
            cur.push(v);
            perms(rest, cur, out);
            cur.pop();
            rest.insert(i, v);
        }
    }
    let has = |a: u32, b: u32| edges.contains(&(a, b));
    let mut out = std::collections::BTreeSet::new();
    for start in 0..nodes {
        let mut rest: Vec<u32> = (start + 1..nodes).collect();
        let mut all = Vec::new();
        perms(&mut rest, &mut vec![start], &mut all);
        for p in all {
            let closes = has(*p.last().unwrap(), start);
            if closes && p.windows(2).all(|w| has(w[0], w[1])) && (p.len() > 1 || has(start, start)) {
                out.insert(p);
            }
        }
    }
    out
}

#[test]
fn cycle_detection_matches_brute_force() {
    let mut r = rng(14);
    for _ in 0..200 {
        let nodes = 5;
        let mut reg = KeyRegistry::new();
        let mut edges = Vec::new();
        for a in 0..nodes {
            for b in 0..nodes {
                if a != b && r.gen_bool(0.3) {
                    reg.insert_unchecked(a, b);
                    edges.push((a, b));
                }
            }
        }
        let got: std::collections::BTreeSet<_> = detect_key_cycles(&reg).into_iter().collect();
        assert_eq!(got, brute_force_cycles(&edges, nodes));
    }
}

#[test]
fn wire_roundtrip_and_rejection() {
    let s = scheme();
    let k = keygen(&s, 7, 1);
    let mut r = rng(15);
    let ct = s.encrypt_real(&k.pk, -12.5, &mut r).unwrap();
    let bytes = s.to_bytes(&ct);
    assert_eq!(&bytes[..2], b"LW");
    assert_eq!(bytes.len(), 24 + 17 * 112);
    assert_eq!(s.from_bytes(&bytes).unwrap(), ct);
    assert!(s.from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(s.from_bytes(&bad).is_err());
    // Q = 2^896 fills whole bytes, so any residue byte pattern is in range.
    let mut high = bytes.clone();
    high[24] = 0xff;
    assert!(s.from_bytes(&high).is_ok());
    let mut bad = bytes;
    bad[21] = 17;
    assert!(s.from_bytes(&bad).is_err());
}

#[test]
fn mask_detection() {
    let s = scheme();
    let k = keygen(&s, 1, 1);
    let mut r = rng(16);
    let mut ct = s.encrypt_real(&k.pk, 1.0, &mut r).unwrap();
    assert!(!ct.mask_is_zero(&s));
    let w = s.zq().limbs();
    ct.data[..s.n() * w].fill(0);
    assert!(ct.mask_is_zero(&s));
}

#[test]
fn non_power_of_two_modulus_is_rejected() {
    let codec = FpCodec::from_parts(4u32.into(), 97u32.into(), 1, 10.0).unwrap();
    assert!(matches!(HeScheme::from_preset(codec, SchemePreset::Test), Err(HeError::Params(_))));
}

#[test]
fn switch_key_wire_roundtrip() {
    let s = scheme();
    let k0 = keygen(&s, 0, 1);
    let k3 = keygen(&s, 3, 1);
    let mut r = rng(21);
    let key = s.gen_switch_key(&k0.sk, &k3.pk, &mut KeyRegistry::new(), &mut r).unwrap();
    let bytes = s.switch_key_to_bytes(&key);
    assert_eq!(&bytes[..2], b"KS");
    let back = s.switch_key_from_bytes(&bytes).unwrap();
    assert!(back == key);
    assert_eq!((back.from_id(), back.to_id()), (0, 3));
    assert!(s.switch_key_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes;
    bad[13] ^= 1;
    assert!(s.switch_key_from_bytes(&bad).is_err());
}
