use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use privadmm_core::admm::{run_plain_admm, AdmmParams};
use privadmm_core::fixed_point::FpCodec;
use privadmm_core::formation::{scenario, ScenarioKind};
use privadmm_core::he::{keygen, HeScheme, KeyRegistry, SchemePreset};
use privadmm_core::linalg::Vector;
use privadmm_core::problem::centralized_solve;
use privadmm_core::protocol::{EncryptedSystem, ProtocolConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn he_ops(c: &mut Criterion) {
    for preset in [SchemePreset::Test, SchemePreset::Toy] {
        let s = HeScheme::from_preset(FpCodec::paper(), preset).unwrap();
        let k0 = keygen(&s, 0, 1);
        let k1 = keygen(&s, 1, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = s.gen_switch_key(&k0.sk, &k1.pk, &mut KeyRegistry::new(), &mut rng).unwrap();
        let ct = s.encrypt_real(&k0.pk, 1.5, &mut rng).unwrap();
        let k = s.codec().encode(-0.75).unwrap();
        let name = preset.name();
        c.bench_function(&format!("{name}/encrypt"), |b| b.iter(|| s.encrypt_real(&k0.pk, black_box(1.5), &mut rng).unwrap()));
        c.bench_function(&format!("{name}/scalar_mul"), |b| b.iter(|| s.scalar_mul(&k, black_box(&ct)).unwrap()));
        c.bench_function(&format!("{name}/add"), |b| b.iter(|| s.add(black_box(&ct), &ct).unwrap()));
        c.bench_function(&format!("{name}/key_switch"), |b| b.iter(|| s.key_switch(black_box(&ct), &key).unwrap()));
        c.bench_function(&format!("{name}/decrypt"), |b| b.iter(|| s.decrypt(&k0.sk, black_box(&ct)).unwrap()));
    }
}

fn ring_step(c: &mut Criterion) {
    let sc = scenario(ScenarioKind::Ring8, 0).unwrap();
    let f = &sc.formation;
    let states = sc.initial_states();
    let p = f.problem(0, &states, &vec![Vector::zeros(2); 8]).unwrap();
    let guesses = f.initial_guess(&states);
    let params = AdmmParams::new(sc.rho, sc.iterations).unwrap();
    c.bench_function("ring8/centralized_solve", |b| b.iter(|| centralized_solve(black_box(&p)).unwrap()));
    c.bench_function("ring8/plain_admm_step", |b| b.iter(|| run_plain_admm(black_box(&p), &params, &guesses).unwrap()));

    let betas: Vec<usize> = p.params.iter().map(|q| q.beta.len()).collect();
    let cfg = ProtocolConfig::new(sc.rho, sc.iterations, SchemePreset::Test, FpCodec::paper(), 0);
    let mut sys = EncryptedSystem::setup(&f.spec.graph, &f.layout, &f.costs, &betas, cfg).unwrap();
    let mut group = c.benchmark_group("ring8");
    group.sample_size(10);
    group.bench_function("encrypted_step_test_preset", |b| b.iter(|| sys.solve(&p.params, &guesses).unwrap()));
    group.finish();
}

criterion_group!(benches, he_ops, ring_step);
criterion_main!(benches);
