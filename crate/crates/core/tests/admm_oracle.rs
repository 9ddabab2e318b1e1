//! Plaintext distributed ADMM against the centralized KKT solution.

mod common;

use privadmm_core::admm::{run_plain_admm, AdmmParams};
use privadmm_core::problem::centralized_solve;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn admm_reaches_centralized_optimum(seed in any::<u64>()) {
        let p = common::random_problem(seed, 4, 6);
        let star = centralized_solve(&p).unwrap();
        let trace = run_plain_admm(&p, &AdmmParams::new(0.2, 500).unwrap(), &common::zero_guesses(&p)).unwrap();
        let gap = (trace.zeta.last().unwrap() - &star.zeta).amax();
        prop_assert!(gap <= 1e-6, "gap {gap:e}");
        // Every local iterate satisfies its own constraints.
        for (i, s) in trace.last().iter().enumerate() {
            let c = &p.costs[i];
            let r = (&c.g * &s.z - &c.e * p.params[i].stacked()).amax();
            prop_assert!(r <= 1e-8, "agent {} constraint residual {r:e}", i + 1);
        }
    }

    #[test]
    fn every_copy_agrees_with_the_average(seed in any::<u64>()) {
        let p = common::random_problem(seed, 4, 6);
        let trace = run_plain_admm(&p, &AdmmParams::new(0.2, 500).unwrap(), &common::zero_guesses(&p)).unwrap();
        let zeta = trace.zeta.last().unwrap();
        for (idx, s) in trace.last().iter().enumerate() {
            for (pos, &k) in p.layout.index_set(idx + 1).iter().enumerate() {
                prop_assert!((s.z[pos] - zeta[k - 1]).abs() <= 1e-6, "agent {} entry {k}", idx + 1);
            }
        }
    }
}
