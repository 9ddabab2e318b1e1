//! Random consensus problems shared by the integration tests.
#![allow(dead_code)]

use privadmm_core::graph::{CommGraph, IndexLayout};
use privadmm_core::linalg::{Matrix, Vector};
use privadmm_core::problem::{centralized_solve, validate_problem, AgentCost, ConsensusProblem, StructuredParam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn uniform(rng: &mut ChaCha20Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..=scale))
}

/// One draw; may be rejected by the caller.
fn draw(rng: &mut ChaCha20Rng, max_agents: usize, max_v: usize) -> ConsensusProblem {
    let m = rng.gen_range(1..=max_agents);
    let mut edges: Vec<(usize, usize)> = (1..m).map(|i| (i, i + 1)).collect();
    for i in 1..=m {
        for j in i + 2..=m {
            if rng.gen_bool(0.4) {
                edges.push((i, j));
            }
        }
    }
    let graph = CommGraph::new(m, &edges).expect("valid edges");
    let alpha_lens: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=3.min(max_v))).collect();
    let mut start = vec![1];
    for a in &alpha_lens {
        start.push(start.last().unwrap() + a);
    }
    let global = start[m] - 1;
    let mut sets = Vec::with_capacity(m);
    for i in 1..=m {
        let mut set: Vec<usize> = (start[i - 1]..start[i]).collect();
        for j in graph.neighbors(i).unwrap() {
            for k in start[j - 1]..start[j] {
                if set.len() < max_v && rng.gen_bool(0.5) {
                    set.push(k);
                }
            }
        }
        sets.push(set);
    }
    let layout = IndexLayout::new(global, sets, alpha_lens).expect("valid layout");
    let mut costs = Vec::with_capacity(m);
    let mut params = Vec::with_capacity(m);
    for i in 1..=m {
        let v = layout.local_dim(i);
        let w = rng.gen_range(1..=3);
        let l = uniform(rng, v, v, 0.7);
        let h = &l * l.transpose() + Matrix::identity(v, v) * 0.5;
        // Constraints act on owned entries only, like the dynamics in the
        // formation problem; copies of neighbor entries stay free.
        let a = layout.alpha_len(i);
        let c = rng.gen_range(0..a);
        let mut g = Matrix::zeros(c, v);
        g.view_mut((0, 0), (c, a)).copy_from(&uniform(rng, c, a, 1.0));
        costs.push(AgentCost { h, f: uniform(rng, v, w, 1.0), g, e: uniform(rng, c, w, 1.0) });
        let beta_len = rng.gen_range(0..=w);
        let p = Vector::from_fn(w, |_, _| rng.gen_range(-2.0..=2.0));
        params.push(StructuredParam::new(p.rows(0, beta_len).into_owned(), p.rows(beta_len, w - beta_len).into_owned()));
    }
    ConsensusProblem { graph, layout, costs, params }
}

/// A valid problem with a centralized solution, with `M ≤ max_agents` and
/// every `v_i ≤ max_v`.
pub fn random_problem(seed: u64, max_agents: usize, max_v: usize) -> ConsensusProblem {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    loop {
        let p = draw(&mut rng, max_agents, max_v);
        if validate_problem(&p).is_ok() && centralized_solve(&p).is_ok() {
            return p;
        }
    }
}

pub fn zero_guesses(p: &ConsensusProblem) -> Vec<Vector> {
    (1..=p.layout.agent_count()).map(|i| Vector::zeros(p.layout.alpha_len(i))).collect()
}
