//! Shared fixture generators for the integration suites. Independent of the
//! library's own initialization code.
// Not every suite uses every helper.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use debt_hmm::{DebtCase, ModelParams, StateSpaces};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dirichlet(1) row via normalized exponentials.
pub fn random_row(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| -(rng.gen::<f64>().max(1e-12)).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

pub fn random_params(spaces: &StateSpaces, alpha: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let ns = spaces.n_scheme;
    let nb = spaces.n_behaviour;
    let params = ModelParams {
        alpha,
        q_s: (0..spaces.n_qs_banks())
            .map(|_| (0..ns).map(|_| random_row(ns, rng)).collect())
            .collect(),
        pi_s: (0..spaces.n_pis_banks())
            .map(|_| random_row(ns, rng))
            .collect(),
        q_b: (0..spaces.n_qb_banks())
            .map(|_| (0..nb).map(|_| random_row(nb, rng)).collect())
            .collect(),
        pi_b: (0..ns).map(|_| random_row(nb, rng)).collect(),
    };
    params.validate(spaces).expect("generated params valid");
    params
}

/// A case with uniformly random categories and debt ratios in (0.05, 1.5).
pub fn random_case(spaces: &StateSpaces, id: &str, len: usize, rng: &mut ChaCha8Rng) -> DebtCase {
    let case = DebtCase {
        case_id: id.to_string(),
        u: rng.gen_range(-24..24),
        l: 0,
        behaviour: (0..len).map(|_| rng.gen_range(0..spaces.n_behaviour)).collect(),
        treatment: (0..len).map(|_| rng.gen_range(0..spaces.n_treatment)).collect(),
        econ: (0..len).map(|_| rng.gen_range(0..spaces.n_econ)).collect(),
        debt_ratio: (0..len).map(|_| rng.gen_range(0.05..1.5)).collect(),
        result: rng.gen_range(0..spaces.n_result),
    };
    DebtCase {
        l: case.u + len as i64 - 1,
        ..case
    }
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}
