//! Generative sampler for the full model. The RNG is ChaCha8 with one
//! counter stream per case, so cohorts are byte-identical across runs and
//! platforms for a fixed seed and cases can be drawn in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{threshold_indicator, DebtCase, ModelParams, StateSpaces};
use crate::error::{Error, Result};

/// Per-period covariate source: an i.i.d. categorical draw or a fixed
/// sequence cycled over the case window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariatePath {
    Iid(Vec<f64>),
    Fixed(Vec<usize>),
}

/// Debt-ratio path sampler: a multiplicative random walk.
///
/// The first ratio is uniform on `[initial_min, initial_max]`; each later
/// step multiplies by `exp(drift + jitter * U)` with `U` uniform on
/// `[-1, 1]`. A negative drift walks cases down across the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebtPathModel {
    pub initial_min: f64,
    pub initial_max: f64,
    pub log_drift: f64,
    pub log_jitter: f64,
}

impl Default for DebtPathModel {
    fn default() -> Self {
        DebtPathModel {
            initial_min: 0.2,
            initial_max: 1.2,
            log_drift: -0.08,
            log_jitter: 0.15,
        }
    }
}

/// Everything needed to draw a synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_cases: usize,
    /// Inclusive bounds on case length `l - u + 1`.
    pub min_length: usize,
    pub max_length: usize,
    pub treatment_policy: CovariatePath,
    pub econ_path: CovariatePath,
    /// Distribution over the prior-case result codes.
    pub result_dist: Vec<f64>,
    pub debt_path: DebtPathModel,
    pub seed: u64,
    /// Absolute month index every case starts at.
    #[serde(default)]
    pub start_period: i64,
}

impl CohortSpec {
    /// Simple spec with i.i.d. uniform covariates, for tests and demos.
    pub fn uniform(spaces: &StateSpaces, n_cases: usize, lengths: (usize, usize), seed: u64) -> Self {
        CohortSpec {
            n_cases,
            min_length: lengths.0,
            max_length: lengths.1,
            treatment_policy: CovariatePath::Iid(vec![
                1.0 / spaces.n_treatment as f64;
                spaces.n_treatment
            ]),
            econ_path: CovariatePath::Iid(vec![1.0 / spaces.n_econ as f64; spaces.n_econ]),
            result_dist: vec![1.0 / spaces.n_result as f64; spaces.n_result],
            debt_path: DebtPathModel::default(),
            seed,
            start_period: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.min_length < 1 || self.max_length < self.min_length {
            errs.push(format!(
                "length bounds must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_length, self.max_length
            ));
        }
        for (name, path) in [
            ("treatment_policy", &self.treatment_policy),
            ("econ_path", &self.econ_path),
        ] {
            match path {
                CovariatePath::Iid(probs) => check_dist(name, probs, &mut errs),
                CovariatePath::Fixed(seq) => {
                    if seq.is_empty() {
                        errs.push(format!("{name}: fixed sequence must be non-empty"));
                    }
                }
            }
        }
        check_dist("result_dist", &self.result_dist, &mut errs);
        let d = &self.debt_path;
        if !(d.initial_min > 0.0 && d.initial_max >= d.initial_min) {
            errs.push("debt_path: initial range must be positive and ordered".into());
        }
        if !d.log_jitter.is_finite() || d.log_jitter < 0.0 || !d.log_drift.is_finite() {
            errs.push("debt_path: drift must be finite, jitter finite and >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

fn check_dist(name: &str, probs: &[f64], errs: &mut Vec<String>) {
    if probs.is_empty() {
        errs.push(format!("{name}: empty distribution"));
        return;
    }
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        errs.push(format!("{name}: entry outside [0, 1]"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        errs.push(format!("{name}: sums to {sum}, not 1"));
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn covariate_at(path: &CovariatePath, offset: usize, rng: &mut ChaCha8Rng) -> usize {
    match path {
        CovariatePath::Iid(probs) => sample_categorical(probs, rng),
        CovariatePath::Fixed(seq) => seq[offset % seq.len()],
    }
}

/// Draws one case and its hidden scheme path from the given RNG stream.
pub fn sample_case(
    params: &ModelParams,
    spaces: &StateSpaces,
    spec: &CohortSpec,
    case_id: String,
    rng: &mut ChaCha8Rng,
) -> (DebtCase, Vec<usize>) {
    let len = rng.gen_range(spec.min_length..=spec.max_length);
    let result = sample_categorical(&spec.result_dist, rng);
    let treatment: Vec<usize> = (0..len)
        .map(|k| covariate_at(&spec.treatment_policy, k, rng))
        .collect();
    let econ: Vec<usize> = (0..len)
        .map(|k| covariate_at(&spec.econ_path, k, rng))
        .collect();
    let mut debt_ratio = Vec::with_capacity(len);
    let d = &spec.debt_path;
    let mut ratio = rng.gen_range(d.initial_min..=d.initial_max);
    debt_ratio.push(ratio);
    for _ in 1..len {
        let step: f64 = rng.gen_range(-1.0..=1.0);
        ratio *= (d.log_drift + d.log_jitter * step).exp();
        debt_ratio.push(ratio);
    }

    let mut schemes = Vec::with_capacity(len);
    let mut behaviour = Vec::with_capacity(len);
    let s0 = sample_categorical(
        &params.pi_s[spaces.key_xr(econ[0], result).index()],
        rng,
    );
    schemes.push(s0);
    behaviour.push(sample_categorical(&params.pi_b[s0], rng));
    for t in 1..len {
        let q_s = &params.q_s[spaces.key_txr(treatment[t - 1], econ[t], result).index()];
        let s = sample_categorical(&q_s[schemes[t - 1]], rng);
        schemes.push(s);
        let y = threshold_indicator(debt_ratio[t - 1], params.alpha);
        let q_b = &params.q_b[spaces.key_ys(y, s).index()];
        behaviour.push(sample_categorical(&q_b[behaviour[t - 1]], rng));
    }

    let case = DebtCase {
        case_id,
        u: spec.start_period,
        l: spec.start_period + len as i64 - 1,
        behaviour,
        treatment,
        econ,
        debt_ratio,
        result,
    };
    (case, schemes)
}

/// Draws a full cohort; case `i` uses RNG stream `i` of the spec's seed, so
/// output is independent of scheduling and identical across runs.
pub fn sample_cohort(
    params: &ModelParams,
    spaces: &StateSpaces,
    spec: &CohortSpec,
) -> Result<(Vec<DebtCase>, Vec<Vec<usize>>)> {
    spec.validate()?;
    params.validate(spaces)?;
    let mut cohort = Vec::with_capacity(spec.n_cases);
    let mut hidden = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let (case, schemes) = sample_case(params, spaces, spec, format!("case{i:05}"), &mut rng);
        cohort.push(case);
        hidden.push(schemes);
    }
    Ok((cohort, hidden))
}
