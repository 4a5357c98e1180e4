//! Data model: state spaces, debt cases, parameter banks, covariate keys.
//!
//! Categorical variables are dense 0-based integer codes throughout; label
//! maps living in the io layer carry the human-readable names.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cardinalities of the categorical variables.
///
/// `n_result` includes an explicit "NA" category; it is an ordinary code,
/// not a missing value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpaces {
    pub n_behaviour: usize,
    pub n_scheme: usize,
    pub n_treatment: usize,
    pub n_econ: usize,
    pub n_result: usize,
}

/// Flat index into a parameter bank, row-major over the covariate tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CovariateKey(pub usize);

impl CovariateKey {
    pub fn index(self) -> usize {
        self.0
    }
}

impl StateSpaces {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, n) in [
            ("n_behaviour", self.n_behaviour),
            ("n_scheme", self.n_scheme),
            ("n_treatment", self.n_treatment),
            ("n_econ", self.n_econ),
            ("n_result", self.n_result),
        ] {
            if n < 1 {
                errs.push(format!("{name} must be >= 1, got {n}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Number of scheme-transition matrices: one per (T, X, R) triple.
    pub fn n_qs_banks(&self) -> usize {
        self.n_treatment * self.n_econ * self.n_result
    }

    /// Number of scheme-initial distributions: one per (X, R) pair.
    pub fn n_pis_banks(&self) -> usize {
        self.n_econ * self.n_result
    }

    /// Number of behaviour-transition matrices: one per (Y, S) pair.
    pub fn n_qb_banks(&self) -> usize {
        2 * self.n_scheme
    }

    /// Key for the scheme-transition bank; T slowest, then X, then R.
    pub fn key_txr(&self, t: usize, x: usize, r: usize) -> CovariateKey {
        debug_assert!(t < self.n_treatment && x < self.n_econ && r < self.n_result);
        CovariateKey(t * self.n_econ * self.n_result + x * self.n_result + r)
    }

    pub fn unkey_txr(&self, key: CovariateKey) -> (usize, usize, usize) {
        let k = key.0;
        let t = k / (self.n_econ * self.n_result);
        let rem = k % (self.n_econ * self.n_result);
        (t, rem / self.n_result, rem % self.n_result)
    }

    /// Key for the scheme-initial bank; X slowest, then R.
    pub fn key_xr(&self, x: usize, r: usize) -> CovariateKey {
        debug_assert!(x < self.n_econ && r < self.n_result);
        CovariateKey(x * self.n_result + r)
    }

    pub fn unkey_xr(&self, key: CovariateKey) -> (usize, usize) {
        (key.0 / self.n_result, key.0 % self.n_result)
    }

    /// Key for the behaviour-transition bank; Y slowest, then S.
    pub fn key_ys(&self, y: usize, s: usize) -> CovariateKey {
        debug_assert!(y < 2 && s < self.n_scheme);
        CovariateKey(y * self.n_scheme + s)
    }

    pub fn unkey_ys(&self, key: CovariateKey) -> (usize, usize) {
        (key.0 / self.n_scheme, key.0 % self.n_scheme)
    }
}

/// One debt case: the observed series over its window plus case-level covariates.
///
/// `t` runs over absolute integer month indices `u..=l`; all four series have
/// length `l - u + 1`. The final treatment and debt-ratio entries are retained
/// even though the likelihood never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebtCase {
    pub case_id: String,
    /// First period of the window (absolute month index).
    pub u: i64,
    /// Last period of the window, inclusive.
    pub l: i64,
    /// Behaviour-state codes for t = u..=l.
    pub behaviour: Vec<usize>,
    /// Treatment codes for t = u..=l.
    pub treatment: Vec<usize>,
    /// Economic-state codes for t = u..=l.
    pub econ: Vec<usize>,
    /// Debt ratios for t = u..=l; positive reals.
    pub debt_ratio: Vec<f64>,
    /// Result code of the debtor's most recent previous case.
    pub result: usize,
}

impl DebtCase {
    /// Window length `l - u + 1`.
    pub fn len(&self) -> usize {
        (self.l - self.u + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.l < self.u
    }
}

/// Binary threshold indicator: `0` iff `d <= alpha`, `1` otherwise.
///
/// The boundary `d == alpha` maps to 0.
pub fn classify_debt_ratio(d: f64, alpha: f64) -> Result<usize> {
    let mut errs = Vec::new();
    if !d.is_finite() || d <= 0.0 {
        errs.push(format!("debt ratio must be positive and finite, got {d}"));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        errs.push(format!("alpha must be positive and finite, got {alpha}"));
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    Ok(threshold_indicator(d, alpha))
}

/// Unchecked form of [`classify_debt_ratio`] for validated inputs.
#[inline]
pub(crate) fn threshold_indicator(d: f64, alpha: f64) -> usize {
    usize::from(d > alpha)
}

/// Checks every [`DebtCase`] invariant, reporting all violations at once.
pub fn validate_case(case: &DebtCase, spaces: &StateSpaces) -> Result<()> {
    let mut errs = Vec::new();
    let id = &case.case_id;
    if case.l < case.u {
        errs.push(format!("case `{id}`: l = {} < u = {}", case.l, case.u));
        return Err(Error::Validation(errs));
    }
    let n = case.len();
    for (name, len) in [
        ("behaviour", case.behaviour.len()),
        ("treatment", case.treatment.len()),
        ("econ", case.econ.len()),
        ("debt_ratio", case.debt_ratio.len()),
    ] {
        if len != n {
            errs.push(format!(
                "case `{id}`: length mismatch: {name} has {len} entries, window has {n}"
            ));
        }
    }
    for (name, seq, bound) in [
        ("behaviour", &case.behaviour, spaces.n_behaviour),
        ("treatment", &case.treatment, spaces.n_treatment),
        ("econ", &case.econ, spaces.n_econ),
    ] {
        for (i, &v) in seq.iter().enumerate() {
            if v >= bound {
                errs.push(format!(
                    "case `{id}`: {name}[{i}] = {v} out of range (limit {bound})"
                ));
            }
        }
    }
    if case.result >= spaces.n_result {
        errs.push(format!(
            "case `{id}`: result = {} out of range (limit {})",
            case.result, spaces.n_result
        ));
    }
    for (i, &d) in case.debt_ratio.iter().enumerate() {
        if !d.is_finite() || d <= 0.0 {
            errs.push(format!("case `{id}`: non-positive debt ratio at [{i}]: {d}"));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// The full parameter set: threshold plus the four covariate-indexed banks.
///
/// Fields are public so tests can build deliberately invalid instances;
/// [`ModelParams::validate`] is the gate everything else relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha: f64,
    /// Scheme-transition matrices, `[key_txr][p][q]`.
    pub q_s: Vec<Vec<Vec<f64>>>,
    /// Scheme-initial distributions, `[key_xr][s]`.
    pub pi_s: Vec<Vec<f64>>,
    /// Behaviour-transition matrices, `[key_ys][b][c]`.
    pub q_b: Vec<Vec<Vec<f64>>>,
    /// Behaviour-initial distributions, `[s][b]`.
    pub pi_b: Vec<Vec<f64>>,
}

pub const ROW_SUM_TOL: f64 = 1e-12;

fn check_distribution(probs: &[f64], n: usize, what: &str, errs: &mut Vec<String>) {
    if probs.len() != n {
        errs.push(format!("{what}: expected {n} entries, got {}", probs.len()));
        return;
    }
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        errs.push(format!("{what}: entry outside [0, 1]"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        errs.push(format!("{what}: sums to {sum}, not 1"));
    }
}

impl ModelParams {
    pub fn validate(&self, spaces: &StateSpaces) -> Result<()> {
        let mut errs = Vec::new();
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            errs.push(format!("alpha must be positive, got {}", self.alpha));
        }
        let banks: [(&str, usize, usize); 2] = [
            ("Q_S", self.q_s.len(), spaces.n_qs_banks()),
            ("Q_B", self.q_b.len(), spaces.n_qb_banks()),
        ];
        for (name, got, want) in banks {
            if got != want {
                errs.push(format!("{name}: expected {want} matrices, got {got}"));
            }
        }
        if self.pi_s.len() != spaces.n_pis_banks() {
            errs.push(format!(
                "pi_S: expected {} distributions, got {}",
                spaces.n_pis_banks(),
                self.pi_s.len()
            ));
        }
        if self.pi_b.len() != spaces.n_scheme {
            errs.push(format!(
                "pi_B: expected {} distributions, got {}",
                spaces.n_scheme,
                self.pi_b.len()
            ));
        }
        for (k, m) in self.q_s.iter().enumerate() {
            if m.len() != spaces.n_scheme {
                errs.push(format!("Q_S[{k}]: expected {} rows, got {}", spaces.n_scheme, m.len()));
                continue;
            }
            for (p, row) in m.iter().enumerate() {
                check_distribution(row, spaces.n_scheme, &format!("Q_S[{k}] row {p}"), &mut errs);
            }
        }
        for (k, m) in self.q_b.iter().enumerate() {
            if m.len() != spaces.n_behaviour {
                errs.push(format!("Q_B[{k}]: expected {} rows, got {}", spaces.n_behaviour, m.len()));
                continue;
            }
            for (b, row) in m.iter().enumerate() {
                check_distribution(row, spaces.n_behaviour, &format!("Q_B[{k}] row {b}"), &mut errs);
            }
        }
        for (k, d) in self.pi_s.iter().enumerate() {
            check_distribution(d, spaces.n_scheme, &format!("pi_S[{k}]"), &mut errs);
        }
        for (s, d) in self.pi_b.iter().enumerate() {
            check_distribution(d, spaces.n_behaviour, &format!("pi_B[{s}]"), &mut errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Uniform parameters over the given spaces, with the given threshold.
    pub fn uniform(spaces: &StateSpaces, alpha: f64) -> Self {
        let s = spaces.n_scheme;
        let b = spaces.n_behaviour;
        let srow = vec![1.0 / s as f64; s];
        let brow = vec![1.0 / b as f64; b];
        ModelParams {
            alpha,
            q_s: vec![vec![srow.clone(); s]; spaces.n_qs_banks()],
            pi_s: vec![srow; spaces.n_pis_banks()],
            q_b: vec![vec![brow.clone(); b]; spaces.n_qb_banks()],
            pi_b: vec![brow; s],
        }
    }
}
