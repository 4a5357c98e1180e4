//! Per-case exact E-step: filtered distributions, forward matrices, backward
//! smoothing, responsibilities, and the case log-likelihood. A brute-force
//! path-enumeration oracle mirrors the whole computation for verification.
//!
//! All recursions renormalize at every step; the log-normalizers accumulate
//! into the observed-data log-likelihood. No log-space pass is needed at
//! monthly sequence lengths.

use crate::domain::{threshold_indicator, DebtCase, ModelParams, StateSpaces};
use crate::error::{Error, Result};

/// Everything the E-step produces for one case.
///
/// Sequences are indexed by offset from `u`: `gamma[k]` is the smoothed
/// scheme distribution at `t = u + k`; `pairwise[k]` is the joint over
/// `(S_{t-1}, S_t)` at `t = u + k + 1`, and likewise for `forwards`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    /// Smoothed per-period scheme distributions, length `l - u + 1`.
    pub gamma: Vec<Vec<f64>>,
    /// Smoothed pairwise joints, length `l - u`.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    /// Filtered per-period scheme distributions, length `l - u + 1`.
    pub filtered: Vec<Vec<f64>>,
    /// Forward matrices, length `l - u`.
    pub forwards: Vec<Vec<Vec<f64>>>,
    /// Observed-data log-likelihood of the case.
    pub log_likelihood: f64,
}

/// Filtered scheme distribution at the first period, with its normalizer.
///
/// Unnormalized entry s is `pi_B^s(B_u) * pi_S^{X_u,R}(s)`; the normalizer is
/// the sum over s and contributes `ln` of itself to the log-likelihood.
pub fn initial_filter(
    case: &DebtCase,
    params: &ModelParams,
    spaces: &StateSpaces,
) -> Result<(Vec<f64>, f64)> {
    let pi_s = &params.pi_s[spaces.key_xr(case.econ[0], case.result).index()];
    let b0 = case.behaviour[0];
    let mut dist: Vec<f64> = (0..spaces.n_scheme)
        .map(|s| params.pi_b[s][b0] * pi_s[s])
        .collect();
    let norm: f64 = dist.iter().sum();
    if norm <= 0.0 {
        return Err(Error::DegenerateLikelihood {
            case_id: case.case_id.clone(),
            t: case.u,
        });
    }
    dist.iter_mut().for_each(|v| *v /= norm);
    Ok((dist, norm))
}

/// One forward update: the normalized joint over `(S_{t-1}, S_t)` and its
/// normalizer `c_t`.
///
/// `step` is the offset of t from u, `1 <= step <= l - u`. Unnormalized entry
/// (p, q) is `Q_B^{q,Y_{t-1}}(B_{t-1}, B_t) * Q_S^{T_{t-1},X_t,R}(p, q) *
/// filtered_{t-1}(p)`.
pub fn forward_step(
    prev_filtered: &[f64],
    case: &DebtCase,
    step: usize,
    params: &ModelParams,
    spaces: &StateSpaces,
) -> Result<(Vec<Vec<f64>>, f64)> {
    debug_assert!(step >= 1 && step < case.len());
    let n = spaces.n_scheme;
    let b_prev = case.behaviour[step - 1];
    let b_cur = case.behaviour[step];
    let y = threshold_indicator(case.debt_ratio[step - 1], params.alpha);
    let q_s =
        &params.q_s[spaces.key_txr(case.treatment[step - 1], case.econ[step], case.result).index()];
    let mut mat = vec![vec![0.0; n]; n];
    let mut norm = 0.0;
    for q in 0..n {
        let emit = params.q_b[spaces.key_ys(y, q).index()][b_prev][b_cur];
        for p in 0..n {
            let v = emit * q_s[p][q] * prev_filtered[p];
            mat[p][q] = v;
            norm += v;
        }
    }
    if norm <= 0.0 {
        return Err(Error::DegenerateLikelihood {
            case_id: case.case_id.clone(),
            t: case.u + step as i64,
        });
    }
    for row in &mut mat {
        for v in row {
            *v /= norm;
        }
    }
    Ok((mat, norm))
}

/// Full filtering sweep: filtered distributions, forward matrices, and the
/// observed-data log-likelihood accumulated from the step normalizers.
pub fn forward_pass(
    case: &DebtCase,
    params: &ModelParams,
    spaces: &StateSpaces,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64)> {
    let n = spaces.n_scheme;
    let len = case.len();
    let (first, norm) = initial_filter(case, params, spaces)?;
    let mut log_likelihood = norm.ln();
    let mut filtered = Vec::with_capacity(len);
    filtered.push(first);
    let mut forwards = Vec::with_capacity(len - 1);
    for step in 1..len {
        let (mat, c) = forward_step(&filtered[step - 1], case, step, params, spaces)?;
        log_likelihood += c.ln();
        let mut marginal = vec![0.0; n];
        for p in 0..n {
            for q in 0..n {
                marginal[q] += mat[p][q];
            }
        }
        filtered.push(marginal);
        forwards.push(mat);
    }
    Ok((filtered, forwards, log_likelihood))
}

/// Backward smoothing sweep producing the pairwise joints.
///
/// The last joint equals the last forward matrix; earlier ones are
/// `F_t(p,q) * pi_t(q) / filtered_t(q)` where `pi_t` is the smoothed
/// marginal read off the next joint. A zero filtered entry forces the
/// whole quotient to zero (its forward column is already zero).
pub fn backward_pass(filtered: &[Vec<f64>], forwards: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let m = forwards.len();
    if m == 0 {
        return Vec::new();
    }
    let n = filtered[0].len();
    let mut pairwise = vec![Vec::new(); m];
    pairwise[m - 1] = forwards[m - 1].clone();
    for k in (0..m - 1).rev() {
        // smoothed marginal at t = u + k + 1, from the joint one step ahead
        let mut smoothed = vec![0.0; n];
        for p in 0..n {
            for q in 0..n {
                smoothed[p] += pairwise[k + 1][p][q];
            }
        }
        let mut mat = vec![vec![0.0; n]; n];
        for q in 0..n {
            let f = filtered[k + 1][q];
            if f == 0.0 {
                continue;
            }
            let ratio = smoothed[q] / f;
            for p in 0..n {
                mat[p][q] = forwards[k][p][q] * ratio;
            }
        }
        pairwise[k] = mat;
    }
    pairwise
}

/// Smoothed per-period marginals from the pairwise joints.
///
/// For a single-period case the filtered distribution is already smoothed.
pub fn responsibilities(filtered: &[Vec<f64>], pairwise: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let len = filtered.len();
    let n = filtered[0].len();
    if pairwise.is_empty() {
        return vec![filtered[0].clone()];
    }
    let mut gamma = Vec::with_capacity(len);
    // gamma_u(s) = sum_q pairwise[0](s, q)
    gamma.push((0..n).map(|s| pairwise[0][s].iter().sum()).collect());
    for joint in pairwise {
        let mut g = vec![0.0; n];
        for p in 0..n {
            for q in 0..n {
                g[q] += joint[p][q];
            }
        }
        gamma.push(g);
    }
    gamma
}

/// Full E-step for one case.
pub fn posterior(case: &DebtCase, params: &ModelParams, spaces: &StateSpaces) -> Result<PosteriorSet> {
    let (filtered, forwards, log_likelihood) = forward_pass(case, params, spaces)?;
    let pairwise = backward_pass(&filtered, &forwards);
    let gamma = responsibilities(&filtered, &pairwise);
    Ok(PosteriorSet {
        gamma,
        pairwise,
        filtered,
        forwards,
        log_likelihood,
    })
}

const MAX_ORACLE_PATHS: f64 = 1e6;

/// Likelihood weight of one scheme path through the case.
fn path_weight(case: &DebtCase, params: &ModelParams, spaces: &StateSpaces, path: &[usize]) -> f64 {
    let mut w = params.pi_s[spaces.key_xr(case.econ[0], case.result).index()][path[0]]
        * params.pi_b[path[0]][case.behaviour[0]];
    for t in 1..path.len() {
        let y = threshold_indicator(case.debt_ratio[t - 1], params.alpha);
        let q_s =
            &params.q_s[spaces.key_txr(case.treatment[t - 1], case.econ[t], case.result).index()];
        w *= q_s[path[t - 1]][path[t]]
            * params.q_b[spaces.key_ys(y, path[t]).index()][case.behaviour[t - 1]][case.behaviour[t]];
    }
    w
}

fn enumerate_paths(n: usize, len: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![0usize; len];
    loop {
        visit(&path);
        // odometer increment
        let mut k = len;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            path[k] += 1;
            if path[k] < n {
                break;
            }
            path[k] = 0;
        }
    }
}

/// Exhaustive-enumeration oracle: computes the same [`PosteriorSet`] as the
/// forward-backward pass by summing likelihood weights over every scheme path.
///
/// Only usable when `n_scheme^len <= 1e6`.
pub fn brute_force_posterior(
    case: &DebtCase,
    params: &ModelParams,
    spaces: &StateSpaces,
) -> Result<PosteriorSet> {
    let n = spaces.n_scheme;
    let len = case.len();
    let n_paths = (n as f64).powi(len as i32);
    if n_paths > MAX_ORACLE_PATHS {
        return Err(Error::TooLarge {
            n_paths,
            max: MAX_ORACLE_PATHS,
        });
    }

    // smoothed quantities from full-length paths
    let mut total = 0.0;
    let mut gamma = vec![vec![0.0; n]; len];
    let mut pairwise = vec![vec![vec![0.0; n]; n]; len - 1];
    enumerate_paths(n, len, |path| {
        let w = path_weight(case, params, spaces, path);
        total += w;
        for (t, &s) in path.iter().enumerate() {
            gamma[t][s] += w;
        }
        for t in 1..len {
            pairwise[t - 1][path[t - 1]][path[t]] += w;
        }
    });
    if total <= 0.0 {
        return Err(Error::DegenerateLikelihood {
            case_id: case.case_id.clone(),
            t: case.u,
        });
    }
    for dist in &mut gamma {
        dist.iter_mut().for_each(|v| *v /= total);
    }
    for mat in &mut pairwise {
        for row in mat.iter_mut() {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }

    // filtered quantities from prefix paths
    let mut prefix = case.clone();
    let mut filtered = Vec::with_capacity(len);
    let mut forwards = Vec::with_capacity(len - 1);
    for t in 0..len {
        prefix.l = case.u + t as i64;
        let plen = t + 1;
        prefix.behaviour = case.behaviour[..plen].to_vec();
        prefix.treatment = case.treatment[..plen].to_vec();
        prefix.econ = case.econ[..plen].to_vec();
        prefix.debt_ratio = case.debt_ratio[..plen].to_vec();
        let mut ptotal = 0.0;
        let mut marginal = vec![0.0; n];
        let mut joint = vec![vec![0.0; n]; n];
        enumerate_paths(n, plen, |path| {
            let w = path_weight(&prefix, params, spaces, path);
            ptotal += w;
            marginal[path[plen - 1]] += w;
            if plen > 1 {
                joint[path[plen - 2]][path[plen - 1]] += w;
            }
        });
        if ptotal <= 0.0 {
            return Err(Error::DegenerateLikelihood {
                case_id: case.case_id.clone(),
                t: prefix.l,
            });
        }
        marginal.iter_mut().for_each(|v| *v /= ptotal);
        filtered.push(marginal);
        if plen > 1 {
            for row in &mut joint {
                row.iter_mut().for_each(|v| *v /= ptotal);
            }
            forwards.push(joint);
        }
    }

    Ok(PosteriorSet {
        gamma,
        pairwise,
        filtered,
        forwards,
        log_likelihood: total.ln(),
    })
}
