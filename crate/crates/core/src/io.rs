//! File formats: long-format CSV cohort files, JSON parameter files, and
//! label maps translating categorical strings to dense codes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{validate_case, DebtCase, ModelParams, StateSpaces};
use crate::error::{Error, Result};

/// Human-readable category names, positionally mapped to dense codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMaps {
    pub behaviour: Vec<String>,
    pub treatment: Vec<String>,
    pub econ: Vec<String>,
    pub result: Vec<String>,
}

impl LabelMaps {
    /// Plain numeric labels `"0".."n-1"` for each variable.
    pub fn numeric(spaces: &StateSpaces) -> Self {
        let seq = |n: usize| (0..n).map(|i| i.to_string()).collect();
        LabelMaps {
            behaviour: seq(spaces.n_behaviour),
            treatment: seq(spaces.n_treatment),
            econ: seq(spaces.n_econ),
            result: seq(spaces.n_result),
        }
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMaps> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}

pub fn save_labels(path: &Path, labels: &LabelMaps) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, labels)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Assigns codes in first-appearance order, or looks them up in a fixed map.
struct Coder<'a> {
    fixed: Option<&'a [String]>,
    seen: Vec<String>,
    index: HashMap<String, usize>,
}

impl<'a> Coder<'a> {
    fn new(fixed: Option<&'a [String]>) -> Self {
        let mut index = HashMap::new();
        if let Some(labels) = fixed {
            for (i, l) in labels.iter().enumerate() {
                index.insert(l.clone(), i);
            }
        }
        Coder {
            fixed,
            seen: Vec::new(),
            index,
        }
    }

    fn code(&mut self, label: &str, what: &str, errs: &mut Vec<String>) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        if self.fixed.is_some() {
            errs.push(format!("unknown category `{label}` for {what}"));
            return 0;
        }
        let i = self.seen.len();
        self.seen.push(label.to_string());
        self.index.insert(label.to_string(), i);
        i
    }

    fn labels(&self) -> Vec<String> {
        match self.fixed {
            Some(l) => l.to_vec(),
            None => {
                if self.seen.is_empty() {
                    // a variable that never appears still needs one category
                    vec!["0".to_string()]
                } else {
                    self.seen.clone()
                }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct ObsRow {
    case_id: String,
    t: i64,
    #[serde(rename = "B")]
    behaviour: String,
    #[serde(rename = "T")]
    treatment: String,
    #[serde(rename = "X")]
    econ: String,
    #[serde(rename = "D")]
    debt_ratio: f64,
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    case_id: String,
    #[serde(rename = "R")]
    result: String,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = match e.position() {
        Some(pos) => pos.line(),
        None => 0,
    };
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Reads a cohort from an observations table and a case table.
///
/// Labels map to dense codes in first-appearance order unless an explicit
/// label map is supplied. Per-case `t` values must be contiguous; `u` and
/// `l` are derived from them. Every case is validated and validation
/// failures across the whole cohort are aggregated.
pub fn load_cohort(
    obs_path: &Path,
    cases_path: &Path,
    labels: Option<&LabelMaps>,
) -> Result<(Vec<DebtCase>, StateSpaces, LabelMaps)> {
    let mut behaviour = Coder::new(labels.map(|l| l.behaviour.as_slice()));
    let mut treatment = Coder::new(labels.map(|l| l.treatment.as_slice()));
    let mut econ = Coder::new(labels.map(|l| l.econ.as_slice()));
    let mut result = Coder::new(labels.map(|l| l.result.as_slice()));
    let mut errs: Vec<String> = Vec::new();

    // case table first: results keyed by case_id
    let mut results: HashMap<String, usize> = HashMap::new();
    let mut reader = csv::Reader::from_path(cases_path).map_err(|e| csv_error(cases_path, e))?;
    for row in reader.deserialize::<CaseRow>() {
        let row = row.map_err(|e| csv_error(cases_path, e))?;
        let code = result.code(&row.result, &format!("R of case `{}`", row.case_id), &mut errs);
        results.insert(row.case_id, code);
    }

    // observations, grouped by case in first-appearance order
    struct Partial {
        t: Vec<i64>,
        behaviour: Vec<usize>,
        treatment: Vec<usize>,
        econ: Vec<usize>,
        debt_ratio: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partials: HashMap<String, Partial> = HashMap::new();
    let mut reader = csv::Reader::from_path(obs_path).map_err(|e| csv_error(obs_path, e))?;
    for row in reader.deserialize::<ObsRow>() {
        let row = row.map_err(|e| csv_error(obs_path, e))?;
        let id = row.case_id;
        let entry = partials.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                t: Vec::new(),
                behaviour: Vec::new(),
                treatment: Vec::new(),
                econ: Vec::new(),
                debt_ratio: Vec::new(),
            }
        });
        entry.t.push(row.t);
        entry
            .behaviour
            .push(behaviour.code(&row.behaviour, &format!("B of case `{id}`"), &mut errs));
        entry
            .treatment
            .push(treatment.code(&row.treatment, &format!("T of case `{id}`"), &mut errs));
        entry
            .econ
            .push(econ.code(&row.econ, &format!("X of case `{id}`"), &mut errs));
        entry.debt_ratio.push(row.debt_ratio);
    }

    let mut cohort = Vec::with_capacity(order.len());
    for id in order {
        let p = partials.remove(&id).unwrap();
        for (k, w) in p.t.windows(2).enumerate() {
            if w[1] != w[0] + 1 {
                errs.push(format!(
                    "case `{id}`: t must be contiguous, missing t = {} after t = {} (row {})",
                    w[0] + 1,
                    w[0],
                    k + 1
                ));
            }
        }
        let result_code = match results.get(&id) {
            Some(&r) => r,
            None => {
                errs.push(format!("case `{id}` missing from the case table"));
                0
            }
        };
        let u = p.t[0];
        cohort.push(DebtCase {
            case_id: id,
            u,
            l: u + p.t.len() as i64 - 1,
            behaviour: p.behaviour,
            treatment: p.treatment,
            econ: p.econ,
            debt_ratio: p.debt_ratio,
            result: result_code,
        });
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }

    let maps = LabelMaps {
        behaviour: behaviour.labels(),
        treatment: treatment.labels(),
        econ: econ.labels(),
        result: result.labels(),
    };
    let spaces = StateSpaces {
        n_behaviour: maps.behaviour.len(),
        n_scheme: 1, // unknown from data; callers set it from config or params
        n_treatment: maps.treatment.len(),
        n_econ: maps.econ.len(),
        n_result: maps.result.len(),
    };
    let mut verrs = Vec::new();
    for case in &cohort {
        if let Err(Error::Validation(mut e)) = validate_case(case, &spaces) {
            verrs.append(&mut e);
        }
    }
    if !verrs.is_empty() {
        return Err(Error::Validation(verrs));
    }
    Ok((cohort, spaces, maps))
}

/// Writes a cohort back out as observation and case tables.
pub fn save_cohort(
    obs_path: &Path,
    cases_path: &Path,
    cohort: &[DebtCase],
    labels: &LabelMaps,
) -> Result<()> {
    let mut obs = BufWriter::new(File::create(obs_path)?);
    writeln!(obs, "case_id,t,B,T,X,D")?;
    for case in cohort {
        for k in 0..case.len() {
            writeln!(
                obs,
                "{},{},{},{},{},{}",
                case.case_id,
                case.u + k as i64,
                labels.behaviour[case.behaviour[k]],
                labels.treatment[case.treatment[k]],
                labels.econ[case.econ[k]],
                case.debt_ratio[k]
            )?;
        }
    }
    obs.flush()?;
    let mut cases = BufWriter::new(File::create(cases_path)?);
    writeln!(cases, "case_id,R")?;
    for case in cohort {
        writeln!(cases, "{},{}", case.case_id, labels.result[case.result])?;
    }
    cases.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct QsEntry {
    #[serde(rename = "T")]
    treatment: usize,
    #[serde(rename = "X")]
    econ: usize,
    #[serde(rename = "R")]
    result: usize,
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PisEntry {
    #[serde(rename = "X")]
    econ: usize,
    #[serde(rename = "R")]
    result: usize,
    probs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QbEntry {
    #[serde(rename = "Y")]
    indicator: usize,
    #[serde(rename = "S")]
    scheme: usize,
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PibEntry {
    #[serde(rename = "S")]
    scheme: usize,
    probs: Vec<f64>,
}

/// On-disk parameter document. Bank entries carry their covariate indices
/// explicitly; load accepts them in any order.
#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    spaces: StateSpaces,
    alpha: f64,
    #[serde(rename = "Q_S")]
    q_s: Vec<QsEntry>,
    #[serde(rename = "pi_S")]
    pi_s: Vec<PisEntry>,
    #[serde(rename = "Q_B")]
    q_b: Vec<QbEntry>,
    #[serde(rename = "pi_B")]
    pi_b: Vec<PibEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<LabelMaps>,
}

pub fn save_params(
    path: &Path,
    params: &ModelParams,
    spaces: &StateSpaces,
    labels: Option<&LabelMaps>,
) -> Result<()> {
    params.validate(spaces)?;
    let doc = ParamsFile {
        spaces: *spaces,
        alpha: params.alpha,
        q_s: params
            .q_s
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                let (t, x, r) = spaces.unkey_txr(crate::domain::CovariateKey(k));
                QsEntry {
                    treatment: t,
                    econ: x,
                    result: r,
                    rows: rows.clone(),
                }
            })
            .collect(),
        pi_s: params
            .pi_s
            .iter()
            .enumerate()
            .map(|(k, probs)| {
                let (x, r) = spaces.unkey_xr(crate::domain::CovariateKey(k));
                PisEntry {
                    econ: x,
                    result: r,
                    probs: probs.clone(),
                }
            })
            .collect(),
        q_b: params
            .q_b
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                let (y, s) = spaces.unkey_ys(crate::domain::CovariateKey(k));
                QbEntry {
                    indicator: y,
                    scheme: s,
                    rows: rows.clone(),
                }
            })
            .collect(),
        pi_b: params
            .pi_b
            .iter()
            .enumerate()
            .map(|(s, probs)| PibEntry {
                scheme: s,
                probs: probs.clone(),
            })
            .collect(),
        labels: labels.cloned(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}

const PARAMS_KEYS: [&str; 7] = ["spaces", "alpha", "Q_S", "pi_S", "Q_B", "pi_B", "labels"];

pub fn load_params(path: &Path) -> Result<(ModelParams, StateSpaces, Option<LabelMaps>)> {
    let file = File::open(path)?;
    let value: Value = serde_json::from_reader(file)?;
    if let Value::Object(map) = &value {
        for key in map.keys() {
            if !PARAMS_KEYS.contains(&key.as_str()) {
                eprintln!("warning: ignoring unknown field `{key}` in {}", path.display());
            }
        }
    }
    let doc: ParamsFile = serde_json::from_value(value)?;
    let spaces = doc.spaces;
    spaces.validate()?;

    let mut errs = Vec::new();
    let mut q_s = vec![None; spaces.n_qs_banks()];
    for e in doc.q_s {
        if e.treatment >= spaces.n_treatment || e.econ >= spaces.n_econ || e.result >= spaces.n_result {
            errs.push(format!(
                "Q_S entry (T={}, X={}, R={}) out of range",
                e.treatment, e.econ, e.result
            ));
            continue;
        }
        q_s[spaces.key_txr(e.treatment, e.econ, e.result).index()] = Some(e.rows);
    }
    let mut pi_s = vec![None; spaces.n_pis_banks()];
    for e in doc.pi_s {
        if e.econ >= spaces.n_econ || e.result >= spaces.n_result {
            errs.push(format!("pi_S entry (X={}, R={}) out of range", e.econ, e.result));
            continue;
        }
        pi_s[spaces.key_xr(e.econ, e.result).index()] = Some(e.probs);
    }
    let mut q_b = vec![None; spaces.n_qb_banks()];
    for e in doc.q_b {
        if e.indicator >= 2 || e.scheme >= spaces.n_scheme {
            errs.push(format!("Q_B entry (Y={}, S={}) out of range", e.indicator, e.scheme));
            continue;
        }
        q_b[spaces.key_ys(e.indicator, e.scheme).index()] = Some(e.rows);
    }
    let mut pi_b = vec![None; spaces.n_scheme];
    for e in doc.pi_b {
        if e.scheme >= spaces.n_scheme {
            errs.push(format!("pi_B entry (S={}) out of range", e.scheme));
            continue;
        }
        pi_b[e.scheme] = Some(e.probs);
    }
    let unwrap_bank = |name: &str, v: Vec<Option<Vec<Vec<f64>>>>, errs: &mut Vec<String>| {
        v.into_iter()
            .enumerate()
            .map(|(k, m)| {
                m.unwrap_or_else(|| {
                    errs.push(format!("{name}: missing entry for key {k}"));
                    Vec::new()
                })
            })
            .collect::<Vec<_>>()
    };
    let unwrap_dists = |name: &str, v: Vec<Option<Vec<f64>>>, errs: &mut Vec<String>| {
        v.into_iter()
            .enumerate()
            .map(|(k, d)| {
                d.unwrap_or_else(|| {
                    errs.push(format!("{name}: missing entry for key {k}"));
                    Vec::new()
                })
            })
            .collect::<Vec<_>>()
    };
    let params = ModelParams {
        alpha: doc.alpha,
        q_s: unwrap_bank("Q_S", q_s, &mut errs),
        pi_s: unwrap_dists("pi_S", pi_s, &mut errs),
        q_b: unwrap_bank("Q_B", q_b, &mut errs),
        pi_b: unwrap_dists("pi_B", pi_b, &mut errs),
    };
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    params.validate(&spaces)?;
    Ok((params, spaces, doc.labels))
}
