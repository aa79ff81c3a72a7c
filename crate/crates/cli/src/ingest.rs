//! CSV ingestion: role assignment, missing-row removal and encoding of
//! categorical columns.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Serialize;

use cste_core::{ColMatrix, Dataset};

use crate::error::{CliError, CliResult};

/// Columns with at most this many distinct values are categorical.
pub const MAX_CATEGORIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZKind {
    /// Coded 0 for `levels[0]`, 1 for `levels[1]`.
    Binary { levels: Vec<String> },
    /// Coded by position in `levels`.
    Categorical { levels: Vec<String> },
    Continuous,
}

impl ZKind {
    pub fn is_discrete(&self) -> bool {
        !matches!(self, ZKind::Continuous)
    }

    pub fn levels(&self) -> &[String] {
        match self {
            ZKind::Binary { levels } | ZKind::Categorical { levels } => levels,
            ZKind::Continuous => &[],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_used: usize,
    pub rows_dropped: usize,
    /// 1-based data line numbers of dropped rows, first 100.
    pub dropped_lines: Vec<usize>,
    pub outcome: String,
    pub treatment: String,
    pub z_columns: Vec<String>,
    pub v_columns: Vec<String>,
    /// Categorical V columns and the dummy columns they expanded to.
    pub expanded: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub z_kinds: Vec<ZKind>,
    pub report: IngestReport,
}

pub struct Roles<'a> {
    pub outcome: &'a str,
    pub treatment: &'a str,
    pub z: &'a [String],
    pub v: &'a [String],
    pub categorical: &'a [String],
    pub continuous: &'a [String],
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

/// Distinct levels, numerically ordered when every level parses.
fn ordered_levels(values: &[&str]) -> Vec<String> {
    let mut set: Vec<String> = values.iter().map(|s| s.to_string()).collect::<HashSet<_>>().into_iter().collect();
    let numeric: Option<Vec<f64>> = set.iter().map(|s| s.parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => set.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap())),
        None => set.sort(),
    }
    set
}

fn parse_numeric(name: &str, values: &[&str]) -> CliResult<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::data("cli.non_numeric", format!("column {name:?} row {}: {s:?} is not a number", i + 1)))
        })
        .collect()
}

/// Decides whether a column is categorical, honouring the overrides.
fn categorical(name: &str, values: &[&str], roles: &Roles) -> CliResult<Option<Vec<String>>> {
    let forced_cat = roles.categorical.iter().any(|c| c == name);
    let forced_num = roles.continuous.iter().any(|c| c == name);
    if forced_cat && forced_num {
        return Err(CliError::config("cli.roles", format!("column {name:?} is both categorical and continuous")));
    }
    let all_numeric = values.iter().all(|s| s.parse::<f64>().map(|x| x.is_finite()).unwrap_or(false));
    if forced_num {
        return if all_numeric {
            Ok(None)
        } else {
            Err(CliError::data("cli.non_numeric", format!("column {name:?} has non-numeric values")))
        };
    }
    let levels = ordered_levels(values);
    if forced_cat || levels.len() <= MAX_CATEGORIES {
        return Ok(Some(levels));
    }
    if !all_numeric {
        return Err(CliError::data(
            "cli.too_many_levels",
            format!("column {name:?} has {} text levels (at most {MAX_CATEGORIES})", levels.len()),
        ));
    }
    Ok(None)
}

fn code_of(levels: &[String], s: &str) -> f64 {
    levels.iter().position(|l| l == s).expect("level taken from the column") as f64
}

pub fn ingest(path: &Path, roles: &Roles) -> CliResult<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::config("cli.input", format!("cannot read {}: {e}", path.display())),
            _ => CliError::from(e),
        })?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(CliError::data("cli.empty_file", format!("{} is empty", path.display())));
    }
    let index = |name: &str| -> CliResult<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::config("cli.unknown_column", format!("no column named {name:?}")))
    };
    let y_idx = index(roles.outcome)?;
    let t_idx = index(roles.treatment)?;
    let z_idx: Vec<usize> = roles.z.iter().map(|c| index(c)).collect::<CliResult<_>>()?;
    if z_idx.is_empty() {
        return Err(CliError::config("cli.roles", "at least one --z column is required"));
    }
    let taken: HashSet<usize> = [y_idx, t_idx].into_iter().chain(z_idx.iter().copied()).collect();
    if taken.len() != 2 + z_idx.len() {
        return Err(CliError::config("cli.roles", "outcome, treatment and z columns must be distinct"));
    }
    let v_idx: Vec<usize> = if roles.v.is_empty() {
        (0..header.len()).filter(|i| !taken.contains(i)).collect()
    } else {
        roles.v.iter().map(|c| index(c)).collect::<CliResult<_>>()?
    };
    if v_idx.iter().any(|i| taken.contains(i)) {
        return Err(CliError::config("cli.roles", "a v column repeats another role"));
    }
    for name in roles.categorical.iter().chain(roles.continuous) {
        index(name)?;
    }
    let used: Vec<usize> = [y_idx, t_idx].into_iter().chain(z_idx.iter().copied()).chain(v_idx.iter().copied()).collect();

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    let mut rows_read = 0;
    let mut dropped_lines = Vec::new();
    let mut rows_dropped = 0;
    for record in reader.records() {
        let record = record?;
        rows_read += 1;
        if used.iter().any(|&i| record.get(i).map_or(true, is_missing)) {
            rows_dropped += 1;
            if dropped_lines.len() < 100 {
                dropped_lines.push(rows_read);
            }
            continue;
        }
        rows.push(record);
    }
    if rows_read == 0 {
        return Err(CliError::data("cli.empty_file", format!("{} has no data rows", path.display())));
    }
    if rows.is_empty() {
        return Err(CliError::data("cli.no_complete_rows", "every row has a missing value in a used column"));
    }
    let n = rows.len();
    let column = |i: usize| -> Vec<&str> { rows.iter().map(|r| r.get(i).unwrap()).collect() };

    let y = parse_numeric(roles.outcome, &column(y_idx))?;
    let t = column(t_idx)
        .iter()
        .enumerate()
        .map(|(i, s)| match s.parse::<f64>() {
            Ok(x) if x == 0.0 => Ok(0u8),
            Ok(x) if x == 1.0 => Ok(1u8),
            _ => Err(CliError::data(
                "cli.non_binary_treatment",
                format!("treatment column {:?} has value {s:?} at row {} (must be 0 or 1)", roles.treatment, i + 1),
            )),
        })
        .collect::<CliResult<Vec<u8>>>()?;

    let mut z_cols = Vec::new();
    let mut z_kinds = Vec::new();
    for (&i, name) in z_idx.iter().zip(roles.z) {
        let values = column(i);
        match categorical(name, &values, roles)? {
            Some(levels) if levels.len() < 2 => {
                return Err(CliError::data("cli.constant_z", format!("z column {name:?} takes a single value")));
            }
            Some(levels) => {
                // A numeric 0/1 column keeps its values.
                let codes: Vec<f64> = values.iter().map(|s| code_of(&levels, s)).collect();
                z_cols.push(codes);
                z_kinds.push(if levels.len() == 2 { ZKind::Binary { levels } } else { ZKind::Categorical { levels } });
            }
            None => {
                z_cols.push(parse_numeric(name, &values)?);
                z_kinds.push(ZKind::Continuous);
            }
        }
    }

    let mut v_cols = Vec::new();
    let mut v_names = Vec::new();
    let mut expanded = BTreeMap::new();
    for &i in &v_idx {
        let name = &header[i];
        let values = column(i);
        match categorical(name, &values, roles)? {
            Some(levels) if levels.len() < 2 => {
                // Constant column: kept, the solver drops it.
                v_cols.push(vec![0.0; n]);
                v_names.push(name.clone());
            }
            Some(levels) if levels.len() == 2 => {
                v_cols.push(values.iter().map(|s| code_of(&levels, s)).collect());
                v_names.push(name.clone());
            }
            Some(levels) => {
                // Dummies for every level but the most frequent one.
                let mut counts = vec![0usize; levels.len()];
                for s in &values {
                    counts[code_of(&levels, s) as usize] += 1;
                }
                let reference = (0..levels.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
                let mut names = Vec::new();
                for (k, level) in levels.iter().enumerate() {
                    if k == reference {
                        continue;
                    }
                    v_cols.push(values.iter().map(|s| f64::from(u8::from(*s == level.as_str()))).collect());
                    let dummy = format!("{name}={level}");
                    names.push(dummy.clone());
                    v_names.push(dummy);
                }
                expanded.insert(name.clone(), names);
            }
            None => {
                v_cols.push(parse_numeric(name, &values)?);
                v_names.push(name.clone());
            }
        }
    }

    let data = Dataset::with_names(
        y,
        t,
        ColMatrix::from_columns(n, &z_cols)?,
        if v_cols.is_empty() { ColMatrix::zeros(n, 0) } else { ColMatrix::from_columns(n, &v_cols)? },
        roles.z.to_vec(),
        v_names,
    )?;
    let report = IngestReport {
        rows_read,
        rows_used: n,
        rows_dropped,
        dropped_lines,
        outcome: roles.outcome.to_string(),
        treatment: roles.treatment.to_string(),
        z_columns: roles.z.to_vec(),
        v_columns: v_idx.iter().map(|&i| header[i].clone()).collect(),
        expanded,
    };
    Ok(Ingested { data, z_kinds, report })
}
