//! Tabular input, factor expansion and assembly of the partially linear
//! design `Z(x) = (Z(w)', v')'`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BasisSpec};
use crate::linalg::pivoted_rank;

/// Relative pivot tolerance of the design rank check.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column \"{0}\" not found in data")]
    MissingColumn(String),
    #[error("cannot parse {value:?} as a number in column \"{column}\" at data row {row}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("data file is empty")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("factor \"{0}\" has a single level and is collinear with the constant")]
    SingleLevelFactor(String),
    #[error("value {value:?} in factor \"{column}\" is not a declared level")]
    UnknownLevel { column: String, value: String },
    #[error("design is rank deficient; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("design has {m} columns but only {n} observations (need m < n)")]
    TooFewObservations { n: usize, m: usize },
    #[error("basis: {0}")]
    Basis(#[from] BasisError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Factor,
}

/// One control term of the linear part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTerm {
    pub name: String,
    pub kind: ColumnKind,
    /// Declared level order for factors; inferred (sorted) when absent. The
    /// first level is the reference level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl ControlTerm {
    pub fn numeric(name: impl Into<String>) -> Self {
        ControlTerm {
            name: name.into(),
            kind: ColumnKind::Numeric,
            levels: None,
        }
    }

    pub fn factor(name: impl Into<String>) -> Self {
        ControlTerm {
            name: name.into(),
            kind: ColumnKind::Factor,
            levels: None,
        }
    }
}

/// Outcome, treatment and the ordered list of control terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub controls: Vec<ControlTerm>,
    /// `None` adds an intercept exactly when the basis does not span the
    /// constant function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<bool>,
}

impl ModelSpec {
    pub fn new(outcome: impl Into<String>, treatment: impl Into<String>) -> Self {
        ModelSpec {
            outcome: outcome.into(),
            treatment: treatment.into(),
            controls: Vec::new(),
            intercept: None,
        }
    }

    pub fn with_control(mut self, term: ControlTerm) -> Self {
        self.controls.push(term);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in std::iter::once(&self.outcome)
            .chain(std::iter::once(&self.treatment))
            .chain(self.controls.iter().map(|c| &c.name))
        {
            if !seen.insert(name.as_str()) {
                return Err(DataError::Model(format!("column \"{name}\" used more than once")));
            }
        }
        for c in &self.controls {
            if let Some(levels) = &c.levels {
                if c.kind != ColumnKind::Factor {
                    return Err(DataError::Model(format!("levels given for numeric column \"{}\"", c.name)));
                }
                let uniq: BTreeSet<_> = levels.iter().collect();
                if uniq.len() != levels.len() {
                    return Err(DataError::Model(format!("duplicate levels for factor \"{}\"", c.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlData {
    Numeric(Vec<f64>),
    /// Level codes index into `levels`.
    Factor { levels: Vec<String>, codes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlColumn {
    pub name: String,
    pub data: ControlData,
}

/// Validated observations `(Y, W, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub outcome_name: String,
    pub treatment_name: String,
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub controls: Vec<ControlColumn>,
}

impl Dataset {
    pub fn new(
        outcome_name: impl Into<String>,
        treatment_name: impl Into<String>,
        outcome: Vec<f64>,
        treatment: Vec<f64>,
        controls: Vec<ControlColumn>,
    ) -> Result<Self> {
        let n = outcome.len();
        if treatment.len() != n {
            return Err(DataError::Invalid("outcome and treatment lengths differ".into()));
        }
        if n < 2 {
            return Err(DataError::Invalid(format!("need at least 2 observations, got {n}")));
        }
        if outcome.iter().chain(&treatment).any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite outcome or treatment value".into()));
        }
        let first = treatment[0];
        if treatment.iter().all(|&w| w == first) {
            return Err(DataError::Invalid("treatment has fewer than 2 distinct values".into()));
        }
        for c in &controls {
            match &c.data {
                ControlData::Numeric(v) => {
                    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                        return Err(DataError::Invalid(format!("control \"{}\" malformed", c.name)));
                    }
                }
                ControlData::Factor { levels, codes } => {
                    if codes.len() != n || codes.iter().any(|&k| k >= levels.len()) {
                        return Err(DataError::Invalid(format!("factor \"{}\" malformed", c.name)));
                    }
                }
            }
        }
        Ok(Dataset {
            outcome_name: outcome_name.into(),
            treatment_name: treatment_name.into(),
            outcome,
            treatment,
            controls,
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Sorted distinct treatment values.
    pub fn unique_treatment(&self) -> Vec<f64> {
        let mut v = self.treatment.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Rows `idx` of the dataset, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            outcome_name: self.outcome_name.clone(),
            treatment_name: self.treatment_name.clone(),
            outcome: pick(&self.outcome),
            treatment: pick(&self.treatment),
            controls: self
                .controls
                .iter()
                .map(|c| ControlColumn {
                    name: c.name.clone(),
                    data: match &c.data {
                        ControlData::Numeric(v) => ControlData::Numeric(pick(v)),
                        ControlData::Factor { levels, codes } => ControlData::Factor {
                            levels: levels.clone(),
                            codes: idx.iter().map(|&i| codes[i]).collect(),
                        },
                    },
                })
                .collect(),
        }
    }

    /// Writes the dataset as CSV with a header row. Numbers use the shortest
    /// representation that parses back to the same double.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec![self.outcome_name.clone(), self.treatment_name.clone()];
        header.extend(self.controls.iter().map(|c| c.name.clone()));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.outcome[i].to_string(), self.treatment[i].to_string()];
            for c in &self.controls {
                rec.push(match &c.data {
                    ControlData::Numeric(v) => v[i].to_string(),
                    ControlData::Factor { levels, codes } => levels[codes[i]].clone(),
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads the columns named in `spec` from a CSV file.
pub fn load_csv(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, spec)
}

/// Reads the columns named in `spec` from any CSV source (header required).
pub fn read_csv<R: Read>(src: R, spec: &ModelSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(src);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(DataError::Empty);
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let y_idx = col(&spec.outcome)?;
    let w_idx = col(&spec.treatment)?;
    let c_idx = spec.controls.iter().map(|c| col(&c.name)).collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); spec.controls.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let num = |idx: usize, name: &str| -> Result<f64> {
            let cell = rec.get(idx).unwrap_or("");
            parse_number(cell).ok_or_else(|| DataError::Parse {
                row,
                column: name.to_string(),
                value: cell.to_string(),
            })
        };
        y.push(num(y_idx, &spec.outcome)?);
        w.push(num(w_idx, &spec.treatment)?);
        for (k, term) in spec.controls.iter().enumerate() {
            let cell = rec.get(c_idx[k]).unwrap_or("");
            if term.kind == ColumnKind::Numeric {
                num(c_idx[k], &term.name)?;
            } else if cell.is_empty() {
                return Err(DataError::Parse {
                    row,
                    column: term.name.clone(),
                    value: String::new(),
                });
            }
            raw[k].push(cell.to_string());
        }
    }
    if y.is_empty() {
        return Err(DataError::Empty);
    }
    let controls = spec
        .controls
        .iter()
        .zip(raw)
        .map(|(term, cells)| {
            let data = match term.kind {
                ColumnKind::Numeric => {
                    ControlData::Numeric(cells.iter().map(|c| parse_number(c).unwrap()).collect())
                }
                ColumnKind::Factor => {
                    let levels = match &term.levels {
                        Some(l) => l.clone(),
                        None => cells.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
                    };
                    let codes = cells
                        .iter()
                        .map(|c| {
                            levels.iter().position(|l| l == c).ok_or_else(|| DataError::UnknownLevel {
                                column: term.name.clone(),
                                value: c.clone(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ControlData::Factor { levels, codes }
                }
            };
            Ok(ControlColumn {
                name: term.name.clone(),
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(&spec.outcome, &spec.treatment, y, w, controls)
}

fn parse_number(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// A group of expanded control columns originating from one control term.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGroup {
    pub name: String,
    pub kind: ColumnKind,
    /// Offset of the group's first column within the control block.
    pub start: usize,
    pub width: usize,
}

/// Numeric control block after factor expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBlock {
    pub names: Vec<String>,
    /// Column-major: `columns[k][i]`.
    pub columns: Vec<Vec<f64>>,
    pub groups: Vec<ControlGroup>,
}

impl ControlBlock {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Sample mean for numeric controls; indicators of the modal level for
    /// factors (ties go to the lowest-ordered level, the reference level
    /// included).
    pub fn profile(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for g in &self.groups {
            match g.kind {
                ColumnKind::Numeric => {
                    let col = &self.columns[g.start];
                    out[g.start] = col.iter().sum::<f64>() / col.len() as f64;
                }
                ColumnKind::Factor => {
                    let n = self.columns[g.start].len();
                    let counts: Vec<usize> = (g.start..g.start + g.width)
                        .map(|k| self.columns[k].iter().filter(|&&v| v == 1.0).count())
                        .collect();
                    let reference = n - counts.iter().sum::<usize>();
                    let mut best = (reference, None);
                    for (k, &c) in counts.iter().enumerate() {
                        if c > best.0 {
                            best = (c, Some(k));
                        }
                    }
                    if let Some(k) = best.1 {
                        out[g.start + k] = 1.0;
                    }
                }
            }
        }
        out
    }
}

/// Expands each factor with `L` levels into `L - 1` indicator columns named
/// `"<col>=<level>"`, dropping the first (reference) level. Numeric controls
/// pass through unchanged.
pub fn expand_factors(dataset: &Dataset) -> Result<ControlBlock> {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    let mut groups = Vec::new();
    for c in &dataset.controls {
        let start = columns.len();
        match &c.data {
            ControlData::Numeric(v) => {
                names.push(c.name.clone());
                columns.push(v.clone());
                groups.push(ControlGroup {
                    name: c.name.clone(),
                    kind: ColumnKind::Numeric,
                    start,
                    width: 1,
                });
            }
            ControlData::Factor { levels, codes } => {
                if levels.len() < 2 {
                    return Err(DataError::SingleLevelFactor(c.name.clone()));
                }
                for (k, level) in levels.iter().enumerate().skip(1) {
                    names.push(format!("{}={}", c.name, level));
                    columns.push(codes.iter().map(|&code| if code == k { 1.0 } else { 0.0 }).collect());
                }
                groups.push(ControlGroup {
                    name: c.name.clone(),
                    kind: ColumnKind::Factor,
                    start,
                    width: levels.len() - 1,
                });
            }
        }
    }
    Ok(ControlBlock {
        names,
        columns,
        groups,
    })
}

/// Regressor matrix with the nonparametric block in columns `[0, split)`
/// and the linear part (intercept first, if any, then controls) after it.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
    split: usize,
    intercept: bool,
    controls: ControlBlock,
}

impl DesignMatrix {
    /// Wraps a raw matrix after the rank checks. `split` marks the end of the
    /// nonparametric block; any remaining columns are treated as numeric
    /// controls.
    pub fn from_matrix(values: DMatrix<f64>, column_names: Vec<String>, split: usize) -> Result<Self> {
        let m = values.ncols();
        if column_names.len() != m || split > m {
            return Err(DataError::Invalid("column names or split inconsistent with matrix".into()));
        }
        let controls = ControlBlock {
            names: column_names[split..].to_vec(),
            columns: (split..m).map(|j| values.column(j).iter().cloned().collect()).collect(),
            groups: (split..m)
                .map(|j| ControlGroup {
                    name: column_names[j].clone(),
                    kind: ColumnKind::Numeric,
                    start: j - split,
                    width: 1,
                })
                .collect(),
        };
        let d = DesignMatrix {
            values,
            column_names,
            split,
            intercept: false,
            controls,
        };
        d.check_rank()?;
        Ok(d)
    }

    fn check_rank(&self) -> Result<()> {
        let (n, m) = self.values.shape();
        if m >= n {
            return Err(DataError::TooFewObservations { n, m });
        }
        let pr = pivoted_rank(&self.values, RANK_TOL);
        if pr.rank < m {
            return Err(DataError::RankDeficient(
                pr.dependent().into_iter().map(|j| self.column_names[j].clone()).collect(),
            ));
        }
        Ok(())
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Number of nonparametric columns `m_w`.
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn controls(&self) -> &ControlBlock {
        &self.controls
    }

    /// Values of the linear block (intercept then controls) at the control
    /// profile used for conditional-quantile functionals.
    pub fn linear_profile(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.ncols() - self.split);
        if self.intercept {
            v.push(1.0);
        }
        v.extend(self.controls.profile());
        v
    }
}

/// Assembles `Z(x_i) = (Z(w_i)', [1,] v_i')'` for every observation.
pub fn build_design(dataset: &Dataset, spec: &ModelSpec, basis: &BasisSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    let controls = expand_factors(dataset)?;
    let intercept = spec.intercept.unwrap_or(!basis.spans_constant());
    let n = dataset.n();
    let mw = basis.dim();
    let m = mw + usize::from(intercept) + controls.width();
    let mut values = DMatrix::zeros(n, m);
    let mut row = vec![0.0; mw];
    for i in 0..n {
        basis.eval_into(dataset.treatment[i], 0, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    let mut names = basis.column_names(&dataset.treatment_name);
    let mut j = mw;
    if intercept {
        values.column_mut(j).fill(1.0);
        names.push("(Intercept)".into());
        j += 1;
    }
    for (k, col) in controls.columns.iter().enumerate() {
        values.column_mut(j + k).copy_from_slice(col);
    }
    names.extend(controls.names.iter().cloned());
    let d = DesignMatrix {
        values,
        column_names: names,
        split: mw,
        intercept,
        controls,
    };
    d.check_rank()?;
    Ok(d)
}
