//! Categorical datasets with a missingness mask, their codebook, CSV
//! ingestion, and the cell-probability estimands evaluated on them.
//!
//! Level codes are stored 0-based (`Code`), i.e. code `c` names the label
//! `codebook.variables[j].levels[c]`. Files only ever carry labels.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 0-based level index within one variable.
pub type Code = u16;

/// Maximum number of levels a single variable may declare.
pub const MAX_LEVELS: usize = Code::MAX as usize;

fn default_na_token() -> String {
    "NA".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub levels: Vec<String>,
}

impl Variable {
    pub fn new(name: impl Into<String>, levels: &[&str]) -> Self {
        Variable {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    #[serde(default = "default_na_token")]
    pub na_token: String,
    pub variables: Vec<Variable>,
}

impl Codebook {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        Self::with_na_token(variables, default_na_token())
    }

    pub fn with_na_token(variables: Vec<Variable>, na_token: impl Into<String>) -> Result<Self> {
        let cb = Codebook {
            na_token: na_token.into(),
            variables,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let cb: Codebook = serde_json::from_reader(BufReader::new(file))?;
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Codebook("no variables declared".into()));
        }
        let mut names = HashSet::new();
        for var in &self.variables {
            if !names.insert(var.name.as_str()) {
                return Err(Error::Codebook(format!("duplicate variable name '{}'", var.name)));
            }
            if var.levels.len() < 2 {
                return Err(Error::Codebook(format!(
                    "variable '{}' declares {} level(s), at least 2 required",
                    var.name,
                    var.levels.len()
                )));
            }
            if var.levels.len() > MAX_LEVELS {
                return Err(Error::Codebook(format!(
                    "variable '{}' declares more than {MAX_LEVELS} levels",
                    var.name
                )));
            }
            let mut labels = HashSet::new();
            for label in &var.levels {
                if !labels.insert(label.as_str()) {
                    return Err(Error::Codebook(format!(
                        "variable '{}' repeats level label '{label}'",
                        var.name
                    )));
                }
                if *label == self.na_token {
                    return Err(Error::Codebook(format!(
                        "variable '{}' uses the na_token '{label}' as a level label",
                        var.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_levels(&self, var: usize) -> usize {
        self.variables[var].levels.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.variables.iter().map(Variable::n_levels).collect()
    }

    pub fn name(&self, var: usize) -> &str {
        &self.variables[var].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }
}

/// An n x p matrix of level codes plus a missingness mask.
///
/// Storage is column-major. Cells flagged missing hold an unspecified
/// placeholder code and must not be read as data.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDataset {
    codebook: Arc<Codebook>,
    n: usize,
    columns: Vec<Vec<Code>>,
    missing: Vec<Vec<bool>>,
}

impl CategoricalDataset {
    pub fn new(codebook: Arc<Codebook>, columns: Vec<Vec<Code>>, missing: Vec<Vec<bool>>) -> Result<Self> {
        let p = codebook.n_vars();
        if columns.len() != p || missing.len() != p {
            return Err(Error::Dataset(format!(
                "expected {p} columns, got {} value columns and {} mask columns",
                columns.len(),
                missing.len()
            )));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::Dataset("dataset must contain at least one row".into()));
        }
        for j in 0..p {
            if columns[j].len() != n || missing[j].len() != n {
                return Err(Error::Dataset(format!(
                    "column '{}' has inconsistent length",
                    codebook.name(j)
                )));
            }
            let d = codebook.n_levels(j);
            for i in 0..n {
                let c = columns[j][i];
                if !missing[j][i] && c as usize >= d {
                    return Err(Error::Dataset(format!(
                        "row {i}, column '{}': code {c} out of range for {d} levels",
                        codebook.name(j)
                    )));
                }
            }
        }
        let mut columns = columns;
        for j in 0..p {
            for i in 0..n {
                if missing[j][i] {
                    columns[j][i] = 0;
                }
            }
        }
        Ok(CategoricalDataset {
            codebook,
            n,
            columns,
            missing,
        })
    }

    /// Fully observed dataset from value columns.
    pub fn complete(codebook: Arc<Codebook>, columns: Vec<Vec<Code>>) -> Result<Self> {
        let missing = columns.iter().map(|c| vec![false; c.len()]).collect();
        Self::new(codebook, columns, missing)
    }

    /// Fully observed dataset from row-major records.
    pub fn from_rows(codebook: Arc<Codebook>, rows: &[Vec<Code>]) -> Result<Self> {
        let p = codebook.n_vars();
        let mut columns = vec![Vec::with_capacity(rows.len()); p];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Dataset(format!(
                    "row {i} has {} values, expected {p}",
                    row.len()
                )));
            }
            for (j, &c) in row.iter().enumerate() {
                columns[j].push(c);
            }
        }
        Self::complete(codebook, columns)
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_arc(&self) -> &Arc<Codebook> {
        &self.codebook
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn n_levels(&self, var: usize) -> usize {
        self.codebook.n_levels(var)
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.codebook.level_counts()
    }

    /// Raw column values; missing positions hold placeholders.
    pub fn column(&self, var: usize) -> &[Code] {
        &self.columns[var]
    }

    pub fn columns(&self) -> &[Vec<Code>] {
        &self.columns
    }

    pub fn mask(&self, var: usize) -> &[bool] {
        &self.missing[var]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.missing
    }

    pub fn is_missing(&self, row: usize, var: usize) -> bool {
        self.missing[var][row]
    }

    pub fn get(&self, row: usize, var: usize) -> Option<Code> {
        if self.missing[var][row] {
            None
        } else {
            Some(self.columns[var][row])
        }
    }

    pub fn missing_count(&self, var: usize) -> usize {
        self.missing[var].iter().filter(|&&m| m).count()
    }

    pub fn total_missing(&self) -> usize {
        (0..self.n_vars()).map(|j| self.missing_count(j)).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.missing.iter().all(|col| col.iter().all(|&m| !m))
    }

    /// Observed-value counts per level for one variable.
    pub fn observed_counts(&self, var: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_levels(var)];
        for (c, &m) in self.columns[var].iter().zip(&self.missing[var]) {
            if !m {
                counts[*c as usize] += 1;
            }
        }
        counts
    }

    /// Same values with every cell in `mask` marked missing.
    pub fn with_mask(&self, missing: Vec<Vec<bool>>) -> Result<Self> {
        Self::new(self.codebook.clone(), self.columns.clone(), missing)
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let columns = self
            .columns
            .iter()
            .map(|col| rows.iter().map(|&i| col[i]).collect())
            .collect();
        let missing = self
            .missing
            .iter()
            .map(|col| rows.iter().map(|&i| col[i]).collect())
            .collect();
        Self::new(self.codebook.clone(), columns, missing)
    }

    /// Replace missing cells by `fill`, producing a fully observed dataset.
    /// Observed cells are taken from `self` regardless of `fill`.
    pub fn completed_with(&self, fill: &[Vec<Code>]) -> Result<Self> {
        let mut columns = self.columns.clone();
        for (j, col) in columns.iter_mut().enumerate() {
            for (i, c) in col.iter_mut().enumerate() {
                if self.missing[j][i] {
                    *c = fill[j][i];
                }
            }
        }
        Self::complete(self.codebook.clone(), columns)
    }

    pub fn label(&self, row: usize, var: usize) -> &str {
        if self.missing[var][row] {
            &self.codebook.na_token
        } else {
            &self.codebook.variables[var].levels[self.columns[var][row] as usize]
        }
    }
}

/// Read a delimited file with a header row into a dataset.
///
/// Columns are matched to codebook variables by header name and may appear
/// in any order, but every variable must be present exactly once.
pub fn load_csv(path: impl AsRef<Path>, codebook: &Codebook) -> Result<CategoricalDataset> {
    let path = path.as_ref();
    codebook.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();

    let mut var_for_field = Vec::with_capacity(headers.len());
    let mut seen = vec![false; codebook.n_vars()];
    for name in headers.iter() {
        let var = codebook.index_of(name).ok_or_else(|| Error::UnknownVariable {
            path: path.to_path_buf(),
            name: name.to_string(),
        })?;
        if seen[var] {
            return Err(Error::Dataset(format!("{}: duplicate header '{name}'", path.display())));
        }
        seen[var] = true;
        var_for_field.push(var);
    }
    if let Some(var) = seen.iter().position(|s| !s) {
        return Err(Error::MissingVariable {
            path: path.to_path_buf(),
            name: codebook.name(var).to_string(),
        });
    }

    let lookup: Vec<HashMap<&str, Code>> = codebook
        .variables
        .iter()
        .map(|v| {
            v.levels
                .iter()
                .enumerate()
                .map(|(c, l)| (l.as_str(), c as Code))
                .collect()
        })
        .collect();

    let p = codebook.n_vars();
    let mut columns: Vec<Vec<Code>> = vec![Vec::new(); p];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); p];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row,
                found: record.len(),
                expected: headers.len(),
            });
        }
        for (field, &var) in record.iter().zip(&var_for_field) {
            if field == codebook.na_token {
                columns[var].push(0);
                missing[var].push(true);
            } else {
                let code = *lookup[var].get(field).ok_or_else(|| Error::UnknownLevel {
                    path: path.to_path_buf(),
                    row,
                    column: codebook.name(var).to_string(),
                    label: field.to_string(),
                })?;
                columns[var].push(code);
                missing[var].push(false);
            }
        }
    }
    CategoricalDataset::new(Arc::new(codebook.clone()), columns, missing)
}

/// Write a dataset as CSV in codebook column order; missing cells become the
/// codebook's na_token.
pub fn write_csv(data: &CategoricalDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(data.codebook().variables.iter().map(|v| v.name.as_str()))?;
    let p = data.n_vars();
    let mut record: Vec<&str> = Vec::with_capacity(p);
    for i in 0..data.n_rows() {
        record.clear();
        for j in 0..p {
            record.push(data.label(i, j));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    Marginal,
    Bivariate,
    Trivariate,
}

impl EstimandKind {
    pub fn order(self) -> usize {
        match self {
            EstimandKind::Marginal => 1,
            EstimandKind::Bivariate => 2,
            EstimandKind::Trivariate => 3,
        }
    }

    pub fn from_order(order: usize) -> Option<Self> {
        match order {
            1 => Some(EstimandKind::Marginal),
            2 => Some(EstimandKind::Bivariate),
            3 => Some(EstimandKind::Trivariate),
            _ => None,
        }
    }

    pub const ALL: [EstimandKind; 3] = [
        EstimandKind::Marginal,
        EstimandKind::Bivariate,
        EstimandKind::Trivariate,
    ];
}

/// A cell probability P(Y_a = x, Y_b = y, ...) over one to three variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimand {
    pub kind: EstimandKind,
    /// (variable index, level code) pairs, variables strictly increasing.
    pub cells: Vec<(usize, Code)>,
    /// Population value Q.
    pub population_value: f64,
}

impl Estimand {
    pub fn new(cells: Vec<(usize, Code)>, population_value: f64) -> Result<Self> {
        let kind = EstimandKind::from_order(cells.len())
            .ok_or_else(|| Error::Dataset(format!("estimand must span 1-3 variables, got {}", cells.len())))?;
        let mut vars: Vec<usize> = cells.iter().map(|c| c.0).collect();
        vars.sort_unstable();
        vars.dedup();
        if vars.len() != cells.len() {
            return Err(Error::Dataset("estimand repeats a variable".into()));
        }
        Ok(Estimand {
            kind,
            cells,
            population_value,
        })
    }

    pub fn variables(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.0).collect()
    }

    /// Human-readable label such as `sex=F & race=H`.
    pub fn describe(&self, codebook: &Codebook) -> String {
        self.cells
            .iter()
            .map(|&(j, c)| {
                let v = &codebook.variables[j];
                format!("{}={}", v.name, v.levels[c as usize])
            })
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

/// Enumerates all k-subsets of 0..p in lexicographic order.
pub(crate) fn combinations(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > p {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == i - 1 + p - k {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for t in i..k {
            idx[t] = idx[t - 1] + 1;
        }
    }
}

/// Counts of the joint table of `vars` over all rows, flattened with the
/// first variable varying slowest. Missing cells must not be present.
fn contingency(data: &CategoricalDataset, vars: &[usize]) -> Vec<usize> {
    let dims: Vec<usize> = vars.iter().map(|&j| data.n_levels(j)).collect();
    let size: usize = dims.iter().product();
    let mut counts = vec![0usize; size];
    let cols: Vec<&[Code]> = vars.iter().map(|&j| data.column(j)).collect();
    for i in 0..data.n_rows() {
        let mut idx = 0usize;
        for (col, &d) in cols.iter().zip(&dims) {
            idx = idx * d + col[i] as usize;
        }
        counts[idx] += 1;
    }
    counts
}

fn unflatten(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for t in (0..dims.len()).rev() {
        out[t] = idx % dims[t];
        idx /= dims[t];
    }
    out
}

/// Every marginal / bivariate / trivariate cell up to `max_order`, with its
/// population proportion, before any filtering.
pub fn enumerate_candidate_estimands(population: &CategoricalDataset, max_order: usize) -> Result<Vec<Estimand>> {
    if !population.is_complete() {
        return Err(Error::Dataset("estimands require a fully observed population".into()));
    }
    if !(1..=3).contains(&max_order) {
        return Err(Error::Config(format!("max_order must be 1..=3, got {max_order}")));
    }
    let n = population.n_rows() as f64;
    let mut out = Vec::new();
    for order in 1..=max_order {
        let kind = EstimandKind::from_order(order).expect("order in 1..=3");
        for vars in combinations(population.n_vars(), order) {
            let dims: Vec<usize> = vars.iter().map(|&j| population.n_levels(j)).collect();
            let counts = contingency(population, &vars);
            for (idx, &count) in counts.iter().enumerate() {
                let levels = unflatten(idx, &dims);
                let cells = vars.iter().zip(levels).map(|(&j, c)| (j, c as Code)).collect();
                out.push(Estimand {
                    kind,
                    cells,
                    population_value: count as f64 / n,
                });
            }
        }
    }
    Ok(out)
}

/// Whether a proportion is usable at sample size `n_sample`: both
/// n·p and n·(1−p) must exceed 10.
pub fn passes_normality_filter(prob: f64, n_sample: usize) -> bool {
    let n = n_sample as f64;
    n * prob > 10.0 && n * (1.0 - prob) > 10.0
}

/// Cell-probability estimands whose population value clears the
/// normality filter at the intended per-sample size `n_sample`.
pub fn enumerate_estimands(
    population: &CategoricalDataset,
    n_sample: usize,
    max_order: usize,
) -> Result<Vec<Estimand>> {
    Ok(enumerate_candidate_estimands(population, max_order)?
        .into_iter()
        .filter(|e| passes_normality_filter(e.population_value, n_sample))
        .collect())
}

/// Completed-data point estimate and variance for one estimand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub q: f64,
    pub u: f64,
}

impl ProportionEstimate {
    pub fn from_count(count: usize, n: usize) -> Self {
        let q = count as f64 / n as f64;
        ProportionEstimate {
            q,
            u: q * (1.0 - q) / n as f64,
        }
    }
}

/// Sample proportion of rows matching every cell of `e`, with variance
/// q(1−q)/n.
pub fn estimate(completed: &CategoricalDataset, e: &Estimand) -> ProportionEstimate {
    debug_assert!(completed.is_complete());
    let count = (0..completed.n_rows())
        .filter(|&i| e.cells.iter().all(|&(j, c)| completed.column(j)[i] == c))
        .count();
    ProportionEstimate::from_count(count, completed.n_rows())
}

/// Estimands grouped by variable tuple so that a whole list can be
/// evaluated with one contingency pass per tuple.
#[derive(Debug, Clone)]
pub struct EstimandIndex {
    groups: Vec<(Vec<usize>, Vec<(usize, usize)>)>,
    len: usize,
}

impl EstimandIndex {
    pub fn new(estimands: &[Estimand], level_counts: &[usize]) -> Self {
        let mut by_vars: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut groups: Vec<(Vec<usize>, Vec<(usize, usize)>)> = Vec::new();
        for (e_idx, e) in estimands.iter().enumerate() {
            let vars = e.variables();
            let g = *by_vars.entry(vars.clone()).or_insert_with(|| {
                groups.push((vars.clone(), Vec::new()));
                groups.len() - 1
            });
            let mut flat = 0usize;
            for &(j, c) in &e.cells {
                flat = flat * level_counts[j] + c as usize;
            }
            groups[g].1.push((e_idx, flat));
        }
        EstimandIndex {
            groups,
            len: estimands.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Estimates for every indexed estimand, in the original order.
    pub fn estimate_all(&self, completed: &CategoricalDataset) -> Vec<ProportionEstimate> {
        debug_assert!(completed.is_complete());
        let n = completed.n_rows();
        let mut out = vec![ProportionEstimate { q: 0.0, u: 0.0 }; self.len];
        for (vars, members) in &self.groups {
            let counts = contingency(completed, vars);
            for &(e_idx, flat) in members {
                out[e_idx] = ProportionEstimate::from_count(counts[flat], n);
            }
        }
        out
    }
}
