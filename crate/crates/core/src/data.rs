//! Survey sample with item nonresponse, CSV ingestion and imputed estimators.
//!
//! A [`Dataset`] holds the sampled units `S` with their design weights, the
//! auxiliary matrix (column 0 is the constant variable) and the variable of
//! interest, observed for respondents only. An [`ImputedDataset`] pairs a
//! dataset with one value per nonrespondent.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::DataError;

/// Name given to the constant auxiliary column.
pub const CONSTANT_NAME: &str = "const";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    unit_ids: Vec<String>,
    weights: Vec<f64>,
    aux_names: Vec<String>,
    // row-major n x Q
    aux: Vec<f64>,
    q: usize,
    y: Vec<Option<f64>>,
    respondents: Vec<usize>,
    nonrespondents: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from row-major auxiliary values whose first column is
    /// the constant 1.
    pub fn new(
        unit_ids: Vec<String>,
        weights: Vec<f64>,
        aux_names: Vec<String>,
        aux_rows: Vec<Vec<f64>>,
        y: Vec<Option<f64>>,
    ) -> Result<Self, DataError> {
        let n = unit_ids.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if weights.len() != n || aux_rows.len() != n || y.len() != n {
            return Err(DataError::Shape(format!(
                "{} ids, {} weights, {} aux rows, {} y values",
                n,
                weights.len(),
                aux_rows.len(),
                y.len()
            )));
        }
        let q = aux_names.len();
        if q == 0 {
            return Err(DataError::Shape("no auxiliary columns".into()));
        }
        let mut aux = Vec::with_capacity(n * q);
        for (row, x) in aux_rows.iter().enumerate() {
            if x.len() != q {
                return Err(DataError::Shape(format!(
                    "row {row} has {} auxiliary values, expected {q}",
                    x.len()
                )));
            }
            if x[0] != 1.0 {
                return Err(DataError::NotConstant { row, value: x[0] });
            }
            aux.extend_from_slice(x);
        }
        for (row, &w) in weights.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(DataError::NonPositiveWeight { row, value: w });
            }
        }
        let (respondents, nonrespondents): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| y[i].is_some());
        Ok(Dataset {
            unit_ids,
            weights,
            aux_names,
            aux,
            q,
            y,
            respondents,
            nonrespondents,
        })
    }

    /// Same as [`Dataset::new`] but prepends the constant column to `aux_rows`.
    pub fn with_constant(
        unit_ids: Vec<String>,
        weights: Vec<f64>,
        aux_names: Vec<String>,
        aux_rows: Vec<Vec<f64>>,
        y: Vec<Option<f64>>,
    ) -> Result<Self, DataError> {
        let names = std::iter::once(CONSTANT_NAME.to_string())
            .chain(aux_names)
            .collect();
        let rows = aux_rows
            .into_iter()
            .map(|r| std::iter::once(1.0).chain(r).collect())
            .collect();
        Self::new(unit_ids, weights, names, rows, y)
    }

    /// Convenience constructor: ids `1..=n`, unit weights, constant prepended.
    pub fn census(aux_rows: Vec<Vec<f64>>, y: Vec<Option<f64>>) -> Result<Self, DataError> {
        let n = aux_rows.len();
        let width = aux_rows.first().map_or(0, Vec::len);
        let names = (1..=width).map(|q| format!("x{q}")).collect();
        Self::with_constant(
            (1..=n).map(|i| i.to_string()).collect(),
            vec![1.0; n],
            names,
            aux_rows,
            y,
        )
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    /// Number of auxiliary variables, constant included.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_r(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_m(&self) -> usize {
        self.nonrespondents.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn unit_id(&self, i: usize) -> &str {
        &self.unit_ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.unit_ids.iter().position(|u| u == id)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn aux_names(&self) -> &[String] {
        &self.aux_names
    }

    /// Auxiliary vector `x_i` (constant first).
    pub fn x(&self, i: usize) -> &[f64] {
        &self.aux[i * self.q..(i + 1) * self.q]
    }

    /// Values of auxiliary column `col` for every unit.
    pub fn aux_column(&self, col: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x(i)[col]).collect()
    }

    pub fn aux_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n(), self.q, &self.aux)
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn is_respondent(&self, i: usize) -> bool {
        self.y[i].is_some()
    }

    /// Response indicators `r_i`.
    pub fn response(&self) -> Vec<bool> {
        self.y.iter().map(Option::is_some).collect()
    }

    /// Unit indices of `S_r`, ascending.
    pub fn respondents(&self) -> &[usize] {
        &self.respondents
    }

    /// Unit indices of `S_m`, ascending.
    pub fn nonrespondents(&self) -> &[usize] {
        &self.nonrespondents
    }

    /// Observed `y_i`; panics for a nonrespondent.
    pub fn y_obs(&self, i: usize) -> f64 {
        self.y[i].expect("y_obs called on a nonrespondent")
    }

    /// Copy of this dataset where units with `response[i] == false` lose their y.
    pub fn mask_nonresponse(&self, response: &[bool]) -> Result<Self, DataError> {
        if response.len() != self.n() {
            return Err(DataError::Shape(format!(
                "response vector of length {} for {} units",
                response.len(),
                self.n()
            )));
        }
        let y = self
            .y
            .iter()
            .zip(response)
            .map(|(v, &r)| if r { *v } else { None })
            .collect();
        let rows = (0..self.n()).map(|i| self.x(i).to_vec()).collect();
        Self::new(
            self.unit_ids.clone(),
            self.weights.clone(),
            self.aux_names.clone(),
            rows,
            y,
        )
    }

    /// Copy with the variable of interest replaced (missingness pattern kept).
    pub fn with_y(&self, values: &[f64]) -> Result<Self, DataError> {
        if values.len() != self.n() {
            return Err(DataError::Shape("y length".into()));
        }
        let y = self
            .y
            .iter()
            .zip(values)
            .map(|(old, &v)| old.map(|_| v))
            .collect();
        let rows = (0..self.n()).map(|i| self.x(i).to_vec()).collect();
        Self::new(
            self.unit_ids.clone(),
            self.weights.clone(),
            self.aux_names.clone(),
            rows,
            y,
        )
    }

    /// Horvitz-Thompson total of the auxiliary variables over `S`.
    pub fn aux_total(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.q];
        for i in 0..self.n() {
            for (tq, xq) in t.iter_mut().zip(self.x(i)) {
                *tq += self.weights[i] * xq;
            }
        }
        t
    }

    /// `Σ_{j∈S_m} d_j x_j`, the auxiliary total carried by the nonrespondents.
    pub fn nonrespondent_aux_total(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.q];
        for &j in &self.nonrespondents {
            for (tq, xq) in t.iter_mut().zip(self.x(j)) {
                *tq += self.weights[j] * xq;
            }
        }
        t
    }

    /// Dataset as its own trivially imputed version; only valid without nonresponse.
    pub fn as_complete(&self) -> Result<ImputedDataset<'_>, DataError> {
        match self.nonrespondents.first() {
            Some(&j) => Err(DataError::Unimputed(j)),
            None => Ok(ImputedDataset {
                base: self,
                y_star: Vec::new(),
                donor_of: Some(Vec::new()),
            }),
        }
    }
}

/// Dataset completed with one imputed value per nonrespondent.
///
/// `y_star[m]` and `donor_of[m]` refer to `base.nonrespondents()[m]`; donors
/// are unit indices into `base`.
#[derive(Debug, Clone)]
pub struct ImputedDataset<'a> {
    pub base: &'a Dataset,
    pub y_star: Vec<f64>,
    pub donor_of: Option<Vec<usize>>,
}

impl<'a> ImputedDataset<'a> {
    /// Hot-deck completion: every recipient takes its donor's observed value.
    pub fn from_donors(base: &'a Dataset, donors: Vec<usize>) -> Self {
        let y_star = donors.iter().map(|&i| base.y_obs(i)).collect();
        ImputedDataset {
            base,
            y_star,
            donor_of: Some(donors),
        }
    }

    fn check(&self) -> Result<(), DataError> {
        let nm = self.base.n_m();
        if self.y_star.len() < nm {
            return Err(DataError::Unimputed(self.base.nonrespondents()[self.y_star.len()]));
        }
        Ok(())
    }

    /// Completed values in unit order: observed y or imputed y*.
    pub fn values(&self) -> Result<Vec<f64>, DataError> {
        self.check()?;
        let mut out: Vec<f64> = self.base.y().iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        for (&j, &v) in self.base.nonrespondents().iter().zip(&self.y_star) {
            out[j] = v;
        }
        Ok(out)
    }

    /// `Ŷ_I = Σ_{S_r} d_i y_i + Σ_{S_m} d_j y*_j`.
    pub fn estimate_total(&self) -> Result<f64, DataError> {
        self.check()?;
        let base = self.base;
        let observed: f64 = base
            .respondents()
            .iter()
            .map(|&i| base.weight(i) * base.y_obs(i))
            .sum();
        let imputed: f64 = base
            .nonrespondents()
            .iter()
            .zip(&self.y_star)
            .map(|(&j, &v)| base.weight(j) * v)
            .sum();
        Ok(observed + imputed)
    }

    pub fn estimate_percentile(&self, p: f64) -> Result<f64, DataError> {
        weighted_lower_quantile(&self.values()?, self.base.weights(), p)
    }

    pub fn estimate_variance(&self) -> Result<f64, DataError> {
        weighted_variance(&self.values()?, self.base.weights())
    }

    /// `X̂_I`: auxiliary total when each recipient takes its donor's `x`.
    pub fn imputed_aux_total(&self) -> Option<Vec<f64>> {
        let donors = self.donor_of.as_ref()?;
        let base = self.base;
        let mut t = vec![0.0; base.q()];
        for &i in base.respondents() {
            for (tq, xq) in t.iter_mut().zip(base.x(i)) {
                *tq += base.weight(i) * xq;
            }
        }
        for (&j, &i) in base.nonrespondents().iter().zip(donors) {
            for (tq, xq) in t.iter_mut().zip(base.x(i)) {
                *tq += base.weight(j) * xq;
            }
        }
        Some(t)
    }
}

/// Smallest value whose cumulative weight share reaches `p`.
pub fn weighted_lower_quantile(values: &[f64], weights: &[f64], p: f64) -> Result<f64, DataError> {
    if values.is_empty() {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    // relative slack absorbs rounding in the running sum
    let threshold = p * total - 1e-12 * total;
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum >= threshold {
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().unwrap()])
}

/// `Σ d_i (y_i − ȳ_w)² / Σ d_i`.
pub fn weighted_variance(values: &[f64], weights: &[f64]) -> Result<f64, DataError> {
    if values.is_empty() {
        return Err(DataError::Empty);
    }
    let sw: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / sw;
    Ok(values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / sw)
}

/// Column names used to read a dataset from CSV.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub id_col: Option<String>,
    pub weight_col: Option<String>,
    pub aux_cols: Vec<String>,
    pub y_col: String,
}

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

fn parse_num(row: usize, column: &str, raw: &str) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Reads a dataset from any CSV source. Rows are numbered from 1 (header excluded)
/// in error messages.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_idx = schema.id_col.as_deref().map(find).transpose()?;
    let w_idx = schema.weight_col.as_deref().map(find).transpose()?;
    let y_idx = find(&schema.y_col)?;
    let aux_idx: Vec<usize> = schema.aux_cols.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut ids = Vec::new();
    let mut weights = Vec::new();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        ids.push(match id_idx {
            Some(c) => rec[c].to_string(),
            None => row.to_string(),
        });
        weights.push(match w_idx {
            Some(c) => {
                let w = parse_num(row, &headers[c], &rec[c])?;
                if !(w > 0.0) {
                    return Err(DataError::NonPositiveWeight { row, value: w });
                }
                w
            }
            None => 1.0,
        });
        let x = aux_idx
            .iter()
            .map(|&c| parse_num(row, &headers[c], &rec[c]))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(x);
        let raw = &rec[y_idx];
        y.push(if is_missing_token(raw) {
            None
        } else {
            Some(parse_num(row, &schema.y_col, raw)?)
        });
    }
    if y.is_empty() {
        return Err(DataError::Empty);
    }
    if y.iter().all(Option::is_none) {
        return Err(DataError::AllMissing);
    }

    // Reuse a supplied all-ones column as the constant, otherwise prepend one.
    let mut names = schema.aux_cols.clone();
    let constant = (0..names.len()).find(|&c| rows.iter().all(|x| x[c] == 1.0));
    match constant {
        Some(c) => {
            let name = names.remove(c);
            names.insert(0, name);
            for x in rows.iter_mut() {
                let v = x.remove(c);
                x.insert(0, v);
            }
            Dataset::new(ids, weights, names, rows, y)
        }
        None => Dataset::with_constant(ids, weights, names, rows, y),
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Writes `id, weight, <aux without constant>, y` with `NA` for missing y.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W, y_name: &str) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "weight".to_string()];
    header.extend(ds.aux_names().iter().skip(1).cloned());
    header.push(y_name.to_string());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.unit_id(i).to_string(), fmt_num(ds.weight(i))];
        rec.extend(ds.x(i).iter().skip(1).map(|&v| fmt_num(v)));
        rec.push(ds.y()[i].map_or_else(|| "NA".to_string(), fmt_num));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// Writes the completed dataset with `imputed` and `donor_id` columns appended.
pub fn write_imputed_csv<W: Write>(
    imp: &ImputedDataset<'_>,
    writer: W,
    y_name: &str,
) -> Result<(), DataError> {
    let ds = imp.base;
    let values = imp.values()?;
    let mut donor = vec![String::new(); ds.n()];
    if let Some(d) = &imp.donor_of {
        for (&j, &i) in ds.nonrespondents().iter().zip(d) {
            donor[j] = ds.unit_id(i).to_string();
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "weight".to_string()];
    header.extend(ds.aux_names().iter().skip(1).cloned());
    header.extend([y_name.to_string(), "imputed".into(), "donor_id".into()]);
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.unit_id(i).to_string(), fmt_num(ds.weight(i))];
        rec.extend(ds.x(i).iter().skip(1).map(|&v| fmt_num(v)));
        rec.push(fmt_num(values[i]));
        rec.push(if ds.is_respondent(i) { "0" } else { "1" }.into());
        rec.push(donor[i].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}
