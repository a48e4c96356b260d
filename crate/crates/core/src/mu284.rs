//! The MU284 population of 284 Swedish municipalities (Särndal, Swensson and
//! Wretman, 1992), as distributed with the R `sampling` package.
//!
//! The CSV is embedded at build time from `crates/core/data/mu284.csv` when
//! that file is present. Columns are looked up by name, so a plain
//! `write.csv(MU284, row.names = FALSE)` export works as is. The variables used
//! here are `RMT85` (variable of interest), `P85`, `P75` and `CS82`.

use std::path::Path;

use crate::data::{read_csv, CsvSchema, Dataset};
use crate::error::DataError;

/// Embedded CSV text; empty when the data was not vendored.
pub const MU284_CSV: &str = include_str!(concat!(env!("OUT_DIR"), "/mu284.csv"));

pub const MU284_N: usize = 284;

/// Auxiliary-variable configuration of the replication study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mu284Case {
    /// `P85`, `P75` and `CS82`.
    One,
    /// `CS82` only, the auxiliary variable least correlated with `RMT85`.
    Two,
}

impl Mu284Case {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Mu284Case::One),
            2 => Some(Mu284Case::Two),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Mu284Case::One => 1,
            Mu284Case::Two => 2,
        }
    }

    pub fn aux_columns(self) -> &'static [&'static str] {
        match self {
            Mu284Case::One => &["P85", "P75", "CS82"],
            Mu284Case::Two => &["CS82"],
        }
    }

    /// Auxiliary variable driving the response model:
    /// `P85` in case 1 and `CS82` in case 2.
    pub fn response_driver(self) -> &'static str {
        match self {
            Mu284Case::One => "P85",
            Mu284Case::Two => "CS82",
        }
    }
}

pub fn is_available() -> bool {
    !MU284_CSV.trim().is_empty()
}

fn schema(case: Mu284Case, text: &str) -> CsvSchema {
    let has_label = text.lines().next().is_some_and(|h| {
        h.split(',')
            .any(|c| c.trim().trim_matches('"') == "LABEL")
    });
    CsvSchema {
        id_col: has_label.then(|| "LABEL".to_string()),
        weight_col: None,
        aux_cols: case.aux_columns().iter().map(|s| s.to_string()).collect(),
        y_col: "RMT85".into(),
    }
}

/// Census dataset for the given case: `y = RMT85`, all weights 1.
pub fn load_mu284(case: Mu284Case) -> Result<Dataset, DataError> {
    if !is_available() {
        return Err(DataError::Mu284Unavailable);
    }
    parse_mu284(MU284_CSV, case)
}

/// Parses MU284 from CSV text (same layout as the embedded asset).
pub fn parse_mu284(text: &str, case: Mu284Case) -> Result<Dataset, DataError> {
    read_csv(text.as_bytes(), &schema(case, text))
}

pub fn load_mu284_file(path: impl AsRef<Path>, case: Mu284Case) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_mu284(&text, case)
}
