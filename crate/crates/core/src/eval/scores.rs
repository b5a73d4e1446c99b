//! Per-image class scores and their CSV form (`id,<class names...>`).

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Head;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub kind: Head,
    pub ids: Vec<String>,
    pub classes: Vec<String>,
    /// One row per image, one column per class.
    pub rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    /// Validates shape, finite entries and id uniqueness.
    pub fn new(kind: Head, ids: Vec<String>, classes: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!("{} ids for {} score rows", ids.len(), rows.len())));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != classes.len()) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} scores for {} classes",
                r.len(),
                classes.len()
            )));
        }
        if rows.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::DimensionMismatch("score matrix contains NaN".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DimensionMismatch(format!("duplicate id `{dup}`")));
        }
        Ok(ScoreMatrix { kind, ids, classes, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Scores of every image for class `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("id").chain(self.classes.iter().map(String::as_str));
        w.write_record(header).map_err(csv_err)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            // `{}` on f64 prints the shortest string that parses back exactly.
            let fields = std::iter::once(id.clone()).chain(row.iter().map(|v| format!("{v}")));
            w.write_record(fields).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv { line: 0, reason: e.to_string() })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, kind: Head) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
        let mut records = r.records();
        let header = records
            .next()
            .ok_or(Error::Csv { line: 1, reason: "missing header".into() })?
            .map_err(csv_err)?;
        if header.get(0) != Some("id") {
            return Err(Error::Csv { line: 1, reason: "first column must be `id`".into() });
        }
        let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let (mut ids, mut rows) = (Vec::new(), Vec::new());
        for (k, rec) in records.enumerate() {
            let line = k + 2;
            let rec = rec.map_err(csv_err)?;
            if rec.len() != classes.len() + 1 {
                return Err(Error::Csv {
                    line,
                    reason: format!("expected {} fields, found {}", classes.len() + 1, rec.len()),
                });
            }
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| Error::Csv {
                        line,
                        reason: format!("bad number `{f}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        ScoreMatrix::new(kind, ids, classes, rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, kind: Head) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, kind)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Csv { line, reason: e.to_string() }
}
