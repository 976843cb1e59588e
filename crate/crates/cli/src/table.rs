//! Numeric CSV tables with a header row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use cmsm_core::model::Dataset;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Validation(format!("{}: unreadable header: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 1;
            let rec = rec.map_err(|e| CliError::Validation(format!("{}: row {row}: {e}", path.display())))?;
            if rec.len() != names.len() {
                return Err(CliError::Validation(format!(
                    "{}: row {row}: expected {} fields, found {}",
                    path.display(),
                    names.len(),
                    rec.len()
                )));
            }
            let vals = rec
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        CliError::Validation(format!("{}: row {row}, column {}: cannot parse {s:?} as a number", path.display(), names[c]))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(vals);
        }
        Ok(Self { names, rows })
    }

    /// Writes with the shortest decimal form that parses back to the same
    /// value.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut out = String::new();
        out.push_str(&self.names.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Covariates are every column except `t` and `y`, in file order.
    pub fn to_dataset(&self) -> CliResult<Dataset> {
        let (ti, yi) = match (self.column("t"), self.column("y")) {
            (Some(t), Some(y)) => (t, y),
            _ => return Err(CliError::Validation("header must contain columns named t and y".into())),
        };
        let xcols: Vec<usize> = (0..self.names.len()).filter(|&c| c != ti && c != yi).collect();
        if xcols.is_empty() {
            return Err(CliError::Validation("need at least one covariate column".into()));
        }
        let x = self.rows.iter().flat_map(|r| xcols.iter().map(move |&c| r[c])).collect();
        let t = self.rows.iter().map(|r| r[ti]).collect();
        let y = self.rows.iter().map(|r| r[yi]).collect();
        Ok(Dataset::new(x, xcols.len(), t, y)?)
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let mut names: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
        names.push("t".into());
        names.push("y".into());
        let rows = (0..data.n())
            .map(|i| {
                let mut r = data.x_row(i).to_vec();
                r.push(data.t()[i]);
                r.push(data.y()[i]);
                r
            })
            .collect();
        Self { names, rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let t = Table { names: vec!["x1".into(), "t".into(), "y".into()], rows: vec![vec![0.1, 1.0 / 3.0, -2e-9], vec![1e300, -0.0, 7.0]] };
        t.write(&p).unwrap();
        assert_eq!(Table::read(&p).unwrap(), t);
    }

    #[test]
    fn bad_cell_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "x1,t,y\n1,2,3\n4,oops,6\n").unwrap();
        let e = Table::read(&p).unwrap_err().to_string();
        assert!(e.contains("row 2") && e.contains("column t"), "{e}");
    }

    #[test]
    fn dataset_uses_named_columns() {
        let t = Table {
            names: vec!["y".into(), "a".into(), "t".into(), "b".into()],
            rows: vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]],
        };
        let d = t.to_dataset().unwrap();
        assert_eq!((d.p(), d.x_row(1), d.t()[0], d.y()[1]), (2, &[6.0, 8.0][..], 3.0, 5.0));
    }
}
