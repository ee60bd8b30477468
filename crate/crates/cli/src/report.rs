//! CSV and aligned text output, both stamped with a provenance digest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::{io_err, CliError, Result};

/// Plain-text table with columns padded to their widest cell.
#[derive(Debug, Default)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(cell, &w)| format!("{cell:<w$}")).collect();
            format!("{}\n", padded.join("  ").trim_end())
        };
        let mut out = line(&self.headers);
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }
}

/// One analysis output: a machine table and a human rendering.
#[derive(Debug)]
pub struct Report {
    pub name: String,
    pub provenance: String,
    pub csv_headers: Vec<String>,
    pub csv_rows: Vec<Vec<String>>,
    pub text: String,
}

impl Report {
    pub fn new(name: &str, provenance: String, csv_headers: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            provenance,
            csv_headers: csv_headers.iter().map(|h| h.to_string()).collect(),
            csv_rows: Vec::new(),
            text: String::new(),
        }
    }

    pub fn csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Input(format!("{} report: {e}", self.name));
        writer.write_record(&self.csv_headers).map_err(csv_err)?;
        for row in &self.csv_rows {
            writer.write_record(row).map_err(csv_err)?;
        }
        let bytes = writer.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
        let body = String::from_utf8(bytes).expect("csv output is utf-8");
        Ok(format!("# provenance {}\n{body}", self.provenance))
    }

    pub fn full_text(&self) -> String {
        format!("# provenance {}\n{}", self.provenance, self.text)
    }

    /// Writes `<name>.csv` and `<name>.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv_path = dir.join(format!("{}.csv", self.name));
        let txt_path = dir.join(format!("{}.txt", self.name));
        fs::write(&csv_path, self.csv()?).map_err(io_err(&csv_path))?;
        fs::write(&txt_path, self.full_text()).map_err(io_err(&txt_path))?;
        Ok(vec![csv_path, txt_path])
    }
}

pub fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub fn f3(x: f64) -> String {
    format!("{x:.3}")
}

/// Full-precision number for machine output.
pub fn num(x: f64) -> String {
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let mut t = Table::new(&["state", "share"]);
        t.push(vec!["Texas".into(), "0.4359".into()]);
        t.push(vec!["California".into(), "0.7050".into()]);
        assert_eq!(t.render(), "state       share\nTexas       0.4359\nCalifornia  0.7050\n");
    }

    #[test]
    fn csv_carries_provenance() {
        let mut r = Report::new("x", "abc".into(), &["a", "b"]);
        r.csv_rows.push(vec!["1".into(), "two, three".into()]);
        assert_eq!(r.csv().unwrap(), "# provenance abc\na,b\n1,\"two, three\"\n");
    }
}
