//! CSV plot data. Numbers use 17 significant digits and `.` as separator.

use std::path::{Path, PathBuf};

use tisa::io::format_value;
use tisa::Matrix;

use crate::failure::Failure;

pub struct Table {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, Failure> {
        let writer = csv::Writer::from_path(path).map_err(|e| Failure::output(format!("{}: {e}", path.display())))?;
        let mut t = Self {
            writer,
            path: path.to_path_buf(),
        };
        t.row(header.iter().map(|s| s.to_string()))?;
        Ok(t)
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), Failure> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer
            .write_record(&fields)
            .map_err(|e| Failure::output(format!("{}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), Failure> {
        self.writer
            .flush()
            .map_err(|e| Failure::output(format!("{}: {e}", self.path.display())))
    }
}

/// `i,j,value` for every entry.
pub fn write_heatmap(path: &Path, m: &Matrix) -> Result<(), Failure> {
    let mut t = Table::create(path, &["i", "j", "value"])?;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            t.row([i.to_string(), j.to_string(), format_value(m.get(i, j))])?;
        }
    }
    t.finish()
}

pub fn write_profile(path: &Path, points: impl IntoIterator<Item = (i64, f64)>) -> Result<(), Failure> {
    let mut t = Table::create(path, &["offset", "value"])?;
    for (k, v) in points {
        t.row([k.to_string(), format_value(v)])?;
    }
    t.finish()
}

/// Reads `offset,value` records. A leading header row is skipped when its
/// first field is not an integer.
pub fn read_profile(path: &Path) -> Result<Vec<(i64, f64)>, Failure> {
    let bad = |line: usize, msg: String| Failure::input(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(line, format!("expected 2 fields, found {}", record.len())));
        }
        let offset = match record[0].parse::<i64>() {
            Ok(k) => k,
            Err(_) if idx == 0 => continue,
            Err(_) => return Err(bad(line, format!("offset {:?} is not an integer", &record[0]))),
        };
        let value: f64 = record[1]
            .parse()
            .map_err(|_| bad(line, format!("value {:?} is not a number", &record[1])))?;
        if !value.is_finite() {
            return Err(bad(line, "value is not finite".into()));
        }
        pairs.push((offset, value));
    }
    Ok(pairs)
}

/// `out` with its extension replaced by `suffix`, e.g. `k.json` to
/// `k.samples.csv`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}
