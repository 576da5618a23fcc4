//! Small helpers around the `csv` crate shared by every exporter.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 17 significant digits: enough to round-trip any `f64`. Negative zero
/// is written as zero.
pub fn fmt_f64(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// `path` labels errors; for non-file writers it is descriptive only.
pub(crate) struct CsvOut<W: Write = File> {
    writer: csv::Writer<W>,
    path: PathBuf,
}

impl CsvOut<File> {
    pub(crate) fn create(path: &Path, header: &[String]) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        Self::start(writer, path, header)
    }
}

impl<W: Write> CsvOut<W> {
    pub(crate) fn from_writer(w: W, label: &str, header: &[String]) -> Result<Self> {
        Self::start(csv::Writer::from_writer(w), Path::new(label), header)
    }

    fn start(writer: csv::Writer<W>, path: &Path, header: &[String]) -> Result<Self> {
        let mut out = Self {
            writer,
            path: path.to_path_buf(),
        };
        out.row(header)?;
        Ok(out)
    }

    pub(crate) fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer.write_record(fields).map_err(|e| Error::csv(&self.path, e))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// A header and all data rows. Every row must have the header's width.
pub(crate) fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, column: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column `{column}`: cannot parse `{raw}`"),
    })
}
