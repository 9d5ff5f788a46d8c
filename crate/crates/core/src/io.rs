//! CSV helpers. Numbers are written with Rust's shortest round-trip `f64`
//! formatting, so every value parses back bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Header `label,{prefix}_1..{prefix}_d`, then one row per vector.
pub fn write_labeled_rows<'a, W, I>(out: W, prefix: &str, rows: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a Vec<f64>, &'a usize)>,
{
    let mut out = BufWriter::new(out);
    let mut rows = rows.into_iter().peekable();
    let dim = rows.peek().map(|(v, _)| v.len()).unwrap_or(0);
    write!(out, "label")?;
    for i in 1..=dim {
        write!(out, ",{prefix}_{i}")?;
    }
    writeln!(out)?;
    for (v, label) in rows {
        write!(out, "{label}")?;
        for x in v {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// Inverse of [`write_labeled_rows`].
pub fn read_labeled_rows<R: BufRead>(input: R) -> Result<(Vec<Vec<f64>>, Vec<usize>), CsvError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let mut fields = record.iter();
        let label = fields
            .next()
            .ok_or_else(|| parse_err(line, "empty row"))?
            .parse::<usize>()
            .map_err(|e| parse_err(line, &format!("label: {e}")))?;
        let v = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, &format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        vectors.push(v);
        labels.push(label);
    }
    Ok((vectors, labels))
}

fn parse_err(line: usize, message: &str) -> CsvError {
    CsvError::Parse {
        line,
        message: message.to_string(),
    }
}

pub fn create_file(path: &Path) -> std::io::Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes a simple CSV table (header + rows of pre-formatted cells).
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut out = create_file(path)?;
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
